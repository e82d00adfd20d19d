#pragma once

// Convolution, batch norm, fully-connected, pooling and the classification
// loss. Convolutions run as im2col + GEMM (Eigen), parallelized over batch
// elements; weight-gradient reduction uses a fixed chunk grid so results do
// not depend on the thread count.

#include <Eigen/Core>

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "moenet/ops.hpp"
#include "moenet/tensor.hpp"

namespace moenet {

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

// Valid output-column range for one kernel tap: iw = ow*stride - pad + kj
// lies in [0, W) for ow in [lo, hi).
inline std::pair<int, int> tap_range(int W, int Wo, int stride, int pad,
                                     int kj) {
  const int off = kj - pad;  // iw = ow*stride + off
  int lo = off < 0 ? (-off + stride - 1) / stride : 0;
  int hi = off < W ? (W - off + stride - 1) / stride : 0;
  lo = std::min(lo, Wo);
  hi = std::min(hi, Wo);
  return {lo, std::max(hi, lo)};
}

// Patch matrix layout: rows indexed by (ci,ki,kj), columns by (oh,ow).
// Interior rows are contiguous copies; padding is filled without per-element
// branches.
template <typename T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride,
            int pad, int Ho, int Wo, T* col) {
  const long L = static_cast<long>(Ho) * Wo;
  long r = 0;
  for (int ci = 0; ci < C; ++ci)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj, ++r) {
        T* dst = col + r * L;
        const auto [lo, hi] = tap_range(W, Wo, stride, pad, kj);
        const int off = kj - pad;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          T* drow = dst + static_cast<long>(oh) * Wo;
          if (ih < 0 || ih >= H) {
            std::fill(drow, drow + Wo, T(0));
            continue;
          }
          const T* xrow = x + (static_cast<long>(ci) * H + ih) * W;
          std::fill(drow, drow + lo, T(0));
          if (stride == 1) {
            std::copy(xrow + lo + off, xrow + hi + off, drow + lo);
          } else {
            for (int ow = lo; ow < hi; ++ow)
              drow[ow] = xrow[ow * stride + off];
          }
          std::fill(drow + hi, drow + Wo, T(0));
        }
      }
}

template <typename T>
void col2im_acc(const T* col, int C, int H, int W, int kh, int kw, int stride,
                int pad, int Ho, int Wo, T* dx) {
  const long L = static_cast<long>(Ho) * Wo;
  long r = 0;
  for (int ci = 0; ci < C; ++ci)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj, ++r) {
        const T* src = col + r * L;
        const auto [lo, hi] = tap_range(W, Wo, stride, pad, kj);
        const int off = kj - pad;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          T* xrow = dx + (static_cast<long>(ci) * H + ih) * W;
          const T* srow = src + static_cast<long>(oh) * Wo;
          if (stride == 1) {
            T* out = xrow + off;
            for (int ow = lo; ow < hi; ++ow) out[ow] += srow[ow];
          } else {
            for (int ow = lo; ow < hi; ++ow)
              xrow[ow * stride + off] += srow[ow];
          }
        }
      }
}

template <typename T>
std::vector<T>& conv_scratch() {
  static thread_local std::vector<T> buf;
  return buf;
}

}  // namespace detail

// x: (B,Cin,H,W), weight: (Cout,Cin,kh,kw), bias: (1,Cout,1,1) or null.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>* bias, int stride, int pad) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.c != ws.c)
    throw std::invalid_argument(strcat_msg("conv2d: input channels ", xs.c,
                                           " do not match weight channels ",
                                           ws.c));
  if (stride < 1 || pad < 0)
    throw std::invalid_argument("conv2d: stride must be >=1 and pad >=0");
  const int B = xs.n, Cin = xs.c, H = xs.h, W = xs.w;
  const int Cout = ws.n, kh = ws.h, kw = ws.w;
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  if (bias && (bias->shape().c != Cout || bias->shape().numel() != Cout))
    throw std::invalid_argument("conv2d: bias shape mismatch");

  const int K = Cin * kh * kw;
  const long L = static_cast<long>(Ho) * Wo;
  const bool direct = (kh == 1 && kw == 1 && stride == 1 && pad == 0);

  std::vector<Tensor<T>> parents = {x, weight};
  if (bias) parents.push_back(*bias);
  auto node = detail::make_op_node<T>(Shape{B, Cout, Ho, Wo}, parents, "conv2d");

  const T* xv = x.values().data();
  const T* wv = weight.values().data();
  const T* bv = bias ? bias->values().data() : nullptr;
  T* out = node->val.data();

  detail::CMapRM<T> Wm(wv, Cout, K);
  parallel_for(B, [&](long b) {
    const T* xb = xv + b * static_cast<long>(Cin) * H * W;
    const T* colptr = xb;
    if (!direct) {
      auto& scratch = detail::conv_scratch<T>();
      scratch.resize(static_cast<size_t>(K) * L);
      detail::im2col(xb, Cin, H, W, kh, kw, stride, pad, Ho, Wo, scratch.data());
      colptr = scratch.data();
    }
    detail::CMapRM<T> Col(colptr, K, L);
    detail::MapRM<T> O(out + b * static_cast<long>(Cout) * L, Cout, L);
    O.noalias() = Wm * Col;
    if (bv)
      for (int co = 0; co < Cout; ++co)
        O.row(co).array() += bv[co];
  });

  if (node->requires_grad) {
    auto* xn = x.node().get();
    auto* wn = weight.node().get();
    auto* bn = bias ? bias->node().get() : nullptr;
    node->backward_fn = [xn, wn, bn, B, Cin, H, W, Cout, kh, kw, stride, pad,
                         Ho, Wo, K, L, direct](TensorNode<T>& self) {
      const T* g = self.grad.data();
      const T* xv2 = xn->val.data();
      const T* wv2 = wn->val.data();
      detail::CMapRM<T> Wm2(wv2, Cout, K);

      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        for (int co = 0; co < Cout; ++co) {
          double acc = 0.0;
          for (int b = 0; b < B; ++b) {
            const T* gb = g + (b * static_cast<long>(Cout) + co) * L;
            for (long l = 0; l < L; ++l) acc += static_cast<double>(gb[l]);
          }
          bn->grad[co] += static_cast<T>(acc);
        }
      }

      if (xn->requires_grad) {
        xn->ensure_grad();
        T* gx = xn->grad.data();
        parallel_for(B, [&](long b) {
          detail::CMapRM<T> Gb(g + b * static_cast<long>(Cout) * L, Cout, L);
          if (direct) {
            detail::MapRM<T> GX(gx + b * static_cast<long>(Cin) * H * W, K, L);
            GX.noalias() += Wm2.transpose() * Gb;
          } else {
            auto& scratch = detail::conv_scratch<T>();
            scratch.resize(static_cast<size_t>(K) * L);
            detail::MapRM<T> DCol(scratch.data(), K, L);
            DCol.noalias() = Wm2.transpose() * Gb;
            detail::col2im_acc(scratch.data(), Cin, H, W, kh, kw, stride, pad,
                               Ho, Wo, gx + b * static_cast<long>(Cin) * H * W);
          }
        });
      }

      if (wn->requires_grad) {
        wn->ensure_grad();
        // Fixed chunk grid: the reduction order over chunks is independent
        // of the number of worker threads.
        constexpr int kChunk = 8;
        const int nchunks = (B + kChunk - 1) / kChunk;
        static thread_local std::vector<T> partials;
        partials.assign(static_cast<size_t>(nchunks) * Cout * K, T(0));
        T* const partial_base = partials.data();
        parallel_for(nchunks, [&](long ch) {
          detail::MapRM<T> P(partial_base + ch * static_cast<long>(Cout) * K,
                             Cout, K);
          const int b0 = static_cast<int>(ch) * kChunk;
          const int b1 = std::min(B, b0 + kChunk);
          for (int b = b0; b < b1; ++b) {
            const T* xb = xv2 + b * static_cast<long>(Cin) * H * W;
            const T* colptr = xb;
            if (!direct) {
              auto& scratch = detail::conv_scratch<T>();
              scratch.resize(static_cast<size_t>(K) * L);
              detail::im2col(xb, Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                             scratch.data());
              colptr = scratch.data();
            }
            detail::CMapRM<T> Col(colptr, K, L);
            detail::CMapRM<T> Gb(g + b * static_cast<long>(Cout) * L, Cout, L);
            P.noalias() += Gb * Col.transpose();
          }
        });
        detail::MapRM<T> GW(wn->grad.data(), Cout, K);
        for (int ch = 0; ch < nchunks; ++ch) {
          detail::CMapRM<T> P(partials.data() + ch * static_cast<long>(Cout) * K,
                              Cout, K);
          GW.noalias() += P;
        }
      }
    };
  }
  return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// Batch norm
// ---------------------------------------------------------------------------

// Training mode: normalizes with batch statistics and reports them (biased
// variance) so the owning layer can maintain running estimates.
template <typename T>
Tensor<T> batchnorm_train(const Tensor<T>& x, const Tensor<T>& gamma,
                          const Tensor<T>& beta, double eps,
                          std::vector<double>* batch_mean,
                          std::vector<double>* batch_var) {
  const Shape& s = x.shape();
  const int C = s.c;
  if (gamma.shape().numel() != C || beta.shape().numel() != C)
    throw std::invalid_argument("batchnorm: affine parameter shape mismatch");
  const int B = s.n, H = s.h, W = s.w;
  const long m = static_cast<long>(B) * H * W;
  const long hw = static_cast<long>(H) * W;

  auto node = detail::make_op_node<T>(s, {x, gamma, beta}, "batchnorm_train");
  const T* xv = x.values().data();
  const T* gv = gamma.values().data();
  const T* bv = beta.values().data();
  T* out = node->val.data();

  auto mean = std::make_shared<std::vector<double>>(C, 0.0);
  auto istd = std::make_shared<std::vector<double>>(C, 0.0);
  std::vector<double> var(C, 0.0);

  // Sequential-memory reduction over a fixed batch-chunk grid: per-chunk
  // partial (sum, sumsq) per channel, reduced in chunk order, so the result
  // is independent of the thread count.
  constexpr int kChunk = 16;
  const int nchunks = (B + kChunk - 1) / kChunk;
  static thread_local std::vector<double> partials;
  partials.assign(static_cast<size_t>(nchunks) * C * 2, 0.0);
  double* const partial_base = partials.data();
  parallel_for(nchunks, [&](long ch) {
    double* part = partial_base + ch * C * 2;
    const int b0 = static_cast<int>(ch) * kChunk;
    const int b1 = std::min(B, b0 + kChunk);
    for (int b = b0; b < b1; ++b)
      for (int c = 0; c < C; ++c) {
        const T* p = xv + (b * static_cast<long>(C) + c) * hw;
        double acc = 0.0, acc2 = 0.0;
        for (long i = 0; i < hw; ++i) {
          const double v = static_cast<double>(p[i]);
          acc += v;
          acc2 += v * v;
        }
        part[c * 2] += acc;
        part[c * 2 + 1] += acc2;
      }
  });
  for (int c = 0; c < C; ++c) {
    double acc = 0.0, acc2 = 0.0;
    for (int ch = 0; ch < nchunks; ++ch) {
      acc += partials[ch * C * 2 + c * 2];
      acc2 += partials[ch * C * 2 + c * 2 + 1];
    }
    const double mu = acc / static_cast<double>(m);
    const double v = std::max(0.0, acc2 / static_cast<double>(m) - mu * mu);
    (*mean)[c] = mu;
    var[c] = v;
    (*istd)[c] = 1.0 / std::sqrt(v + eps);
  }
  parallel_for(static_cast<long>(B) * C, [&](long bc) {
    const int c = static_cast<int>(bc % C);
    const T sc = static_cast<T>((*istd)[c] * static_cast<double>(gv[c]));
    const T sh = static_cast<T>(static_cast<double>(bv[c]) - (*mean)[c] *
                                    (*istd)[c] * static_cast<double>(gv[c]));
    const T* p = xv + bc * hw;
    T* o = out + bc * hw;
    for (long i = 0; i < hw; ++i) o[i] = p[i] * sc + sh;
  });

  if (batch_mean) *batch_mean = *mean;
  if (batch_var) *batch_var = var;

  if (node->requires_grad) {
    auto* xn = x.node().get();
    auto* gn = gamma.node().get();
    auto* btn = beta.node().get();
    node->backward_fn = [xn, gn, btn, mean, istd, B, C, hw,
                         m](TensorNode<T>& self) {
      const T* g = self.grad.data();
      const T* xv2 = xn->val.data();
      const T* gv2 = gn->val.data();
      const bool need_x = xn->requires_grad;
      const bool need_g = gn->requires_grad;
      const bool need_b = btn->requires_grad;
      if (need_x) xn->ensure_grad();
      if (need_g) gn->ensure_grad();
      if (need_b) btn->ensure_grad();

      constexpr int kChunk = 16;
      const int nchunks = (B + kChunk - 1) / kChunk;
      static thread_local std::vector<double> partials;
      partials.assign(static_cast<size_t>(nchunks) * C * 2, 0.0);
      double* const partial_base = partials.data();
      parallel_for(nchunks, [&](long ch) {
        double* part = partial_base + ch * C * 2;
        const int b0 = static_cast<int>(ch) * kChunk;
        const int b1 = std::min(B, b0 + kChunk);
        for (int b = b0; b < b1; ++b)
          for (int c = 0; c < C; ++c) {
            const double mu = (*mean)[c];
            const double is = (*istd)[c];
            const T* gp = g + (b * static_cast<long>(C) + c) * hw;
            const T* xp = xv2 + (b * static_cast<long>(C) + c) * hw;
            double sdy = 0.0, sdyx = 0.0;
            for (long i = 0; i < hw; ++i) {
              const double dy = static_cast<double>(gp[i]);
              sdy += dy;
              sdyx += dy * (static_cast<double>(xp[i]) - mu) * is;
            }
            part[c * 2] += sdy;
            part[c * 2 + 1] += sdyx;
          }
      });
      std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
      for (int c = 0; c < C; ++c) {
        for (int ch = 0; ch < nchunks; ++ch) {
          sum_dy[c] += partials[ch * C * 2 + c * 2];
          sum_dy_xhat[c] += partials[ch * C * 2 + c * 2 + 1];
        }
        if (need_g) gn->grad[c] += static_cast<T>(sum_dy_xhat[c]);
        if (need_b) btn->grad[c] += static_cast<T>(sum_dy[c]);
      }
      if (need_x) {
        T* gx = xn->grad.data();
        parallel_for(static_cast<long>(B) * C, [&](long bc) {
          const int c = static_cast<int>(bc % C);
          const double mu = (*mean)[c];
          const double is = (*istd)[c];
          const double gamma_istd_m =
              static_cast<double>(gv2[c]) * is / static_cast<double>(m);
          const T* gp = g + bc * hw;
          const T* xp = xv2 + bc * hw;
          T* gxp = gx + bc * hw;
          for (long i = 0; i < hw; ++i) {
            const double dy = static_cast<double>(gp[i]);
            const double xhat = (static_cast<double>(xp[i]) - mu) * is;
            gxp[i] += static_cast<T>(
                gamma_istd_m *
                (static_cast<double>(m) * dy - sum_dy[c] - xhat * sum_dy_xhat[c]));
          }
        });
      }
    };
  }
  return Tensor<T>(node);
}

// Eval mode: deterministic affine map using the running statistics.
template <typename T>
Tensor<T> batchnorm_eval(const Tensor<T>& x, const Tensor<T>& gamma,
                         const Tensor<T>& beta,
                         const std::vector<double>& running_mean,
                         const std::vector<double>& running_var, double eps) {
  const Shape& s = x.shape();
  const int C = s.c;
  if (gamma.shape().numel() != C || beta.shape().numel() != C ||
      static_cast<int>(running_mean.size()) != C ||
      static_cast<int>(running_var.size()) != C)
    throw std::invalid_argument("batchnorm_eval: parameter shape mismatch");
  const int B = s.n;
  const long hw = static_cast<long>(s.h) * s.w;

  auto node = detail::make_op_node<T>(s, {x, gamma, beta}, "batchnorm_eval");
  const T* xv = x.values().data();
  const T* gv = gamma.values().data();
  const T* bv = beta.values().data();
  T* out = node->val.data();

  auto istd = std::make_shared<std::vector<double>>(C);
  auto mu = std::make_shared<std::vector<double>>(running_mean);
  for (int c = 0; c < C; ++c)
    (*istd)[c] = 1.0 / std::sqrt(running_var[c] + eps);

  parallel_for(static_cast<long>(B) * C, [&](long bc) {
    const int c = static_cast<int>(bc % C);
    const double sc = (*istd)[c] * static_cast<double>(gv[c]);
    const double sh = static_cast<double>(bv[c]) - (*mu)[c] * sc;
    const T* p = xv + bc * hw;
    T* o = out + bc * hw;
    for (long i = 0; i < hw; ++i)
      o[i] = static_cast<T>(static_cast<double>(p[i]) * sc + sh);
  });

  if (node->requires_grad) {
    auto* xn = x.node().get();
    auto* gn = gamma.node().get();
    auto* btn = beta.node().get();
    node->backward_fn = [xn, gn, btn, istd, mu, B, C, hw](TensorNode<T>& self) {
      const T* g = self.grad.data();
      const T* xv2 = xn->val.data();
      const T* gv2 = gn->val.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        T* gx = xn->grad.data();
        parallel_for(static_cast<long>(B) * C, [&](long bc) {
          const int c = static_cast<int>(bc % C);
          const T sc = static_cast<T>((*istd)[c] * static_cast<double>(gv2[c]));
          const T* gp = g + bc * hw;
          T* gxp = gx + bc * hw;
          for (long i = 0; i < hw; ++i) gxp[i] += gp[i] * sc;
        });
      }
      if (gn->requires_grad || btn->requires_grad) {
        if (gn->requires_grad) gn->ensure_grad();
        if (btn->requires_grad) btn->ensure_grad();
        for (int c = 0; c < C; ++c) {
          double acc_g = 0.0, acc_b = 0.0;
          for (int b = 0; b < B; ++b) {
            const T* gp = g + (b * static_cast<long>(C) + c) * hw;
            const T* xp = xv2 + (b * static_cast<long>(C) + c) * hw;
            for (long i = 0; i < hw; ++i) {
              const double dy = static_cast<double>(gp[i]);
              acc_b += dy;
              acc_g += dy * (static_cast<double>(xp[i]) - (*mu)[c]) * (*istd)[c];
            }
          }
          if (gn->requires_grad) gn->grad[c] += static_cast<T>(acc_g);
          if (btn->requires_grad) btn->grad[c] += static_cast<T>(acc_b);
        }
      }
    };
  }
  return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// Global average pool: (B,C,H,W) -> (B,C,1,1)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape& s = x.shape();
  const long hw = static_cast<long>(s.h) * s.w;
  auto node =
      detail::make_op_node<T>(Shape{s.n, s.c, 1, 1}, {x}, "global_avg_pool");
  const T* xv = x.values().data();
  T* out = node->val.data();
  parallel_for(static_cast<long>(s.n) * s.c, [&](long bc) {
    double acc = 0.0;
    const T* p = xv + bc * hw;
    for (long i = 0; i < hw; ++i) acc += static_cast<double>(p[i]);
    out[bc] = static_cast<T>(acc / static_cast<double>(hw));
  });
  if (node->requires_grad) {
    auto* xn = x.node().get();
    node->backward_fn = [xn, hw](TensorNode<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const long nc = static_cast<long>(self.shape.n) * self.shape.c;
      parallel_for(nc, [&](long bc) {
        const T g = self.grad[bc] / static_cast<T>(hw);
        T* gx = xn->grad.data() + bc * hw;
        for (long i = 0; i < hw; ++i) gx[i] += g;
      });
    };
  }
  return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// Fully connected on (B,C,1,1): y = x W^T + b, weight (out,in,1,1)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>* bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.h != 1 || xs.w != 1)
    throw std::invalid_argument(strcat_msg(
        "linear: expected (B,C,1,1) input, got ", xs.str()));
  if (xs.c != ws.c)
    throw std::invalid_argument(strcat_msg("linear: input width ", xs.c,
                                           " does not match weight width ",
                                           ws.c));
  const int B = xs.n, In = xs.c, Out = ws.n;
  if (bias && bias->shape().numel() != Out)
    throw std::invalid_argument("linear: bias shape mismatch");

  std::vector<Tensor<T>> parents = {x, weight};
  if (bias) parents.push_back(*bias);
  auto node = detail::make_op_node<T>(Shape{B, Out, 1, 1}, parents, "linear");

  detail::CMapRM<T> X(x.values().data(), B, In);
  detail::CMapRM<T> Wm(weight.values().data(), Out, In);
  detail::MapRM<T> Y(node->val.data(), B, Out);
  Y.noalias() = X * Wm.transpose();
  if (bias) {
    const T* bv = bias->values().data();
    for (int b = 0; b < B; ++b)
      for (int o = 0; o < Out; ++o) Y(b, o) += bv[o];
  }

  if (node->requires_grad) {
    auto* xn = x.node().get();
    auto* wn = weight.node().get();
    auto* bn = bias ? bias->node().get() : nullptr;
    node->backward_fn = [xn, wn, bn, B, In, Out](TensorNode<T>& self) {
      detail::CMapRM<T> G(self.grad.data(), B, Out);
      if (xn->requires_grad) {
        xn->ensure_grad();
        detail::MapRM<T> GX(xn->grad.data(), B, In);
        detail::CMapRM<T> Wm2(wn->val.data(), Out, In);
        GX.noalias() += G * Wm2;
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        detail::MapRM<T> GW(wn->grad.data(), Out, In);
        detail::CMapRM<T> X2(xn->val.data(), B, In);
        GW.noalias() += G.transpose() * X2;
      }
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        for (int o = 0; o < Out; ++o) {
          double acc = 0.0;
          for (int b = 0; b < B; ++b) acc += static_cast<double>(G(b, o));
          bn->grad[o] += static_cast<T>(acc);
        }
      }
    };
  }
  return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// Cross entropy with logits
// ---------------------------------------------------------------------------

enum class Reduction { Mean, Sum };

template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits,
                               const std::vector<int>& labels,
                               Reduction reduction = Reduction::Mean) {
  detail::check_vector_shape(logits, "cross_entropy");
  const int B = logits.shape().n, K = logits.shape().c;
  if (static_cast<int>(labels.size()) != B)
    throw std::invalid_argument("cross_entropy: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= K)
      throw std::invalid_argument(
          strcat_msg("cross_entropy: label ", y, " out of range [0,", K, ")"));

  auto node =
      detail::make_op_node<T>(Shape{1, 1, 1, 1}, {logits}, "cross_entropy");
  const T* zv = logits.values().data();
  double total = 0.0;
  for (int b = 0; b < B; ++b) {
    const T* row = zv + b * K;
    double m = static_cast<double>(row[0]);
    for (int c = 1; c < K; ++c) m = std::max(m, static_cast<double>(row[c]));
    double denom = 0.0;
    for (int c = 0; c < K; ++c) denom += std::exp(static_cast<double>(row[c]) - m);
    total += m + std::log(denom) - static_cast<double>(row[labels[b]]);
  }
  const double w = reduction == Reduction::Mean ? 1.0 / B : 1.0;
  node->val[0] = static_cast<T>(total * w);

  if (node->requires_grad) {
    auto* zn = logits.node().get();
    auto y = labels;
    node->backward_fn = [zn, y, B, K, w](TensorNode<T>& self) {
      if (!zn->requires_grad) return;
      zn->ensure_grad();
      const T g = self.grad[0];
      const T* zv2 = zn->val.data();
      parallel_for(B, [&](long b) {
        const T* row = zv2 + b * K;
        double m = static_cast<double>(row[0]);
        for (int c = 1; c < K; ++c) m = std::max(m, static_cast<double>(row[c]));
        double denom = 0.0;
        for (int c = 0; c < K; ++c)
          denom += std::exp(static_cast<double>(row[c]) - m);
        for (int c = 0; c < K; ++c) {
          const double p = std::exp(static_cast<double>(row[c]) - m) / denom;
          const double onehot = (c == y[b]) ? 1.0 : 0.0;
          zn->grad[b * K + c] += g * static_cast<T>(w * (p - onehot));
        }
      });
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, int stride,
                 int pad) {
  return conv2d(x, weight, static_cast<const Tensor<T>*>(nullptr), stride, pad);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight) {
  return linear(x, weight, static_cast<const Tensor<T>*>(nullptr));
}

// Per-example cross-entropy values, computed outside the graph (attack
// bookkeeping needs per-input losses without building backward state).
template <typename T>
std::vector<double> per_example_ce(const Tensor<T>& logits,
                                   const std::vector<int>& labels) {
  detail::check_vector_shape(logits, "per_example_ce");
  const int B = logits.shape().n, K = logits.shape().c;
  if (static_cast<int>(labels.size()) != B)
    throw std::invalid_argument("per_example_ce: label count mismatch");
  std::vector<double> out(B);
  const T* zv = logits.values().data();
  for (int b = 0; b < B; ++b) {
    const T* row = zv + b * K;
    double m = static_cast<double>(row[0]);
    for (int c = 1; c < K; ++c) m = std::max(m, static_cast<double>(row[c]));
    double denom = 0.0;
    for (int c = 0; c < K; ++c) denom += std::exp(static_cast<double>(row[c]) - m);
    out[b] = m + std::log(denom) - static_cast<double>(row[labels[b]]);
  }
  return out;
}

}  // namespace moenet
