#pragma once

// Differentiable pointwise, reduction, and routing primitives. Each op
// builds one graph node; the backward function accumulates into parent
// grads and skips parents that do not require grad.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

#include "moenet/tensor.hpp"
#include "moenet/threads.hpp"

namespace moenet {

template <typename F>
inline void parallel_for(long n, F&& f) {
  const int nt = num_threads();
  if (nt <= 1 || n <= 1) {
    for (long i = 0; i < n; ++i) f(i);
    return;
  }
#pragma omp parallel for schedule(static) num_threads(nt)
  for (long i = 0; i < n; ++i) f(i);
}

namespace detail {
template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                             const char* op) {
  if (!(a.shape() == b.shape()))
    throw std::invalid_argument(strcat_msg(op, ": shape mismatch ",
                                           a.shape().str(), " vs ",
                                           b.shape().str()));
}

template <typename T>
inline void check_vector_shape(const Tensor<T>& x, const char* op) {
  if (x.shape().h != 1 || x.shape().w != 1)
    throw std::invalid_argument(strcat_msg(
        op, ": expected (B,C,1,1) tensor, got ", x.shape().str()));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  auto node = detail::make_op_node<T>(a.shape(), {a, b}, "add");
  const long n = a.numel();
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* out = node->val.data();
  parallel_for(n, [&](long i) { out[i] = av[i] + bv[i]; });
  if (node->requires_grad) {
    auto* an = a.node().get();
    auto* bn = b.node().get();
    node->backward_fn = [an, bn, n](TensorNode<T>& self) {
      const T* g = self.grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        T* ga = an->grad.data();
        parallel_for(n, [&](long i) { ga[i] += g[i]; });
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        T* gb = bn->grad.data();
        parallel_for(n, [&](long i) { gb[i] += g[i]; });
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  auto node = detail::make_op_node<T>(a.shape(), {a, b}, "mul");
  const long n = a.numel();
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* out = node->val.data();
  parallel_for(n, [&](long i) { out[i] = av[i] * bv[i]; });
  if (node->requires_grad) {
    auto* an = a.node().get();
    auto* bn = b.node().get();
    node->backward_fn = [an, bn, n](TensorNode<T>& self) {
      const T* g = self.grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        T* ga = an->grad.data();
        const T* bvv = bn->val.data();
        parallel_for(n, [&](long i) { ga[i] += g[i] * bvv[i]; });
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        T* gb = bn->grad.data();
        const T* avv = an->val.data();
        parallel_for(n, [&](long i) { gb[i] += g[i] * avv[i]; });
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  auto node = detail::make_op_node<T>(a.shape(), {a}, "scale");
  const long n = a.numel();
  const T* av = a.values().data();
  T* out = node->val.data();
  parallel_for(n, [&](long i) { out[i] = av[i] * factor; });
  if (node->requires_grad) {
    auto* an = a.node().get();
    node->backward_fn = [an, factor, n](TensorNode<T>& self) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const T* g = self.grad.data();
      T* ga = an->grad.data();
      parallel_for(n, [&](long i) { ga[i] += g[i] * factor; });
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  auto node = detail::make_op_node<T>(a.shape(), {a}, "relu");
  const long n = a.numel();
  const T* av = a.values().data();
  T* out = node->val.data();
  parallel_for(n, [&](long i) { out[i] = av[i] > T(0) ? av[i] : T(0); });
  if (node->requires_grad) {
    auto* an = a.node().get();
    node->backward_fn = [an, n](TensorNode<T>& self) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const T* g = self.grad.data();
      const T* av2 = an->val.data();
      T* ga = an->grad.data();
      parallel_for(n, [&](long i) {
        if (av2[i] > T(0)) ga[i] += g[i];
      });
    };
  }
  return Tensor<T>(node);
}

// Sum of every element; the standard scalarizer for tests and losses.
template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  auto node = detail::make_op_node<T>(Shape{1, 1, 1, 1}, {a}, "sum_all");
  double acc = 0.0;
  for (T v : a.values()) acc += static_cast<double>(v);
  node->val[0] = static_cast<T>(acc);
  if (node->requires_grad) {
    auto* an = a.node().get();
    node->backward_fn = [an](TensorNode<T>& self) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const T g = self.grad[0];
      for (auto& v : an->grad) v += g;
    };
  }
  return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// Row / channel reductions and broadcasts on (B,C,1,1) score tensors
// ---------------------------------------------------------------------------

// (B,N,1,1) -> (B,1,1,1), per-input sum over channels.
template <typename T>
Tensor<T> sum_channels(const Tensor<T>& x) {
  detail::check_vector_shape(x, "sum_channels");
  const int B = x.shape().n, N = x.shape().c;
  auto node = detail::make_op_node<T>(Shape{B, 1, 1, 1}, {x}, "sum_channels");
  const T* xv = x.values().data();
  for (int b = 0; b < B; ++b) {
    double acc = 0.0;
    for (int c = 0; c < N; ++c) acc += static_cast<double>(xv[b * N + c]);
    node->val[b] = static_cast<T>(acc);
  }
  if (node->requires_grad) {
    auto* xn = x.node().get();
    node->backward_fn = [xn, B, N](TensorNode<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < N; ++c) xn->grad[b * N + c] += self.grad[b];
    };
  }
  return Tensor<T>(node);
}

// (B,N,1,1) -> (1,N,1,1), sum over the batch. Importance accumulation.
template <typename T>
Tensor<T> sum_rows(const Tensor<T>& x) {
  detail::check_vector_shape(x, "sum_rows");
  const int B = x.shape().n, N = x.shape().c;
  auto node = detail::make_op_node<T>(Shape{1, N, 1, 1}, {x}, "sum_rows");
  const T* xv = x.values().data();
  for (int c = 0; c < N; ++c) {
    double acc = 0.0;
    for (int b = 0; b < B; ++b) acc += static_cast<double>(xv[b * N + c]);
    node->val[c] = static_cast<T>(acc);
  }
  if (node->requires_grad) {
    auto* xn = x.node().get();
    node->backward_fn = [xn, B, N](TensorNode<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < N; ++c) xn->grad[b * N + c] += self.grad[c];
    };
  }
  return Tensor<T>(node);
}

// y[b,c,..] = x[b,c,..] / d[b]; d is (B,1,1,1).
template <typename T>
Tensor<T> div_rowscalar(const Tensor<T>& x, const Tensor<T>& d) {
  if (d.shape().c != 1 || d.shape().h != 1 || d.shape().w != 1 ||
      d.shape().n != x.shape().n)
    throw std::invalid_argument(strcat_msg("div_rowscalar: divisor shape ",
                                           d.shape().str(),
                                           " incompatible with ",
                                           x.shape().str()));
  const int B = x.shape().n;
  const long per = x.numel() / B;
  auto node = detail::make_op_node<T>(x.shape(), {x, d}, "div_rowscalar");
  const T* xv = x.values().data();
  const T* dv = d.values().data();
  T* out = node->val.data();
  for (int b = 0; b < B; ++b)
    for (long i = 0; i < per; ++i) out[b * per + i] = xv[b * per + i] / dv[b];
  if (node->requires_grad) {
    auto* xn = x.node().get();
    auto* dn = d.node().get();
    node->backward_fn = [xn, dn, B, per](TensorNode<T>& self) {
      const T* g = self.grad.data();
      const T* xv2 = xn->val.data();
      const T* dv2 = dn->val.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (int b = 0; b < B; ++b)
          for (long i = 0; i < per; ++i)
            xn->grad[b * per + i] += g[b * per + i] / dv2[b];
      }
      if (dn->requires_grad) {
        dn->ensure_grad();
        for (int b = 0; b < B; ++b) {
          double acc = 0.0;
          for (long i = 0; i < per; ++i)
            acc += static_cast<double>(g[b * per + i]) * xv2[b * per + i];
          dn->grad[b] -= static_cast<T>(acc / (static_cast<double>(dv2[b]) * dv2[b]));
        }
      }
    };
  }
  return Tensor<T>(node);
}

// y[b,...] = x[b,...] * s[b]; s is (B,1,1,1). Used to weight expert outputs.
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.shape().c != 1 || s.shape().h != 1 || s.shape().w != 1 ||
      s.shape().n != x.shape().n)
    throw std::invalid_argument(strcat_msg("scale_rows: scale shape ",
                                           s.shape().str(),
                                           " incompatible with ",
                                           x.shape().str()));
  const int B = x.shape().n;
  const long per = x.numel() / B;
  auto node = detail::make_op_node<T>(x.shape(), {x, s}, "scale_rows");
  const T* xv = x.values().data();
  const T* sv = s.values().data();
  T* out = node->val.data();
  parallel_for(B, [&](long b) {
    for (long i = 0; i < per; ++i) out[b * per + i] = xv[b * per + i] * sv[b];
  });
  if (node->requires_grad) {
    auto* xn = x.node().get();
    auto* sn = s.node().get();
    node->backward_fn = [xn, sn, B, per](TensorNode<T>& self) {
      const T* g = self.grad.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        const T* sv2 = sn->val.data();
        T* gx = xn->grad.data();
        parallel_for(B, [&](long b) {
          for (long i = 0; i < per; ++i) gx[b * per + i] += g[b * per + i] * sv2[b];
        });
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
        const T* xv2 = xn->val.data();
        parallel_for(B, [&](long b) {
          double acc = 0.0;
          for (long i = 0; i < per; ++i)
            acc += static_cast<double>(g[b * per + i]) * xv2[b * per + i];
          sn->grad[b] += static_cast<T>(acc);
        });
      }
    };
  }
  return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// Gather / scatter
// ---------------------------------------------------------------------------

// out[b,j] = x[b, idx[b*k+j]] on (B,N,1,1) -> (B,k,1,1).
template <typename T>
Tensor<T> gather_channels(const Tensor<T>& x, const std::vector<int>& idx,
                          int k) {
  detail::check_vector_shape(x, "gather_channels");
  const int B = x.shape().n, N = x.shape().c;
  if (static_cast<long>(idx.size()) != static_cast<long>(B) * k)
    throw std::invalid_argument("gather_channels: index count mismatch");
  for (int i : idx)
    if (i < 0 || i >= N)
      throw std::invalid_argument(
          strcat_msg("gather_channels: index ", i, " out of range [0,", N, ")"));
  auto node = detail::make_op_node<T>(Shape{B, k, 1, 1}, {x}, "gather_channels");
  const T* xv = x.values().data();
  for (int b = 0; b < B; ++b)
    for (int j = 0; j < k; ++j)
      node->val[b * k + j] = xv[b * N + idx[b * k + j]];
  if (node->requires_grad) {
    auto* xn = x.node().get();
    auto indices = idx;
    node->backward_fn = [xn, indices, B, N, k](TensorNode<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int j = 0; j < k; ++j)
          xn->grad[b * N + indices[b * k + j]] += self.grad[b * k + j];
    };
  }
  return Tensor<T>(node);
}

// out[j] = x[entries[j].first, entries[j].second] -> (m,1,1,1).
template <typename T>
Tensor<T> gather_scalars(const Tensor<T>& x,
                         const std::vector<std::pair<int, int>>& entries) {
  detail::check_vector_shape(x, "gather_scalars");
  const int B = x.shape().n, N = x.shape().c;
  const int m = static_cast<int>(entries.size());
  for (auto [b, c] : entries)
    if (b < 0 || b >= B || c < 0 || c >= N)
      throw std::invalid_argument("gather_scalars: entry out of range");
  auto node = detail::make_op_node<T>(Shape{m, 1, 1, 1}, {x}, "gather_scalars");
  const T* xv = x.values().data();
  for (int j = 0; j < m; ++j)
    node->val[j] = xv[entries[j].first * N + entries[j].second];
  if (node->requires_grad) {
    auto* xn = x.node().get();
    auto es = entries;
    node->backward_fn = [xn, es, N](TensorNode<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t j = 0; j < es.size(); ++j)
        xn->grad[es[j].first * N + es[j].second] += self.grad[j];
    };
  }
  return Tensor<T>(node);
}

// Sub-batch selection: out[j] = x[rows[j]] over full (C,H,W) slices.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int>& rows) {
  const Shape& s = x.shape();
  for (int r : rows)
    if (r < 0 || r >= s.n)
      throw std::invalid_argument(strcat_msg("gather_rows: row ", r,
                                             " out of range [0,", s.n, ")"));
  const int m = static_cast<int>(rows.size());
  const long per = s.numel() / s.n;
  auto node = detail::make_op_node<T>(Shape{m, s.c, s.h, s.w}, {x}, "gather_rows");
  const T* xv = x.values().data();
  T* out = node->val.data();
  parallel_for(m, [&](long j) {
    std::copy(xv + rows[j] * per, xv + (rows[j] + 1) * per, out + j * per);
  });
  if (node->requires_grad) {
    auto* xn = x.node().get();
    auto rs = rows;
    node->backward_fn = [xn, rs, per](TensorNode<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      // Serial: duplicate rows must accumulate deterministically.
      for (size_t j = 0; j < rs.size(); ++j) {
        const T* g = self.grad.data() + j * per;
        T* gx = xn->grad.data() + rs[j] * per;
        for (long i = 0; i < per; ++i) gx[i] += g[i];
      }
    };
  }
  return Tensor<T>(node);
}

// Inverse of gather_rows: places (m,C,H,W) slices into a (B,C,H,W) tensor of
// zeros, accumulating on duplicate rows.
template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& x, const std::vector<int>& rows,
                       int batch) {
  const Shape& s = x.shape();
  if (static_cast<int>(rows.size()) != s.n)
    throw std::invalid_argument("scatter_rows: row count must equal batch dim");
  for (int r : rows)
    if (r < 0 || r >= batch)
      throw std::invalid_argument("scatter_rows: row out of range");
  const long per = s.numel() / std::max(1, s.n);
  auto node =
      detail::make_op_node<T>(Shape{batch, s.c, s.h, s.w}, {x}, "scatter_rows");
  std::fill(node->val.begin(), node->val.end(), T(0));
  const T* xv = x.values().data();
  T* out = node->val.data();
  for (size_t j = 0; j < rows.size(); ++j) {
    T* dst = out + rows[j] * per;
    const T* src = xv + j * per;
    for (long i = 0; i < per; ++i) dst[i] += src[i];
  }
  if (node->requires_grad) {
    auto* xn = x.node().get();
    auto rs = rows;
    node->backward_fn = [xn, rs, per](TensorNode<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      parallel_for(static_cast<long>(rs.size()), [&](long j) {
        const T* g = self.grad.data() + rs[j] * per;
        T* gx = xn->grad.data() + j * per;
        for (long i = 0; i < per; ++i) gx[i] += g[i];
      });
    };
  }
  return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// Softmax and top-k on per-input score vectors
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  detail::check_vector_shape(x, "softmax_channels");
  const int B = x.shape().n, N = x.shape().c;
  auto node = detail::make_op_node<T>(x.shape(), {x}, "softmax");
  const T* xv = x.values().data();
  T* out = node->val.data();
  for (int b = 0; b < B; ++b) {
    const T* row = xv + b * N;
    T m = row[0];
    for (int c = 1; c < N; ++c) m = std::max(m, row[c]);
    double denom = 0.0;
    for (int c = 0; c < N; ++c) denom += std::exp(static_cast<double>(row[c] - m));
    for (int c = 0; c < N; ++c)
      out[b * N + c] =
          static_cast<T>(std::exp(static_cast<double>(row[c] - m)) / denom);
  }
  if (node->requires_grad) {
    auto* xn = x.node().get();
    node->backward_fn = [xn, B, N](TensorNode<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int b = 0; b < B; ++b) {
        const T* s = self.val.data() + b * N;
        const T* g = self.grad.data() + b * N;
        double dot = 0.0;
        for (int c = 0; c < N; ++c) dot += static_cast<double>(g[c]) * s[c];
        for (int c = 0; c < N; ++c)
          xn->grad[b * N + c] += s[c] * (g[c] - static_cast<T>(dot));
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
struct TopK {
  std::vector<int> indices;  // B*k, per input in descending score order
  Tensor<T> values;          // (B,k,1,1); grad flows only through these
  int k = 0;
};

// Per-input k largest entries. Ties break toward the lowest index; indices
// come back in descending score order.
template <typename T>
TopK<T> topk_channels(const Tensor<T>& x, int k) {
  detail::check_vector_shape(x, "topk");
  const int B = x.shape().n, N = x.shape().c;
  if (k < 1 || k > N)
    throw std::invalid_argument(
        strcat_msg("topk: k=", k, " out of range [1,", N, "]"));
  for (T v : x.values())
    if (!std::isfinite(static_cast<double>(v)))
      throw std::invalid_argument("topk: non-finite scores");

  TopK<T> result;
  result.k = k;
  result.indices.resize(static_cast<size_t>(B) * k);
  const T* xv = x.values().data();
  std::vector<int> order(N);
  for (int b = 0; b < B; ++b) {
    const T* row = xv + b * N;
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [row](int i, int j) {
      if (row[i] != row[j]) return row[i] > row[j];
      return i < j;
    });
    std::copy(order.begin(), order.begin() + k,
              result.indices.begin() + static_cast<size_t>(b) * k);
  }
  result.values = gather_channels(x, result.indices, k);
  return result;
}

// Per-input argmax with lowest-index tie break. No gradient.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& x) {
  detail::check_vector_shape(x, "argmax_rows");
  const int B = x.shape().n, N = x.shape().c;
  std::vector<int> out(B);
  const T* xv = x.values().data();
  for (int b = 0; b < B; ++b) {
    int best = 0;
    for (int c = 1; c < N; ++c)
      if (xv[b * N + c] > xv[b * N + best]) best = c;
    out[b] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// sum_i p_i * ln(inner_scale * p_i), with 0*ln(0) := 0.
// Entropy-family losses reduce to this with inner_scale 1 (entropy) or N (KL
// against the uniform distribution).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> xlogx_sum(const Tensor<T>& p, double inner_scale) {
  for (T v : p.values())
    if (v < T(0))
      throw std::invalid_argument("xlogx_sum: negative probability mass");
  auto node = detail::make_op_node<T>(Shape{1, 1, 1, 1}, {p}, "xlogx_sum");
  double acc = 0.0;
  for (T v : p.values()) {
    const double pv = static_cast<double>(v);
    if (pv > 0.0) acc += pv * std::log(inner_scale * pv);
  }
  node->val[0] = static_cast<T>(acc);
  if (node->requires_grad) {
    auto* pn = p.node().get();
    node->backward_fn = [pn, inner_scale](TensorNode<T>& self) {
      if (!pn->requires_grad) return;
      pn->ensure_grad();
      const T g = self.grad[0];
      for (size_t i = 0; i < pn->val.size(); ++i) {
        const double pv = static_cast<double>(pn->val[i]);
        if (pv > 0.0)
          pn->grad[i] += g * static_cast<T>(std::log(inner_scale * pv) + 1.0);
      }
    };
  }
  return Tensor<T>(node);
}

}  // namespace moenet
