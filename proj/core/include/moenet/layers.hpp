#pragma once

#include <cmath>
#include <vector>

#include "moenet/module.hpp"
#include "moenet/nn_ops.hpp"

namespace moenet {

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d(int in_ch, int out_ch, int ksize, int stride, int pad,
         bool with_bias = false)
      : in_ch_(in_ch),
        out_ch_(out_ch),
        ksize_(ksize),
        stride_(stride),
        pad_(pad),
        weight_(this->register_parameter("weight",
                                         Shape{out_ch, in_ch, ksize, ksize})),
        bias_(with_bias
                  ? &this->register_parameter("bias", Shape{1, out_ch, 1, 1})
                  : nullptr) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    return conv2d(x, weight_.value, bias_ ? &bias_->value : nullptr, stride_,
                  pad_);
  }

  void reset_parameters(Rng& rng) override {
    const double fan_in = static_cast<double>(in_ch_) * ksize_ * ksize_;
    const double bound = 1.0 / std::sqrt(fan_in);
    for (auto& v : weight_.value.mutable_values())
      v = static_cast<T>(rng.uniform(-bound, bound));
    if (bias_)
      for (auto& v : bias_->value.mutable_values())
        v = static_cast<T>(rng.uniform(-bound, bound));
  }

  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }
  int kernel_size() const { return ksize_; }
  int stride() const { return stride_; }
  int padding() const { return pad_; }
  bool has_bias() const { return bias_ != nullptr; }

  Shape output_shape(const Shape& in) const {
    const int ho = (in.h + 2 * pad_ - ksize_) / stride_ + 1;
    const int wo = (in.w + 2 * pad_ - ksize_) / stride_ + 1;
    return Shape{in.n, out_ch_, ho, wo};
  }

  Shape append_cost(const Shape& in, const std::string& path, int,
                    std::vector<LayerCost>& out) override {
    const Shape os = output_shape(in);
    const long long spatial = static_cast<long long>(os.h) * os.w;
    long long flops =
        2LL * out_ch_ * in_ch_ * ksize_ * ksize_ * spatial;
    if (bias_) flops += static_cast<long long>(out_ch_) * spatial;
    out.push_back({path, this->parameter_count(), flops});
    return os;
  }

 private:
  int in_ch_, out_ch_, ksize_, stride_, pad_;
  Parameter<T>& weight_;
  Parameter<T>* bias_;
};

// Per-instance running statistics: experts inside an MoE layer each own
// their BatchNorm2d, so their statistics stay independent.
template <typename T>
class BatchNorm2d : public Module<T> {
 public:
  explicit BatchNorm2d(int channels, double eps = 1e-5, double momentum = 0.1)
      : channels_(channels),
        eps_(eps),
        momentum_(momentum),
        gamma_(this->register_parameter("weight", Shape{1, channels, 1, 1})),
        beta_(this->register_parameter("bias", Shape{1, channels, 1, 1})),
        running_mean_(channels, 0.0),
        running_var_(channels, 1.0) {
    this->register_buffer("running_mean", &running_mean_);
    this->register_buffer("running_var", &running_var_);
    reset_affine();
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    if (this->training()) {
      std::vector<double> bm, bv;
      Tensor<T> y = batchnorm_train(x, gamma_.value, beta_.value, eps_, &bm, &bv);
      const long m = static_cast<long>(x.shape().n) * x.shape().h * x.shape().w;
      const double unbias = m > 1 ? static_cast<double>(m) / (m - 1) : 1.0;
      for (int c = 0; c < channels_; ++c) {
        running_mean_[c] = (1.0 - momentum_) * running_mean_[c] + momentum_ * bm[c];
        running_var_[c] =
            (1.0 - momentum_) * running_var_[c] + momentum_ * bv[c] * unbias;
      }
      return y;
    }
    return batchnorm_eval(x, gamma_.value, beta_.value, running_mean_,
                          running_var_, eps_);
  }

  void reset_parameters(Rng&) override {
    reset_affine();
    std::fill(running_mean_.begin(), running_mean_.end(), 0.0);
    std::fill(running_var_.begin(), running_var_.end(), 1.0);
  }

  int channels() const { return channels_; }

  Shape append_cost(const Shape& in, const std::string& path, int,
                    std::vector<LayerCost>& out) override {
    // Inference-mode affine: one multiply and one add per element.
    out.push_back({path, this->parameter_count(), 2LL * in.numel()});
    return in;
  }

 private:
  void reset_affine() {
    for (auto& v : gamma_.value.mutable_values()) v = T(1);
    for (auto& v : beta_.value.mutable_values()) v = T(0);
  }

  int channels_;
  double eps_, momentum_;
  Parameter<T>& gamma_;
  Parameter<T>& beta_;
  std::vector<double> running_mean_, running_var_;
};

template <typename T>
class Linear : public Module<T> {
 public:
  Linear(int in_features, int out_features, bool with_bias = true)
      : in_(in_features),
        out_(out_features),
        weight_(this->register_parameter("weight",
                                         Shape{out_features, in_features, 1, 1})),
        bias_(with_bias
                  ? &this->register_parameter("bias", Shape{1, out_features, 1, 1})
                  : nullptr) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    return linear(x, weight_.value, bias_ ? &bias_->value : nullptr);
  }

  void reset_parameters(Rng& rng) override {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    for (auto& v : weight_.value.mutable_values())
      v = static_cast<T>(rng.uniform(-bound, bound));
    if (bias_)
      for (auto& v : bias_->value.mutable_values())
        v = static_cast<T>(rng.uniform(-bound, bound));
  }

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  bool has_bias() const { return bias_ != nullptr; }

  Parameter<T>& weight() { return weight_; }
  Parameter<T>* bias() { return bias_; }

  Shape append_cost(const Shape& in, const std::string& path, int,
                    std::vector<LayerCost>& out) override {
    long long flops = 2LL * in_ * out_;
    if (bias_) flops += out_;
    out.push_back({path, this->parameter_count(), flops});
    return Shape{in.n, out_, 1, 1};
  }

 private:
  int in_, out_;
  Parameter<T>& weight_;
  Parameter<T>* bias_;
};

}  // namespace moenet
