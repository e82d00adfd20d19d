#pragma once

#include "moenet/layers.hpp"
#include "moenet/module.hpp"

namespace moenet {

// GAP-FC gate: average each channel over space, then one FC map to expert
// logits. Spatially invariant by construction.
template <typename T>
class GapFcGate : public Module<T> {
 public:
  GapFcGate(int in_channels, int n_experts)
      : in_channels_(in_channels), fc_(in_channels, n_experts, true) {
    this->register_module("fc", &fc_);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.shape().c != in_channels_)
      throw std::invalid_argument(strcat_msg(
          "gap-fc gate: input has ", x.shape().c, " channels, gate expects ",
          in_channels_));
    return fc_.forward(global_avg_pool(x));
  }

  Shape append_cost(const Shape& in, const std::string& path, int k,
                    std::vector<LayerCost>& out) override {
    std::vector<LayerCost> parts;
    // GAP: one add per element plus one divide per channel.
    parts.push_back({path + ".gap", 0, in.numel() + in.c});
    Shape pooled{in.n, in.c, 1, 1};
    Shape os = fc_.append_cost(pooled, path + ".fc", k, parts);
    LayerCost total{path, 0, 0};
    for (auto& p : parts) {
      total.params += p.params;
      total.flops += p.flops;
    }
    out.push_back(total);
    return os;
  }

 private:
  int in_channels_;
  Linear<T> fc_;
};

// Conv-GAP gate: 3x3 convolution from C to N channels, then GAP. The conv
// sees spatial structure before pooling collapses it.
template <typename T>
class ConvGapGate : public Module<T> {
 public:
  ConvGapGate(int in_channels, int n_experts)
      : in_channels_(in_channels), conv_(in_channels, n_experts, 3, 1, 1, true) {
    this->register_module("conv", &conv_);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.shape().c != in_channels_)
      throw std::invalid_argument(strcat_msg(
          "conv-gap gate: input has ", x.shape().c, " channels, gate expects ",
          in_channels_));
    return global_avg_pool(conv_.forward(x));
  }

  Shape append_cost(const Shape& in, const std::string& path, int k,
                    std::vector<LayerCost>& out) override {
    std::vector<LayerCost> parts;
    Shape conv_out = conv_.append_cost(in, path + ".conv", k, parts);
    parts.push_back({path + ".gap", 0, conv_out.numel() + conv_out.c});
    LayerCost total{path, 0, 0};
    for (auto& p : parts) {
      total.params += p.params;
      total.flops += p.flops;
    }
    out.push_back(total);
    return Shape{conv_out.n, conv_out.c, 1, 1};
  }

 private:
  int in_channels_;
  Conv2d<T> conv_;
};

}  // namespace moenet
