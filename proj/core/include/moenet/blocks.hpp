#pragma once

#include <functional>
#include <memory>

#include "moenet/layers.hpp"
#include "moenet/moe_layer.hpp"

namespace moenet {

// Builds the module occupying a convolution slot. Returns null for a plain
// convolution; a ConvMoE replacement returns an MoELayer whose experts are
// single convolutions with the slot's geometry.
template <typename T>
using ConvSlotFactory = std::function<std::unique_ptr<Module<T>>(
    int slot /*1-based*/, int in_ch, int out_ch, int ksize, int stride,
    int pad)>;

namespace detail {
template <typename T>
std::unique_ptr<Module<T>> make_conv_slot(const ConvSlotFactory<T>* factory,
                                          int slot, int in_ch, int out_ch,
                                          int ksize, int stride, int pad,
                                          bool* is_moe) {
  if (factory && *factory) {
    if (auto m = (*factory)(slot, in_ch, out_ch, ksize, stride, pad)) {
      *is_moe = true;
      return m;
    }
  }
  *is_moe = false;
  return std::make_unique<Conv2d<T>>(in_ch, out_ch, ksize, stride, pad, false);
}
}  // namespace detail

// conv3x3-bn-relu-conv3x3-bn plus skip; projection (1x1 conv + bn) when the
// shape changes. Either conv slot may hold an MoE layer.
template <typename T>
class BasicBlock : public Module<T> {
 public:
  static constexpr int kConvSlots = 2;

  BasicBlock(int in_ch, int out_ch, int stride,
             const ConvSlotFactory<T>* factory = nullptr)
      : in_ch_(in_ch), out_ch_(out_ch), stride_(stride) {
    bool moe1 = false, moe2 = false;
    conv1_ = detail::make_conv_slot<T>(factory, 1, in_ch, out_ch, 3, stride, 1,
                                       &moe1);
    bn1_ = std::make_unique<BatchNorm2d<T>>(out_ch);
    conv2_ =
        detail::make_conv_slot<T>(factory, 2, out_ch, out_ch, 3, 1, 1, &moe2);
    bn2_ = std::make_unique<BatchNorm2d<T>>(out_ch);
    this->register_module(moe1 ? "conv1.moe" : "conv1", conv1_.get());
    this->register_module("bn1", bn1_.get());
    this->register_module(moe2 ? "conv2.moe" : "conv2", conv2_.get());
    this->register_module("bn2", bn2_.get());
    if (stride != 1 || in_ch != out_ch) {
      proj_conv_ = std::make_unique<Conv2d<T>>(in_ch, out_ch, 1, stride, 0, false);
      proj_bn_ = std::make_unique<BatchNorm2d<T>>(out_ch);
      this->register_module("proj.conv", proj_conv_.get());
      this->register_module("proj.bn", proj_bn_.get());
    }
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> h = relu(bn1_->forward(conv1_->forward(x)));
    h = bn2_->forward(conv2_->forward(h));
    Tensor<T> skip = proj_conv_ ? proj_bn_->forward(proj_conv_->forward(x)) : x;
    return relu(add(h, skip));
  }

  Shape append_cost(const Shape& in, const std::string& path, int k,
                    std::vector<LayerCost>& out) override {
    std::vector<LayerCost> parts;
    Shape h = conv1_->append_cost(in, path + ".conv1", k, parts);
    h = bn1_->append_cost(h, path + ".bn1", k, parts);
    parts.push_back({path + ".relu1", 0, h.numel()});
    h = conv2_->append_cost(h, path + ".conv2", k, parts);
    h = bn2_->append_cost(h, path + ".bn2", k, parts);
    if (proj_conv_) {
      Shape s = proj_conv_->append_cost(in, path + ".proj", k, parts);
      s = proj_bn_->append_cost(s, path + ".proj.bn", k, parts);
    }
    parts.push_back({path + ".add_relu", 0, 2 * h.numel()});
    LayerCost total{path, this->parameter_count(), 0};
    for (auto& p : parts) total.flops += p.flops;
    out.push_back(total);
    return h;
  }

  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }
  int stride() const { return stride_; }
  Module<T>& conv_slot(int slot) {
    if (slot == 1) return *conv1_;
    if (slot == 2) return *conv2_;
    throw std::invalid_argument("basic block has conv slots 1 and 2");
  }

 private:
  int in_ch_, out_ch_, stride_;
  std::unique_ptr<Module<T>> conv1_;
  std::unique_ptr<BatchNorm2d<T>> bn1_;
  std::unique_ptr<Module<T>> conv2_;
  std::unique_ptr<BatchNorm2d<T>> bn2_;
  std::unique_ptr<Conv2d<T>> proj_conv_;
  std::unique_ptr<BatchNorm2d<T>> proj_bn_;
};

// 1x1 reduce, 3x3, 1x1 expand with skip; the ResNet-50 style block.
template <typename T>
class BottleneckBlock : public Module<T> {
 public:
  static constexpr int kConvSlots = 3;
  static constexpr int kExpansion = 4;

  BottleneckBlock(int in_ch, int planes, int stride,
                  const ConvSlotFactory<T>* factory = nullptr)
      : in_ch_(in_ch), planes_(planes), stride_(stride) {
    const int out_ch = planes * kExpansion;
    bool moe1 = false, moe2 = false, moe3 = false;
    conv1_ = detail::make_conv_slot<T>(factory, 1, in_ch, planes, 1, 1, 0, &moe1);
    bn1_ = std::make_unique<BatchNorm2d<T>>(planes);
    conv2_ = detail::make_conv_slot<T>(factory, 2, planes, planes, 3, stride, 1,
                                       &moe2);
    bn2_ = std::make_unique<BatchNorm2d<T>>(planes);
    conv3_ =
        detail::make_conv_slot<T>(factory, 3, planes, out_ch, 1, 1, 0, &moe3);
    bn3_ = std::make_unique<BatchNorm2d<T>>(out_ch);
    this->register_module(moe1 ? "conv1.moe" : "conv1", conv1_.get());
    this->register_module("bn1", bn1_.get());
    this->register_module(moe2 ? "conv2.moe" : "conv2", conv2_.get());
    this->register_module("bn2", bn2_.get());
    this->register_module(moe3 ? "conv3.moe" : "conv3", conv3_.get());
    this->register_module("bn3", bn3_.get());
    if (stride != 1 || in_ch != out_ch) {
      proj_conv_ =
          std::make_unique<Conv2d<T>>(in_ch, out_ch, 1, stride, 0, false);
      proj_bn_ = std::make_unique<BatchNorm2d<T>>(out_ch);
      this->register_module("proj.conv", proj_conv_.get());
      this->register_module("proj.bn", proj_bn_.get());
    }
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> h = relu(bn1_->forward(conv1_->forward(x)));
    h = relu(bn2_->forward(conv2_->forward(h)));
    h = bn3_->forward(conv3_->forward(h));
    Tensor<T> skip = proj_conv_ ? proj_bn_->forward(proj_conv_->forward(x)) : x;
    return relu(add(h, skip));
  }

  Shape append_cost(const Shape& in, const std::string& path, int k,
                    std::vector<LayerCost>& out) override {
    std::vector<LayerCost> parts;
    Shape h = conv1_->append_cost(in, path + ".conv1", k, parts);
    h = bn1_->append_cost(h, path + ".bn1", k, parts);
    parts.push_back({path + ".relu1", 0, h.numel()});
    h = conv2_->append_cost(h, path + ".conv2", k, parts);
    h = bn2_->append_cost(h, path + ".bn2", k, parts);
    parts.push_back({path + ".relu2", 0, h.numel()});
    h = conv3_->append_cost(h, path + ".conv3", k, parts);
    h = bn3_->append_cost(h, path + ".bn3", k, parts);
    if (proj_conv_) {
      Shape s = proj_conv_->append_cost(in, path + ".proj", k, parts);
      s = proj_bn_->append_cost(s, path + ".proj.bn", k, parts);
    }
    parts.push_back({path + ".add_relu", 0, 2 * h.numel()});
    LayerCost total{path, this->parameter_count(), 0};
    for (auto& p : parts) total.flops += p.flops;
    out.push_back(total);
    return h;
  }

  int in_channels() const { return in_ch_; }
  int out_channels() const { return planes_ * kExpansion; }
  int stride() const { return stride_; }
  Module<T>& conv_slot(int slot) {
    if (slot == 1) return *conv1_;
    if (slot == 2) return *conv2_;
    if (slot == 3) return *conv3_;
    throw std::invalid_argument("bottleneck block has conv slots 1..3");
  }

 private:
  int in_ch_, planes_, stride_;
  std::unique_ptr<Module<T>> conv1_;
  std::unique_ptr<BatchNorm2d<T>> bn1_;
  std::unique_ptr<Module<T>> conv2_;
  std::unique_ptr<BatchNorm2d<T>> bn2_;
  std::unique_ptr<Module<T>> conv3_;
  std::unique_ptr<BatchNorm2d<T>> bn3_;
  std::unique_ptr<Conv2d<T>> proj_conv_;
  std::unique_ptr<BatchNorm2d<T>> proj_bn_;
};

}  // namespace moenet
