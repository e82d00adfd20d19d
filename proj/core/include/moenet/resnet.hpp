#pragma once

// Residual classifiers with configurable MoE replacement of blocks
// (BlockMoE) or individual convolutions (ConvMoE). CIFAR-style stem: 3x3
// stride-1 first conv, no initial max pool.

#include <array>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "moenet/blocks.hpp"

namespace moenet {

enum class Arch { Tiny, ResNet18, ResNet50 };

inline std::string to_string(Arch a) {
  switch (a) {
    case Arch::Tiny: return "tiny";
    case Arch::ResNet18: return "resnet18";
    case Arch::ResNet50: return "resnet50";
  }
  return "?";
}

inline Arch arch_from_string(const std::string& s) {
  if (s == "tiny") return Arch::Tiny;
  if (s == "resnet18") return Arch::ResNet18;
  if (s == "resnet50") return Arch::ResNet50;
  throw ConfigError(strcat_msg("unknown arch '", s,
                               "' (expected tiny|resnet18|resnet50)"));
}

struct StageDef {
  std::string name;  // conv2_x .. conv5_x
  int planes;
  int blocks;
  int stride;
};

struct ArchDef {
  int stem_out;
  bool bottleneck;
  int expansion;
  std::vector<StageDef> stages;
};

inline const ArchDef& arch_def(Arch a) {
  static const ArchDef tiny{16,
                            false,
                            1,
                            {{"conv2_x", 16, 1, 1},
                             {"conv3_x", 32, 1, 2},
                             {"conv4_x", 64, 1, 2}}};
  static const ArchDef r18{64,
                           false,
                           1,
                           {{"conv2_x", 64, 2, 1},
                            {"conv3_x", 128, 2, 2},
                            {"conv4_x", 256, 2, 2},
                            {"conv5_x", 512, 2, 2}}};
  static const ArchDef r50{64,
                           true,
                           4,
                           {{"conv2_x", 64, 3, 1},
                            {"conv3_x", 128, 4, 2},
                            {"conv4_x", 256, 6, 2},
                            {"conv5_x", 512, 3, 2}}};
  switch (a) {
    case Arch::Tiny: return tiny;
    case Arch::ResNet18: return r18;
    case Arch::ResNet50: return r50;
  }
  return tiny;
}

// One replaceable unit. block_index and conv_index are 1-based to match the
// conv5_x/"second BasicBlock" naming convention; block_index 0 means every
// block in the stage, conv_index 0 means the whole block (BlockMoE).
struct ReplacementSpec {
  std::string stage;
  int block_index = 1;
  int conv_index = 0;
  MoELayerConfig moe;
};

struct ModelConfig {
  Arch arch = Arch::Tiny;
  int num_classes = 10;
  std::array<int, 3> input_shape = {3, 32, 32};  // (C,H,W)
  std::vector<ReplacementSpec> replacements;
};

struct SlotInfo {
  std::string stage;
  int block;            // 1-based
  int convs_per_block;  // replaceable conv positions within the block
};

inline std::vector<SlotInfo> enumerate_slots(Arch arch) {
  const ArchDef& def = arch_def(arch);
  std::vector<SlotInfo> out;
  for (const auto& st : def.stages)
    for (int b = 1; b <= st.blocks; ++b)
      out.push_back({st.name, b, def.bottleneck ? 3 : 2});
  return out;
}

inline std::string describe_slots(Arch arch) {
  std::string s;
  for (const auto& slot : enumerate_slots(arch)) {
    if (!s.empty()) s += ", ";
    s += strcat_msg(slot.stage, ":block", slot.block, " (convs 1..",
                    slot.convs_per_block, ")");
  }
  return s;
}

// Expands block_index-0 ("ALL") specs and checks every replacement against
// the architecture's slot table. Returns one spec per concrete slot.
inline std::vector<ReplacementSpec> resolve_replacements(
    const ModelConfig& cfg) {
  const auto slots = enumerate_slots(cfg.arch);
  std::vector<ReplacementSpec> resolved;
  for (const auto& rep : cfg.replacements) {
    rep.moe.validate();
    const bool conv_level = rep.conv_index != 0;
    if (conv_level != (rep.moe.expert_kind == ExpertKind::Conv))
      throw ModelBuildError(
          "replacement: conv_index must be set exactly when expert_kind is "
          "conv");
    bool stage_found = false;
    bool any = false;
    for (const auto& slot : slots) {
      if (slot.stage != rep.stage) continue;
      stage_found = true;
      if (rep.block_index != 0 && rep.block_index != slot.block) continue;
      if (rep.conv_index < 0 || rep.conv_index > slot.convs_per_block)
        throw ModelBuildError(strcat_msg(
            "replacement conv index ", rep.conv_index, " invalid for ",
            to_string(cfg.arch), "; valid slots: ", describe_slots(cfg.arch)));
      ReplacementSpec r = rep;
      r.block_index = slot.block;
      resolved.push_back(r);
      any = true;
    }
    if (!stage_found || !any)
      throw ModelBuildError(strcat_msg(
          "replacement position ", rep.stage, ":block", rep.block_index,
          " does not exist in ", to_string(cfg.arch),
          "; valid slots: ", describe_slots(cfg.arch)));
  }
  std::map<std::pair<std::string, int>, int> seen;
  for (const auto& r : resolved)
    if (++seen[{r.stage, r.block_index}] > 1)
      throw ModelBuildError(strcat_msg("replacement position ", r.stage,
                                       ":block", r.block_index,
                                       " specified more than once"));
  return resolved;
}

template <typename T>
class ResNetModel : public Module<T> {
 public:
  explicit ResNetModel(const ModelConfig& cfg) : cfg_(cfg) {
    const ArchDef& def = arch_def(cfg.arch);
    const auto reps = resolve_replacements(cfg);
    auto find_rep = [&](const std::string& stage,
                        int block) -> const ReplacementSpec* {
      for (const auto& r : reps)
        if (r.stage == stage && r.block_index == block) return &r;
      return nullptr;
    };

    stem_conv_ = std::make_unique<Conv2d<T>>(cfg.input_shape[0], def.stem_out,
                                             3, 1, 1, false);
    stem_bn_ = std::make_unique<BatchNorm2d<T>>(def.stem_out);
    this->register_module("stem.conv", stem_conv_.get());
    this->register_module("stem.bn", stem_bn_.get());

    int prev = def.stem_out;
    for (size_t si = 0; si < def.stages.size(); ++si) {
      const StageDef& st = def.stages[si];
      const std::string stage_name = strcat_msg("stage", si + 2);
      for (int b = 1; b <= st.blocks; ++b) {
        const int stride = (b == 1) ? st.stride : 1;
        const int out_ch = st.planes * def.expansion;
        const ReplacementSpec* rep = find_rep(st.name, b);
        const std::string block_name = strcat_msg(stage_name, ".block", b);
        std::unique_ptr<Module<T>> unit;
        if (rep && rep->moe.expert_kind == ExpertKind::Block) {
          unit = make_block_moe(rep->moe, def, prev, st.planes, stride);
          auto* layer = static_cast<MoELayer<T>*>(unit.get());
          layer->set_layer_path(block_name + ".moe");
          moe_layers_.push_back(layer);
          this->register_module(block_name + ".moe", unit.get());
        } else if (rep) {
          MoELayer<T>* made = nullptr;
          unit = make_block_with_conv_moe(rep->moe, def, prev, st.planes,
                                          stride, rep->conv_index, &made);
          made->set_layer_path(strcat_msg(block_name, ".conv", rep->conv_index,
                                          ".moe"));
          moe_layers_.push_back(made);
          this->register_module(block_name, unit.get());
        } else {
          unit = make_plain_block(def, prev, st.planes, stride);
          this->register_module(block_name, unit.get());
        }
        units_.push_back(std::move(unit));
        prev = out_ch;
      }
    }

    head_ = std::make_unique<Linear<T>>(prev, cfg.num_classes, true);
    this->register_module("head.fc", head_.get());
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.shape().c != cfg_.input_shape[0])
      throw std::invalid_argument(strcat_msg(
          "model expects ", cfg_.input_shape[0], "-channel input, got ",
          x.shape().c));
    Tensor<T> h = relu(stem_bn_->forward(stem_conv_->forward(x)));
    for (auto& unit : units_) h = unit->forward(h);
    return head_->forward(global_avg_pool(h));
  }

  Shape append_cost(const Shape& in, const std::string& path, int k,
                    std::vector<LayerCost>& out) override {
    const std::string p = path.empty() ? std::string() : path + ".";
    Shape h = stem_conv_->append_cost(in, p + "stem.conv", k, out);
    h = stem_bn_->append_cost(h, p + "stem.bn", k, out);
    out.push_back({p + "stem.relu", 0, h.numel()});
    const ArchDef& def = arch_def(cfg_.arch);
    size_t u = 0;
    for (size_t si = 0; si < def.stages.size(); ++si)
      for (int b = 1; b <= def.stages[si].blocks; ++b, ++u)
        h = units_[u]->append_cost(
            h, strcat_msg(p, "stage", si + 2, ".block", b), k, out);
    out.push_back({p + "gap", 0, h.numel() + h.c});
    return head_->append_cost(Shape{h.n, h.c, 1, 1}, p + "head.fc", k, out);
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<MoELayer<T>*>& moe_layers() { return moe_layers_; }

 private:
  std::unique_ptr<Module<T>> make_gate(const MoELayerConfig& moe, int in_ch) {
    if (moe.gate == GateKind::GapFc)
      return std::make_unique<GapFcGate<T>>(in_ch, moe.n_experts);
    return std::make_unique<ConvGapGate<T>>(in_ch, moe.n_experts);
  }

  std::unique_ptr<Module<T>> make_plain_block(const ArchDef& def, int in_ch,
                                              int planes, int stride) {
    if (def.bottleneck)
      return std::make_unique<BottleneckBlock<T>>(in_ch, planes, stride);
    return std::make_unique<BasicBlock<T>>(in_ch, planes, stride);
  }

  std::unique_ptr<Module<T>> make_block_moe(const MoELayerConfig& moe,
                                            const ArchDef& def, int in_ch,
                                            int planes, int stride) {
    std::vector<std::unique_ptr<Module<T>>> experts;
    experts.reserve(moe.n_experts);
    for (int e = 0; e < moe.n_experts; ++e)
      experts.push_back(make_plain_block(def, in_ch, planes, stride));
    return std::make_unique<MoELayer<T>>(moe, make_gate(moe, in_ch),
                                         std::move(experts));
  }

  std::unique_ptr<Module<T>> make_block_with_conv_moe(
      const MoELayerConfig& moe, const ArchDef& def, int in_ch, int planes,
      int stride, int conv_index, MoELayer<T>** made) {
    ConvSlotFactory<T> factory =
        [&](int slot, int s_in, int s_out, int ks, int st,
            int pd) -> std::unique_ptr<Module<T>> {
      if (slot != conv_index) return nullptr;
      std::vector<std::unique_ptr<Module<T>>> experts;
      experts.reserve(moe.n_experts);
      for (int e = 0; e < moe.n_experts; ++e)
        experts.push_back(
            std::make_unique<Conv2d<T>>(s_in, s_out, ks, st, pd, false));
      auto layer = std::make_unique<MoELayer<T>>(moe, make_gate(moe, s_in),
                                                 std::move(experts));
      *made = layer.get();
      return layer;
    };
    if (def.bottleneck)
      return std::make_unique<BottleneckBlock<T>>(in_ch, planes, stride,
                                                  &factory);
    return std::make_unique<BasicBlock<T>>(in_ch, planes, stride, &factory);
  }

  ModelConfig cfg_;
  std::unique_ptr<Conv2d<T>> stem_conv_;
  std::unique_ptr<BatchNorm2d<T>> stem_bn_;
  std::vector<std::unique_ptr<Module<T>>> units_;
  std::unique_ptr<Linear<T>> head_;
  std::vector<MoELayer<T>*> moe_layers_;
};

// Deterministic model construction: identical (config, seed) pairs produce
// identical parameters.
template <typename T>
std::unique_ptr<ResNetModel<T>> build_model(const ModelConfig& cfg,
                                            uint64_t seed) {
  if (cfg.num_classes < 2)
    throw ModelBuildError("model config: num_classes must be >= 2");
  auto model = std::make_unique<ResNetModel<T>>(cfg);
  Rng rng(seed);
  model->reset_parameters(rng);
  return model;
}

}  // namespace moenet
