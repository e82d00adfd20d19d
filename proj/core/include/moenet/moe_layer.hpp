#pragma once

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "moenet/balance.hpp"
#include "moenet/gates.hpp"
#include "moenet/module.hpp"
#include "moenet/routing.hpp"

namespace moenet {

enum class GateKind { GapFc, ConvGap };
enum class ExpertKind { Block, Conv };

inline std::string to_string(GateKind g) {
  return g == GateKind::GapFc ? "gap_fc" : "conv_gap";
}
inline std::string to_string(ExpertKind e) {
  return e == ExpertKind::Block ? "block" : "conv";
}

struct MoELayerConfig {
  int n_experts = 4;
  int top_k = 2;
  GateKind gate = GateKind::GapFc;
  ExpertKind expert_kind = ExpertKind::Block;
  BalanceLossKind balance_loss = BalanceLossKind::Entropy;
  double balance_coeff = 0.01;

  void validate() const {
    if (n_experts < 1)
      throw std::invalid_argument("moe config: n_experts must be >= 1");
    if (top_k < 1 || top_k > n_experts)
      throw std::invalid_argument(strcat_msg("moe config: top_k=", top_k,
                                             " outside [1,", n_experts, "]"));
    if (balance_coeff < 0.0)
      throw std::invalid_argument("moe config: balance_coeff must be >= 0");
  }
};

// Sparse mixture: only the experts named in the decision run, each on the
// sub-batch of inputs that selected it. eval_row_counter (when given) grows
// by one per (input, expert) evaluation, so a batch of B inputs adds k*B.
template <typename T>
Tensor<T> moe_forward(const Tensor<T>& x, std::span<Module<T>* const> experts,
                      const GateDecision<T>& decision,
                      long* eval_row_counter = nullptr) {
  const int n = static_cast<int>(experts.size());
  const int batch = x.shape().n;
  if (decision.n_experts() != n)
    throw std::invalid_argument(
        strcat_msg("moe_forward: decision covers ", decision.n_experts(),
                   " experts, layer has ", n));
  if (decision.batch() != batch)
    throw std::invalid_argument("moe_forward: decision batch mismatch");

  Tensor<T> out;
  Shape expert_out_shape;
  bool have_shape = false;
  std::vector<int> rows;
  std::vector<std::pair<int, int>> weight_slots;
  for (int e = 0; e < n; ++e) {
    rows.clear();
    weight_slots.clear();
    for (int b = 0; b < batch; ++b)
      for (int j = 0; j < decision.k; ++j)
        if (decision.selected_at(b, j) == e) {
          rows.push_back(b);
          weight_slots.emplace_back(b, j);
        }
    if (rows.empty()) continue;

    Tensor<T> sub = gather_rows(x, rows);
    Tensor<T> y = experts[e]->forward(sub);
    if (eval_row_counter) *eval_row_counter += static_cast<long>(rows.size());

    Shape per_input{1, y.shape().c, y.shape().h, y.shape().w};
    if (!have_shape) {
      expert_out_shape = per_input;
      have_shape = true;
    } else if (!(per_input == expert_out_shape)) {
      throw ModelBuildError(strcat_msg(
          "moe_forward: expert ", e, " output shape ", y.shape().str(),
          " disagrees with ", expert_out_shape.str()));
    }

    Tensor<T> w = gather_scalars(decision.weights, weight_slots);
    Tensor<T> contribution = scatter_rows(scale_rows(y, w), rows, batch);
    out = out.defined() ? add(out, contribution) : contribution;
  }
  return out;
}

// A gate, N experts, and the plumbing between them. fix_expert() bypasses
// the gate (keeping it intact) so a single expert handles every input with
// weight 1; unfix_expert() restores gated routing.
template <typename T>
class MoELayer : public Module<T> {
 public:
  MoELayer(MoELayerConfig cfg, std::unique_ptr<Module<T>> gate,
           std::vector<std::unique_ptr<Module<T>>> experts)
      : cfg_(cfg), gate_(std::move(gate)), experts_(std::move(experts)) {
    cfg_.validate();
    if (static_cast<int>(experts_.size()) != cfg_.n_experts)
      throw ModelBuildError("moe layer: expert count does not match config");
    this->register_module("gate", gate_.get());
    for (int e = 0; e < cfg_.n_experts; ++e) {
      expert_ptrs_.push_back(experts_[e].get());
      this->register_module(strcat_msg("expert", e), experts_[e].get());
    }
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    const int batch = x.shape().n;
    if (fixed_expert_) {
      last_decision_ = fixed_decision(batch, *fixed_expert_);
    } else {
      Tensor<T> logits = gate_->forward(x);
      last_decision_ = route(logits, cfg_.top_k);
    }
    return moe_forward(x, std::span<Module<T>* const>(expert_ptrs_),
                       last_decision_, &eval_rows_);
  }

  const MoELayerConfig& config() const { return cfg_; }
  Module<T>& gate() { return *gate_; }
  std::span<Module<T>* const> experts() { return expert_ptrs_; }
  Module<T>& expert(int i) { return *expert_ptrs_.at(i); }

  void fix_expert(int index) {
    if (index < 0 || index >= cfg_.n_experts)
      throw std::invalid_argument(strcat_msg("fix_expert: index ", index,
                                             " out of range [0,",
                                             cfg_.n_experts, ")"));
    fixed_expert_ = index;
  }
  void unfix_expert() { fixed_expert_.reset(); }
  std::optional<int> fixed_expert() const { return fixed_expert_; }

  // Decision recorded by the most recent forward; the graph through scores
  // and weights stays alive until the next forward.
  const GateDecision<T>& last_decision() const { return last_decision_; }
  bool has_decision() const { return last_decision_.scores.defined(); }

  // Configured balancing loss on the most recent decision; undefined tensor
  // when the kind is None.
  Tensor<T> balance_loss_value() {
    if (cfg_.balance_loss == BalanceLossKind::None || !has_decision())
      return Tensor<T>();
    switch (cfg_.balance_loss) {
      case BalanceLossKind::Entropy:
        return entropy_loss(importance(last_decision_));
      case BalanceLossKind::Kl:
        return kl_loss(importance(last_decision_));
      case BalanceLossKind::Switch:
        return switch_loss(last_decision_);
      default:
        return Tensor<T>();
    }
  }

  long expert_rows_evaluated() const { return eval_rows_; }
  void reset_eval_counter() { eval_rows_ = 0; }

  const std::string& layer_path() const { return layer_path_; }
  void set_layer_path(std::string path) { layer_path_ = std::move(path); }

  Shape append_cost(const Shape& in, const std::string& path, int k_override,
                    std::vector<LayerCost>& out) override {
    const int k = k_override > 0 ? k_override : cfg_.top_k;
    if (k < 1 || k > cfg_.n_experts)
      throw std::invalid_argument(
          strcat_msg("count_cost: k=", k, " outside [1,", cfg_.n_experts, "]"));
    std::vector<LayerCost> gate_parts;
    gate_->append_cost(in, path + ".gate", k_override, gate_parts);
    long long gate_flops = 0;
    for (auto& p : gate_parts) gate_flops += p.flops;

    std::vector<LayerCost> expert_parts;
    Shape expert_out =
        expert_ptrs_[0]->append_cost(in, path + ".expert", k_override,
                                     expert_parts);
    long long expert_flops = 0;
    for (auto& p : expert_parts) expert_flops += p.flops;

    // One gate pass, exactly k expert passes; parameters cover all N experts
    // regardless of k. Routing arithmetic: softmax over N, renormalization
    // over k, weighted mixture ((2k-1) ops per output element).
    LayerCost total{path, this->parameter_count(),
                    gate_flops + static_cast<long long>(k) * expert_flops};
    total.flops += 4LL * cfg_.n_experts + 2LL * k;
    total.flops += (2LL * k - 1) * static_cast<long long>(expert_out.c) *
                   expert_out.h * expert_out.w;
    out.push_back(total);
    return expert_out;
  }

  void reset_parameters(Rng& rng) override {
    gate_->reset_parameters(rng);
    for (auto& e : experts_) e->reset_parameters(rng);
  }

 private:
  GateDecision<T> fixed_decision(int batch, int expert) const {
    GateDecision<T> d;
    d.k = 1;
    // Constant one-hot scores and unit weights; no gradient reaches the
    // bypassed gate.
    std::vector<T> scores(static_cast<size_t>(batch) * cfg_.n_experts, T(0));
    for (int b = 0; b < batch; ++b) scores[b * cfg_.n_experts + expert] = T(1);
    d.scores = Tensor<T>::from_values(Shape{batch, cfg_.n_experts, 1, 1},
                                      std::move(scores), false);
    d.selected.assign(batch, expert);
    d.weights = Tensor<T>::filled(Shape{batch, 1, 1, 1}, T(1), false);
    return d;
  }

  MoELayerConfig cfg_;
  std::unique_ptr<Module<T>> gate_;
  std::vector<std::unique_ptr<Module<T>>> experts_;
  std::vector<Module<T>*> expert_ptrs_;
  std::optional<int> fixed_expert_;
  GateDecision<T> last_decision_;
  long eval_rows_ = 0;
  std::string layer_path_;
};

}  // namespace moenet
