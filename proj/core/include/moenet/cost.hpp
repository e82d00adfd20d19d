#pragma once

#include <string>
#include <vector>

#include "moenet/resnet.hpp"

namespace moenet {

// Symbolic per-input cost. Totals always equal the sum of the breakdown.
// Convention: multiply-accumulate = 2 FLOPs; batch norm, activations,
// residual adds, pooling, and routing arithmetic are all counted.
struct CostReport {
  long parameters = 0;
  long long flops_per_input = 0;
  std::vector<LayerCost> breakdown;
};

// k_active > 0 pins the number of executing experts for every MoE layer;
// 0 uses each layer's configured top_k. Parameters always count all experts.
template <typename T>
CostReport count_cost(ResNetModel<T>& model, int k_active = 0) {
  CostReport report;
  Shape in{1, model.config().input_shape[0], model.config().input_shape[1],
           model.config().input_shape[2]};
  model.append_cost(in, "", k_active, report.breakdown);
  for (const auto& row : report.breakdown) {
    report.parameters += row.params;
    report.flops_per_input += row.flops;
  }
  return report;
}

struct CostCurveRow {
  int n_experts = 0;
  int k_active = 0;
  CostReport report;
};

// One CostReport per (N, k) pair for a single-replacement MoE model family.
template <typename T>
std::vector<CostCurveRow> cost_curve(const ModelConfig& base_config,
                                     const std::vector<int>& expert_counts,
                                     const std::vector<int>& k_values) {
  if (base_config.replacements.size() != 1)
    throw std::invalid_argument(
        "cost_curve: base config must contain exactly one replacement");
  std::vector<CostCurveRow> rows;
  for (int n : expert_counts) {
    ModelConfig cfg = base_config;
    cfg.replacements[0].moe.n_experts = n;
    cfg.replacements[0].moe.top_k = 1;
    auto model = build_model<T>(cfg, /*seed=*/0);
    for (int k : k_values) {
      if (k < 1 || k > n) continue;
      rows.push_back({n, k, count_cost(*model, k)});
    }
  }
  return rows;
}

}  // namespace moenet
