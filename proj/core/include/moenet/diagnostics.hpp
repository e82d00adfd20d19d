#pragma once

// Routing-collapse analysis, fixed-expert sweeps, and the robustness/
// accuracy trade-off table behind the reporting CLI.

#include <algorithm>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moenet/attacks.hpp"
#include "moenet/cost.hpp"
#include "moenet/resnet.hpp"

namespace moenet {

struct LayerRouting {
  std::string layer;
  int n_experts = 0;
  std::vector<long> top1_counts;   // per-expert assignments over the dataset
  std::vector<double> importance;  // per-expert summed gate scores
  double entropy_nats = 0.0;       // H of the count distribution
  double importance_entropy_nats = 0.0;  // H of importance/sum(importance)
  std::vector<int> dead_experts;   // zero top-1 assignments
};

struct RoutingReport {
  long dataset_size = 0;
  std::vector<LayerRouting> layers;
};

// H(P) over a count histogram, in nats; 0*ln(0) := 0.
inline double utilization_entropy(std::span<const long> counts) {
  double total = 0.0;
  for (long c : counts) total += static_cast<double>(c);
  if (total <= 0.0) return 0.0;
  double h = 0.0;
  for (long c : counts)
    if (c > 0) {
      const double p = static_cast<double>(c) / total;
      h -= p * std::log(p);
    }
  return h;
}

inline double mass_entropy(std::span<const double> mass) {
  double total = 0.0;
  for (double m : mass) total += m;
  if (total <= 0.0) return 0.0;
  double h = 0.0;
  for (double m : mass)
    if (m > 0.0) {
      const double p = m / total;
      h -= p * std::log(p);
    }
  return h;
}

// Eval-mode pass over the dataset recording every MoE layer's decisions.
template <typename T>
RoutingReport routing_report(Module<T>& model,
                             std::span<MoELayer<T>* const> layers,
                             const Dataset& ds, int batch_size = 256) {
  if (layers.empty())
    throw std::invalid_argument("routing_report: model has no MoE layer");
  if (ds.size() == 0)
    throw std::invalid_argument("routing_report: empty dataset");
  EvalModeGuard<T> guard(model);

  RoutingReport report;
  report.dataset_size = ds.size();
  std::vector<LayerRouting> rows(layers.size());
  for (size_t l = 0; l < layers.size(); ++l) {
    rows[l].layer = layers[l]->layer_path();
    rows[l].n_experts = layers[l]->config().n_experts;
    rows[l].top1_counts.assign(rows[l].n_experts, 0);
    rows[l].importance.assign(rows[l].n_experts, 0.0);
  }

  std::vector<long> idx;
  for (long start = 0; start < ds.size(); start += batch_size) {
    const long end = std::min(ds.size(), start + batch_size);
    idx.resize(end - start);
    for (long i = start; i < end; ++i) idx[i - start] = i;
    auto [x, y] = make_batch<T>(ds, idx);
    (void)y;
    model.forward(x);
    for (size_t l = 0; l < layers.size(); ++l) {
      const auto& d = layers[l]->last_decision();
      auto scores = d.scores.values();
      const int ne = d.n_experts();
      for (int b = 0; b < d.batch(); ++b) {
        rows[l].top1_counts[d.top1(b)] += 1;
        for (int e = 0; e < ne; ++e)
          rows[l].importance[e] += static_cast<double>(scores[b * ne + e]);
      }
    }
  }
  for (auto& row : rows) {
    row.entropy_nats = utilization_entropy(row.top1_counts);
    row.importance_entropy_nats = mass_entropy(row.importance);
    for (int e = 0; e < row.n_experts; ++e)
      if (row.top1_counts[e] == 0) row.dead_experts.push_back(e);
  }
  report.layers = std::move(rows);
  return report;
}

template <typename T>
RoutingReport routing_report(ResNetModel<T>& model, const Dataset& ds,
                             int batch_size = 256) {
  return routing_report(static_cast<Module<T>&>(model),
                        std::span<MoELayer<T>* const>(model.moe_layers()), ds,
                        batch_size);
}

// ---------------------------------------------------------------------------
// Fixed-expert sweep
// ---------------------------------------------------------------------------

struct FixedExpertRow {
  std::string layer;
  int expert = -1;  // -1: unmodified gated reference
  double accuracy = 0.0;
};

struct FixedExpertSweep {
  std::vector<FixedExpertRow> rows;
};

// Evaluates the gated model once, then each expert with the gate bypassed.
// The layer is always restored to gated routing afterwards.
template <typename T>
FixedExpertSweep fixed_expert_sweep(Module<T>& model,
                                    std::span<MoELayer<T>* const> layers,
                                    const Dataset& ds,
                                    const std::optional<AttackConfig>& attack,
                                    int batch_size = 256, uint64_t seed = 0) {
  if (layers.empty())
    throw std::invalid_argument("fixed_expert_sweep: model has no MoE layer");
  FixedExpertSweep sweep;
  const double gated = evaluate(model, ds, attack, batch_size, seed);
  sweep.rows.push_back({"(all)", -1, gated});
  for (auto* layer : layers) {
    const auto prior = layer->fixed_expert();
    for (int e = 0; e < layer->config().n_experts; ++e) {
      layer->fix_expert(e);
      sweep.rows.push_back(
          {layer->layer_path(), e, evaluate(model, ds, attack, batch_size, seed)});
    }
    if (prior)
      layer->fix_expert(*prior);
    else
      layer->unfix_expert();
  }
  return sweep;
}

template <typename T>
FixedExpertSweep fixed_expert_sweep(ResNetModel<T>& model, const Dataset& ds,
                                    const std::optional<AttackConfig>& attack,
                                    int batch_size = 256, uint64_t seed = 0) {
  return fixed_expert_sweep(static_cast<Module<T>&>(model),
                            std::span<MoELayer<T>* const>(model.moe_layers()),
                            ds, attack, batch_size, seed);
}

// ---------------------------------------------------------------------------
// Robustness/accuracy trade-off points
// ---------------------------------------------------------------------------

struct TradeoffPoint {
  std::string model_id;
  std::string regime;  // "normal" | "adversarial"
  double clean_accuracy = 0.0;
  std::map<std::string, double> attacked_accuracy;  // attack label -> acc
  std::string config_digest;
};

// Sorted by model id; duplicate ids must agree on the config digest.
inline std::vector<TradeoffPoint> sorted_tradeoff(
    std::vector<TradeoffPoint> points) {
  if (points.empty())
    throw std::invalid_argument("tradeoff_report: no points");
  std::map<std::string, std::string> digests;
  for (const auto& p : points) {
    auto [it, inserted] = digests.emplace(p.model_id, p.config_digest);
    if (!inserted && it->second != p.config_digest)
      throw ConfigError(strcat_msg(
          "tradeoff_report: model id '", p.model_id,
          "' appears with conflicting config digests ", it->second, " vs ",
          p.config_digest));
  }
  std::stable_sort(points.begin(), points.end(),
                   [](const TradeoffPoint& a, const TradeoffPoint& b) {
                     return a.model_id < b.model_id;
                   });
  return points;
}

}  // namespace moenet
