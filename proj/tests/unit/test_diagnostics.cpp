#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "moenet/reports.hpp"
#include "moenet/train.hpp"
#include "support/helpers.hpp"

using namespace moenet;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& name) {
  const std::string dir =
      (fs::temp_directory_path() / ("moenet_" + name)).string();
  fs::create_directories(dir);
  return dir;
}

ModelConfig tiny_moe(int n, int k) {
  ModelConfig cfg;
  cfg.arch = Arch::Tiny;
  cfg.num_classes = 4;
  cfg.input_shape = {3, 8, 8};
  ReplacementSpec rep;
  rep.stage = "conv4_x";
  rep.block_index = 1;
  rep.moe.n_experts = n;
  rep.moe.top_k = k;
  cfg.replacements.push_back(rep);
  return cfg;
}

void saturate_gate(ResNetModel<float>& model, int expert, float strength = 60.0f) {
  model.visit_parameters([&](const std::string& name, Parameter<float>& p) {
    if (name == "stage4.block1.moe.gate.fc.weight") {
      auto v = p.value.mutable_values();
      std::fill(v.begin(), v.end(), 0.0f);
    }
    if (name == "stage4.block1.moe.gate.fc.bias") {
      auto v = p.value.mutable_values();
      std::fill(v.begin(), v.end(), 0.0f);
      v[expert] = strength;
    }
  });
}

void zero_gate(ResNetModel<float>& model) { saturate_gate(model, 0, 0.0f); }

}  // namespace

TEST_CASE("routing report reflects a hand-built collapse") {
  auto model = build_model<float>(tiny_moe(4, 1), 3);
  saturate_gate(*model, 0);
  Dataset ds = make_synthetic(4, 8, {3, 8, 8}, 5, 1.0, 0.1);
  RoutingReport report = routing_report(*model, ds, 16);
  REQUIRE(report.layers.size() == 1);
  const auto& layer = report.layers[0];
  CHECK(layer.layer == "stage4.block1.moe");
  CHECK(layer.top1_counts[0] == ds.size());
  CHECK(layer.top1_counts[1] == 0);
  CHECK(layer.entropy_nats == doctest::Approx(0.0));
  CHECK(layer.dead_experts == std::vector<int>{1, 2, 3});
  // Importance collapses too (softmax saturated).
  CHECK(layer.importance[0] ==
        doctest::Approx(static_cast<double>(ds.size())).epsilon(1e-6));
}

TEST_CASE("uniform gate scores give maximal importance entropy") {
  auto model = build_model<float>(tiny_moe(4, 1), 3);
  zero_gate(*model);  // logits exactly zero: scores uniform, ties to expert 0
  Dataset ds = make_synthetic(4, 8, {3, 8, 8}, 5, 1.0, 0.1);
  RoutingReport report = routing_report(*model, ds, 16);
  const auto& layer = report.layers[0];
  CHECK(layer.importance_entropy_nats ==
        doctest::Approx(std::log(4.0)).epsilon(1e-6));
  // Exact ties route every input to the lowest index.
  CHECK(layer.top1_counts[0] == ds.size());
}

TEST_CASE("routing report equals a naive per-sample recount") {
  auto model = build_model<float>(tiny_moe(3, 2), 9);
  Dataset ds = make_synthetic(4, 10, {3, 8, 8}, 15, 1.0, 0.1);
  RoutingReport report = routing_report(*model, ds, 7 /*odd batch on purpose*/);

  // Oracle: single-sample forwards, recounting decisions by hand.
  model->set_training(false);
  std::vector<long> counts(3, 0);
  std::vector<double> importance(3, 0.0);
  for (long i = 0; i < ds.size(); ++i) {
    std::vector<long> idx = {i};
    auto [x, y] = make_batch<float>(ds, idx);
    model->forward(x);
    const auto& d = model->moe_layers()[0]->last_decision();
    counts[d.top1(0)] += 1;
    for (int e = 0; e < 3; ++e)
      importance[e] += static_cast<double>(d.scores.at(0, e, 0, 0));
  }
  for (int e = 0; e < 3; ++e) {
    CHECK(report.layers[0].top1_counts[e] == counts[e]);
    CHECK(report.layers[0].importance[e] ==
          doctest::Approx(importance[e]).epsilon(1e-4));
  }
  long total = 0;
  for (long c : report.layers[0].top1_counts) total += c;
  CHECK(total == ds.size());
}

TEST_CASE("routing report requires an MoE layer and a dataset") {
  ModelConfig plain;
  plain.arch = Arch::Tiny;
  plain.num_classes = 4;
  plain.input_shape = {3, 8, 8};
  auto model = build_model<float>(plain, 1);
  Dataset ds = make_synthetic(4, 4, {3, 8, 8}, 5, 1.0, 0.1);
  CHECK_THROWS_WITH_AS(routing_report(*model, ds),
                       doctest::Contains("no MoE layer"), std::invalid_argument);
}

TEST_CASE("fixed-expert sweep: reference row and restoration") {
  auto model = build_model<float>(tiny_moe(3, 1), 21);
  Dataset ds = make_synthetic(4, 6, {3, 8, 8}, 25, 1.5, 0.1);
  const double gated_before = evaluate(*model, ds, std::nullopt, 16, 0);
  FixedExpertSweep sweep = fixed_expert_sweep(*model, ds, std::nullopt, 16, 0);
  REQUIRE(sweep.rows.size() == 4);  // gated + 3 experts
  CHECK(sweep.rows[0].expert == -1);
  CHECK(sweep.rows[0].accuracy == doctest::Approx(gated_before));
  // Sweep leaves the model gated.
  CHECK(!model->moe_layers()[0]->fixed_expert().has_value());
  CHECK(evaluate(*model, ds, std::nullopt, 16, 0) ==
        doctest::Approx(gated_before));
}

TEST_CASE("fully collapsed gate: dominant expert row equals gated accuracy") {
  auto model = build_model<float>(tiny_moe(4, 1), 33);
  saturate_gate(*model, 2);
  Dataset ds = make_synthetic(4, 8, {3, 8, 8}, 35, 1.5, 0.1);
  FixedExpertSweep sweep = fixed_expert_sweep(*model, ds, std::nullopt, 16, 0);
  const double gated = sweep.rows[0].accuracy;
  double dominant = -1.0;
  for (const auto& row : sweep.rows)
    if (row.expert == 2) dominant = row.accuracy;
  CHECK(dominant == doctest::Approx(gated));
}

TEST_CASE("constructed two-cluster specialization: gating beats every expert") {
  // Two clusters of inputs; expert 0 classifies cluster 0 and inverts labels
  // on cluster 1, expert 1 the reverse. A gate keyed on the cluster feature
  // routes correctly, so the gated model wins on the union.
  const int kDim = 4;
  struct ClusterExpert : Module<float> {
    Linear<float> fc{kDim, 2, true};
    explicit ClusterExpert(bool first) {
      auto wv = fc.weight().value.mutable_values();
      std::fill(wv.begin(), wv.end(), 0.0f);
      // Channel 1 carries the label signal recentered around 0.5; the bias
      // shifts it to a signed logit. The second expert is label-inverted.
      const float s = first ? 4.0f : -4.0f;
      wv[0 * kDim + 1] = s;
      wv[1 * kDim + 1] = -s;
      auto bv = fc.bias()->value.mutable_values();
      bv[0] = -0.5f * s;
      bv[1] = 0.5f * s;
      register_module("fc", &fc);
    }
    Tensor<float> forward(const Tensor<float>& x) override {
      return fc.forward(x);
    }
  };

  MoELayerConfig mcfg;
  mcfg.n_experts = 2;
  mcfg.top_k = 1;
  std::vector<std::unique_ptr<Module<float>>> experts;
  experts.push_back(std::make_unique<ClusterExpert>(true));
  experts.push_back(std::make_unique<ClusterExpert>(false));
  auto gate = std::make_unique<GapFcGate<float>>(kDim, 2);
  {
    auto params = gate->named_parameters();
    auto wv = params[0].second->value.mutable_values();
    std::fill(wv.begin(), wv.end(), 0.0f);
    // Cluster id lives in channel 2 (0.1 vs 0.9); recentered so cluster 0
    // picks expert 0 and cluster 1 picks expert 1.
    wv[0 * kDim + 2] = -8.0f;
    wv[1 * kDim + 2] = 8.0f;
    auto bv = params[1].second->value.mutable_values();
    bv[0] = 4.0f;
    bv[1] = -4.0f;
  }
  struct GatedModel : Module<float> {
    MoELayer<float> layer;
    GatedModel(MoELayerConfig cfg, std::unique_ptr<Module<float>> g,
               std::vector<std::unique_ptr<Module<float>>> e)
        : layer(cfg, std::move(g), std::move(e)) {
      register_module("moe", &layer);
      layer.set_layer_path("moe");
    }
    Tensor<float> forward(const Tensor<float>& x) override {
      return layer.forward(x);
    }
  };
  GatedModel model(mcfg, std::move(gate), std::move(experts));
  model.set_training(false);

  // Dataset: label in {0,1} via channel 1 sign; cluster in channel 2.
  Dataset ds;
  ds.channels = kDim;
  ds.height = 1;
  ds.width = 1;
  ds.class_count = 2;
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    const int label = static_cast<int>(rng.uniform_int(2));
    const int cluster = static_cast<int>(rng.uniform_int(2));
    const float sig = (label == 0 ? 1.0f : -1.0f) * (cluster == 0 ? 1.0f : -1.0f);
    ds.images.push_back(0.5f);
    ds.images.push_back(0.5f + 0.4f * sig);
    ds.images.push_back(cluster == 0 ? 0.1f : 0.9f);
    ds.images.push_back(0.5f);
    ds.labels.push_back(label);
  }

  std::vector<MoELayer<float>*> layers = {&model.layer};
  FixedExpertSweep sweep = fixed_expert_sweep<float>(
      model, std::span<MoELayer<float>* const>(layers), ds, std::nullopt, 64, 0);
  const double gated = sweep.rows[0].accuracy;
  CHECK(gated == doctest::Approx(1.0));
  for (const auto& row : sweep.rows)
    if (row.expert >= 0) {
      CHECK(row.accuracy < gated);
      CHECK(row.accuracy == doctest::Approx(0.5).epsilon(0.15));
    }
}

TEST_CASE("tradeoff table: sorting, conflicts, idempotent append") {
  std::vector<TradeoffPoint> points;
  TradeoffPoint a{"m-b", "normal", 0.8, {{"pgd-20", 0.3}}, "da"};
  TradeoffPoint b{"m-a", "adversarial", 0.7, {{"pgd-20", 0.5}}, "db"};
  TradeoffPoint c{"m-c", "normal", 0.6, {}, "dc"};
  points = {a, b, c};
  auto sorted = sorted_tradeoff(points);
  CHECK(sorted[0].model_id == "m-a");
  CHECK(sorted[2].model_id == "m-c");

  std::vector<TradeoffPoint> conflict = {
      a, TradeoffPoint{"m-b", "normal", 0.8, {}, "OTHER"}};
  CHECK_THROWS_WITH_AS(sorted_tradeoff(conflict),
                       doctest::Contains("conflicting config digests"),
                       ConfigError);
  CHECK_THROWS_AS(sorted_tradeoff({}), std::invalid_argument);

  const std::string dir = temp_dir("tradeoff");
  const std::string path = dir + "/t.jsonl";
  fs::remove(path);
  CHECK(append_tradeoff_point(path, a));
  CHECK_FALSE(append_tradeoff_point(path, a));  // identical row: no-op
  CHECK(append_tradeoff_point(path, b));
  CHECK(read_tradeoff_points(path).size() == 2);
  TradeoffPoint a_conflict = a;
  a_conflict.config_digest = "zz";
  CHECK_THROWS_AS(append_tradeoff_point(path, a_conflict), ConfigError);
}

TEST_CASE("report files carry schema headers in both formats") {
  const std::string dir = temp_dir("reports");
  auto model = build_model<float>(tiny_moe(2, 1), 3);
  Dataset ds = make_synthetic(4, 4, {3, 8, 8}, 5, 1.0, 0.1);
  write_routing_report(dir + "/routing", routing_report(*model, ds, 16));

  std::ifstream jsonl(dir + "/routing.jsonl");
  std::string line;
  std::getline(jsonl, line);
  auto header = nlohmann::json::parse(line);
  CHECK(header.at("schema") == "moenet/routing");
  CHECK(header.at("version") == 1);

  std::ifstream tsv(dir + "/routing.tsv");
  std::getline(tsv, line);
  CHECK(line == "# moenet/routing v1");

  auto sweep = fixed_expert_sweep(*model, ds, std::nullopt, 16, 0);
  write_fixed_expert_report(dir + "/fixed", sweep);
  CHECK(fs::exists(dir + "/fixed.jsonl"));
  CHECK(fs::exists(dir + "/fixed.tsv"));
}

TEST_CASE("cost curve rows: params constant in k, flops linear in N at k=N") {
  ModelConfig cfg = tiny_moe(2, 1);
  auto rows = cost_curve<float>(cfg, {2, 4}, {1, 2});
  REQUIRE(rows.size() == 4);
  // parameters identical across k for fixed N
  CHECK(rows[0].report.parameters == rows[1].report.parameters);
  CHECK(rows[2].report.parameters == rows[3].report.parameters);
  // more experts, more parameters
  CHECK(rows[2].report.parameters > rows[0].report.parameters);
  const std::string dir = temp_dir("costrep");
  write_cost_report(dir + "/cost", rows);
  CHECK(fs::exists(dir + "/cost.jsonl"));
}
