#include "moenet/reports.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "moenet/checkpoint.hpp"

namespace moenet {

namespace {

constexpr int kSchemaVersion = 1;

std::string jsonl_header(const std::string& kind) {
  nlohmann::json h = {{"schema", "moenet/" + kind}, {"version", kSchemaVersion}};
  return h.dump() + "\n";
}

std::string tsv_header(const std::string& kind, const std::string& columns) {
  return strcat_msg("# moenet/", kind, " v", kSchemaVersion, "\n", columns,
                    "\n");
}

void write_pair(const std::string& base, const std::string& jsonl,
                const std::string& tsv) {
  atomic_write_file(base + ".jsonl", jsonl);
  atomic_write_file(base + ".tsv", tsv);
}

std::string join_longs(const std::vector<long>& v) {
  std::string s;
  for (long x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
  return s;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (int x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
  return s;
}

std::string join_doubles(const std::vector<double>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

}  // namespace

void write_routing_report(const std::string& base, const RoutingReport& r) {
  std::string jsonl = jsonl_header("routing");
  std::string tsv = tsv_header("routing",
                               "layer\tn_experts\tentropy_nats\timportance_"
                               "entropy_nats\ttop1_counts\timportance\tdead");
  for (const auto& layer : r.layers) {
    nlohmann::json row = {{"layer", layer.layer},
                          {"n_experts", layer.n_experts},
                          {"dataset_size", r.dataset_size},
                          {"top1_counts", layer.top1_counts},
                          {"importance", layer.importance},
                          {"entropy_nats", layer.entropy_nats},
                          {"importance_entropy_nats",
                           layer.importance_entropy_nats},
                          {"dead_experts", layer.dead_experts}};
    jsonl += row.dump() + "\n";
    std::ostringstream line;
    line << layer.layer << '\t' << layer.n_experts << '\t' << layer.entropy_nats
         << '\t' << layer.importance_entropy_nats << '\t'
         << join_longs(layer.top1_counts) << '\t'
         << join_doubles(layer.importance) << '\t'
         << join_ints(layer.dead_experts) << '\n';
    tsv += line.str();
  }
  write_pair(base, jsonl, tsv);
}

void write_fixed_expert_report(const std::string& base,
                               const FixedExpertSweep& sweep) {
  std::string jsonl = jsonl_header("fixed_expert");
  std::string tsv = tsv_header("fixed_expert", "layer\texpert\taccuracy");
  for (const auto& row : sweep.rows) {
    nlohmann::json j = {{"layer", row.layer},
                        {"expert", row.expert},
                        {"accuracy", row.accuracy}};
    jsonl += j.dump() + "\n";
    std::ostringstream line;
    line << row.layer << '\t'
         << (row.expert < 0 ? std::string("gated") : std::to_string(row.expert))
         << '\t' << row.accuracy << '\n';
    tsv += line.str();
  }
  write_pair(base, jsonl, tsv);
}

nlohmann::json tradeoff_point_json(const TradeoffPoint& p) {
  return {{"model_id", p.model_id},
          {"regime", p.regime},
          {"clean_accuracy", p.clean_accuracy},
          {"attacked_accuracy", p.attacked_accuracy},
          {"config_digest", p.config_digest}};
}

TradeoffPoint tradeoff_point_from_json(const nlohmann::json& j) {
  TradeoffPoint p;
  p.model_id = j.at("model_id").get<std::string>();
  p.regime = j.at("regime").get<std::string>();
  p.clean_accuracy = j.at("clean_accuracy").get<double>();
  p.attacked_accuracy =
      j.at("attacked_accuracy").get<std::map<std::string, double>>();
  p.config_digest = j.at("config_digest").get<std::string>();
  return p;
}

void write_tradeoff_report(const std::string& base,
                           const std::vector<TradeoffPoint>& points) {
  auto sorted = sorted_tradeoff(points);
  std::string jsonl = jsonl_header("tradeoff");
  std::string tsv = tsv_header(
      "tradeoff", "model_id\tregime\tclean_accuracy\tattacked\tconfig_digest");
  for (const auto& p : sorted) {
    jsonl += tradeoff_point_json(p).dump() + "\n";
    std::ostringstream attacked;
    bool first = true;
    for (const auto& [name, acc] : p.attacked_accuracy) {
      attacked << (first ? "" : ",") << name << "=" << acc;
      first = false;
    }
    std::ostringstream line;
    line << p.model_id << '\t' << p.regime << '\t' << p.clean_accuracy << '\t'
         << attacked.str() << '\t' << p.config_digest << '\n';
    tsv += line.str();
  }
  write_pair(base, jsonl, tsv);
}

void write_cost_report(const std::string& base,
                       const std::vector<CostCurveRow>& rows) {
  std::string jsonl = jsonl_header("cost");
  std::string tsv =
      tsv_header("cost", "n_experts\tk_active\tparameters\tflops_per_input");
  for (const auto& row : rows) {
    nlohmann::json breakdown = nlohmann::json::array();
    for (const auto& b : row.report.breakdown)
      breakdown.push_back(
          {{"name", b.name}, {"params", b.params}, {"flops", b.flops}});
    nlohmann::json j = {{"n_experts", row.n_experts},
                        {"k_active", row.k_active},
                        {"parameters", row.report.parameters},
                        {"flops_per_input", row.report.flops_per_input},
                        {"breakdown", breakdown}};
    jsonl += j.dump() + "\n";
    std::ostringstream line;
    line << row.n_experts << '\t' << row.k_active << '\t'
         << row.report.parameters << '\t' << row.report.flops_per_input
         << '\n';
    tsv += line.str();
  }
  write_pair(base, jsonl, tsv);
}

nlohmann::json epoch_record_json(const EpochRecord& rec) {
  nlohmann::json j = {{"epoch", rec.epoch},
                      {"task_loss", rec.task_loss},
                      {"balance_losses", rec.balance_losses},
                      {"lr", rec.lr},
                      {"train_accuracy", rec.train_accuracy},
                      {"eval_clean_accuracy", rec.eval_clean_accuracy},
                      {"importance", rec.importance},
                      {"top1_counts", rec.top1_counts},
                      {"expert_grad_norms", rec.expert_grad_norms}};
  if (rec.eval_adv_accuracy)
    j["eval_adv_accuracy"] = *rec.eval_adv_accuracy;
  else
    j["eval_adv_accuracy"] = nullptr;
  return j;
}

std::vector<TradeoffPoint> read_tradeoff_points(const std::string& path) {
  std::vector<TradeoffPoint> points;
  std::ifstream in(path);
  if (!in.is_open()) return points;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    if (first) {
      first = false;
      if (j.contains("schema")) continue;  // header row
    }
    points.push_back(tradeoff_point_from_json(j));
  }
  return points;
}

bool append_tradeoff_point(const std::string& path, const TradeoffPoint& p) {
  auto existing = read_tradeoff_points(path);
  const nlohmann::json incoming = tradeoff_point_json(p);
  for (const auto& e : existing) {
    if (e.model_id == p.model_id && e.config_digest != p.config_digest)
      throw ConfigError(strcat_msg(
          "tradeoff: model id '", p.model_id,
          "' already recorded with different config digest ", e.config_digest,
          " (incoming ", p.config_digest, ")"));
    if (tradeoff_point_json(e) == incoming) return false;
  }
  const bool file_exists = std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out.is_open())
    throw FormatError(strcat_msg("cannot append to ", path));
  if (!file_exists) out << jsonl_header("tradeoff");
  out << incoming.dump() << "\n";
  return true;
}

}  // namespace moenet
