#pragma once

// JSON config resolution: defaults applied, unknown keys fatal, canonical
// serialization digested (MD5) for checkpoints and manifests.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "moenet/data.hpp"
#include "moenet/resnet.hpp"
#include "moenet/train.hpp"

namespace moenet {

struct DataConfig {
  std::string source = "synthetic";  // "cifar100" | "synthetic"
  std::string root;                  // cifar100 dir; falls back to MOE_DATA_ROOT
  int classes = 0;                   // keep fine labels 0..classes-1 (0 = all)
  int train_per_class = 0;           // class-balanced subset (0 = all)
  int eval_per_class = 0;
  bool augment = true;
  uint64_t subset_seed = 17;
  // synthetic source parameters
  int syn_classes = 10;
  int syn_train_per_class = 200;
  int syn_eval_per_class = 50;
  std::array<int, 3> syn_shape = {3, 16, 16};
  double syn_separation = 1.0;
  double syn_noise = 0.15;
};

struct EvalConfig {
  std::optional<AttackConfig> attack;
  int batch_size = 256;
};

struct RunConfig {
  ModelConfig model;
  DataConfig data;
  TrainConfig train;
  EvalConfig eval;
  nlohmann::json resolved;  // fully-resolved config (defaults applied)
};

nlohmann::json default_config_json();

// Merges user JSON over the defaults. Any key absent from the schema is a
// ConfigError listing the offending paths.
RunConfig resolve_config(const nlohmann::json& user);

RunConfig load_config_file(const std::string& path,
                           const std::vector<std::string>& overrides);

// "a.b.c=value"; value parsed as JSON when possible, else kept as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

std::string config_digest(const nlohmann::json& resolved);
std::string model_digest(const nlohmann::json& resolved);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json attack_config_to_json(const AttackConfig& cfg);
AttackConfig attack_config_from_json(const nlohmann::json& j);

// Materializes (train, eval) datasets for the configured source.
std::pair<Dataset, Dataset> load_data(const DataConfig& cfg);

}  // namespace moenet
