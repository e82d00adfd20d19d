#include "moenet/config.hpp"

#include <cstdlib>
#include <fstream>

#include "moenet/digest.hpp"

namespace moenet {

namespace {

nlohmann::json default_attack_json(int steps) {
  return {{"family", "pgd"},
          {"epsilon", 8.0 / 255.0},
          {"steps", steps},
          {"step_size", 2.0 / 255.0},
          {"random_start", true}};
}

nlohmann::json default_replacement_json() {
  return {{"stage", "conv4_x"},
          {"block", 1},
          {"conv", nullptr},
          {"moe",
           {{"experts", 4},
            {"k", 2},
            {"gate", "gap_fc"},
            {"expert_kind", "block"},
            {"balance_loss", "entropy"},
            {"balance_coeff", 0.01}}}};
}

// Every user key must exist in the schema node; scalars adopt the user
// value. Arrays of objects are validated element-wise against the template.
void merge_checked(nlohmann::json& base, const nlohmann::json& user,
                   const std::string& path, std::vector<std::string>& unknown,
                   const nlohmann::json* element_template = nullptr) {
  if (!user.is_object()) {
    base = user;
    return;
  }
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string child_path =
        path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) {
      unknown.push_back(child_path);
      continue;
    }
    nlohmann::json& slot = base[it.key()];
    if (slot.is_object() && it.value().is_object()) {
      merge_checked(slot, it.value(), child_path, unknown);
    } else if (it.key() == "replacements" && it.value().is_array()) {
      nlohmann::json out = nlohmann::json::array();
      const nlohmann::json tmpl =
          element_template ? *element_template : default_replacement_json();
      for (size_t i = 0; i < it.value().size(); ++i) {
        nlohmann::json entry = tmpl;
        merge_checked(entry, it.value()[i],
                      strcat_msg(child_path, "[", i, "]"), unknown);
        out.push_back(std::move(entry));
      }
      slot = std::move(out);
    } else if (slot.is_null() && it.value().is_object()) {
      // Optional sub-config (attacks): validate against the attack template.
      nlohmann::json entry = default_attack_json(20);
      merge_checked(entry, it.value(), child_path, unknown);
      slot = std::move(entry);
    } else {
      slot = it.value();
    }
  }
}

int parse_block_index(const nlohmann::json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "all") return 0;
    throw ConfigError(strcat_msg("replacement block must be an index or \"all\", got ",
                                 j.dump()));
  }
  return j.get<int>();
}

GateKind gate_from_string(const std::string& s) {
  if (s == "gap_fc") return GateKind::GapFc;
  if (s == "conv_gap") return GateKind::ConvGap;
  throw ConfigError(strcat_msg("unknown gate '", s, "' (gap_fc|conv_gap)"));
}

ExpertKind expert_kind_from_string(const std::string& s) {
  if (s == "block") return ExpertKind::Block;
  if (s == "conv") return ExpertKind::Conv;
  throw ConfigError(strcat_msg("unknown expert_kind '", s, "' (block|conv)"));
}

BalanceLossKind balance_from_string(const std::string& s) {
  if (s == "none") return BalanceLossKind::None;
  if (s == "entropy") return BalanceLossKind::Entropy;
  if (s == "kl") return BalanceLossKind::Kl;
  if (s == "switch") return BalanceLossKind::Switch;
  throw ConfigError(
      strcat_msg("unknown balance_loss '", s, "' (none|entropy|kl|switch)"));
}

AttackFamily family_from_string(const std::string& s) {
  if (s == "pgd") return AttackFamily::Pgd;
  if (s == "autopgd") return AttackFamily::AutoPgd;
  throw ConfigError(strcat_msg("unknown attack family '", s, "' (pgd|autopgd)"));
}

}  // namespace

nlohmann::json default_config_json() {
  return {
      {"model",
       {{"arch", "tiny"},
        {"num_classes", 10},
        {"input_shape", {3, 32, 32}},
        {"replacements", nlohmann::json::array()}}},
      {"data",
       {{"source", "synthetic"},
        {"root", ""},
        {"classes", 0},
        {"train_per_class", 0},
        {"eval_per_class", 0},
        {"augment", true},
        {"subset_seed", 17},
        {"synthetic",
         {{"classes", 10},
          {"train_per_class", 200},
          {"eval_per_class", 50},
          {"shape", {3, 16, 16}},
          {"separation", 1.0},
          {"noise", 0.15}}}}},
      {"train",
       {{"epochs", 200},
        {"batch_size", 128},
        {"lr0", 0.01},
        {"momentum", 0.9},
        {"weight_decay", 5e-4},
        {"lr_power", 1.0},
        {"adversarial", false},
        {"attack", default_attack_json(7)},
        {"seed", 1},
        {"checkpoint_every", 0},
        {"eval_attack", nullptr},
        {"threads", 0}}},
      {"eval", {{"batch_size", 256}, {"attack", default_attack_json(20)}}}};
}

AttackConfig attack_config_from_json(const nlohmann::json& j) {
  AttackConfig cfg;
  cfg.family = family_from_string(j.at("family").get<std::string>());
  cfg.epsilon = j.at("epsilon").get<double>();
  cfg.steps = j.at("steps").get<int>();
  cfg.step_size = j.at("step_size").get<double>();
  cfg.random_start = j.at("random_start").get<bool>();
  cfg.validate();
  return cfg;
}

nlohmann::json attack_config_to_json(const AttackConfig& cfg) {
  return {{"family", to_string(cfg.family)},
          {"epsilon", cfg.epsilon},
          {"steps", cfg.steps},
          {"step_size", cfg.step_size},
          {"random_start", cfg.random_start}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.arch = arch_from_string(j.at("arch").get<std::string>());
  cfg.num_classes = j.at("num_classes").get<int>();
  const auto& shape = j.at("input_shape");
  if (!shape.is_array() || shape.size() != 3)
    throw ConfigError("model.input_shape must be [C,H,W]");
  for (int i = 0; i < 3; ++i) cfg.input_shape[i] = shape[i].get<int>();
  for (const auto& r : j.at("replacements")) {
    ReplacementSpec spec;
    spec.stage = r.at("stage").get<std::string>();
    spec.block_index = parse_block_index(r.at("block"));
    spec.conv_index = r.at("conv").is_null() ? 0 : r.at("conv").get<int>();
    const auto& m = r.at("moe");
    spec.moe.n_experts = m.at("experts").get<int>();
    spec.moe.top_k = m.at("k").get<int>();
    spec.moe.gate = gate_from_string(m.at("gate").get<std::string>());
    spec.moe.expert_kind =
        expert_kind_from_string(m.at("expert_kind").get<std::string>());
    spec.moe.balance_loss =
        balance_from_string(m.at("balance_loss").get<std::string>());
    spec.moe.balance_coeff = m.at("balance_coeff").get<double>();
    spec.moe.validate();
    cfg.replacements.push_back(std::move(spec));
  }
  return cfg;
}

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json reps = nlohmann::json::array();
  for (const auto& r : cfg.replacements) {
    nlohmann::json block =
        r.block_index == 0 ? nlohmann::json("all") : nlohmann::json(r.block_index);
    reps.push_back(
        {{"stage", r.stage},
         {"block", block},
         {"conv", r.conv_index == 0 ? nlohmann::json(nullptr)
                                    : nlohmann::json(r.conv_index)},
         {"moe",
          {{"experts", r.moe.n_experts},
           {"k", r.moe.top_k},
           {"gate", to_string(r.moe.gate)},
           {"expert_kind", to_string(r.moe.expert_kind)},
           {"balance_loss", to_string(r.moe.balance_loss)},
           {"balance_coeff", r.moe.balance_coeff}}}});
  }
  return {{"arch", to_string(cfg.arch)},
          {"num_classes", cfg.num_classes},
          {"input_shape", {cfg.input_shape[0], cfg.input_shape[1],
                           cfg.input_shape[2]}},
          {"replacements", std::move(reps)}};
}

RunConfig resolve_config(const nlohmann::json& user) {
  nlohmann::json resolved = default_config_json();
  std::vector<std::string> unknown;
  merge_checked(resolved, user, "", unknown);
  if (!unknown.empty()) {
    std::string list;
    for (const auto& k : unknown) list += (list.empty() ? "" : ", ") + k;
    throw ConfigError(strcat_msg("unknown config keys: ", list));
  }

  RunConfig run;
  run.resolved = resolved;
  run.model = model_config_from_json(resolved.at("model"));

  const auto& d = resolved.at("data");
  run.data.source = d.at("source").get<std::string>();
  if (run.data.source != "cifar100" && run.data.source != "synthetic")
    throw ConfigError(strcat_msg("data.source must be cifar100|synthetic, got ",
                                 run.data.source));
  run.data.root = d.at("root").get<std::string>();
  run.data.classes = d.at("classes").get<int>();
  run.data.train_per_class = d.at("train_per_class").get<int>();
  run.data.eval_per_class = d.at("eval_per_class").get<int>();
  run.data.augment = d.at("augment").get<bool>();
  run.data.subset_seed = d.at("subset_seed").get<uint64_t>();
  const auto& syn = d.at("synthetic");
  run.data.syn_classes = syn.at("classes").get<int>();
  run.data.syn_train_per_class = syn.at("train_per_class").get<int>();
  run.data.syn_eval_per_class = syn.at("eval_per_class").get<int>();
  const auto& ss = syn.at("shape");
  if (!ss.is_array() || ss.size() != 3)
    throw ConfigError("data.synthetic.shape must be [C,H,W]");
  for (int i = 0; i < 3; ++i) run.data.syn_shape[i] = ss[i].get<int>();
  run.data.syn_separation = syn.at("separation").get<double>();
  run.data.syn_noise = syn.at("noise").get<double>();

  const auto& t = resolved.at("train");
  run.train.epochs = t.at("epochs").get<int>();
  run.train.batch_size = t.at("batch_size").get<int>();
  run.train.lr0 = t.at("lr0").get<double>();
  run.train.momentum = t.at("momentum").get<double>();
  run.train.weight_decay = t.at("weight_decay").get<double>();
  run.train.lr_power = t.at("lr_power").get<double>();
  run.train.adversarial = t.at("adversarial").get<bool>();
  run.train.attack = attack_config_from_json(t.at("attack"));
  run.train.seed = t.at("seed").get<uint64_t>();
  run.train.checkpoint_every = t.at("checkpoint_every").get<int>();
  run.train.augment = run.data.augment;
  if (!t.at("eval_attack").is_null())
    run.train.eval_attack = attack_config_from_json(t.at("eval_attack"));
  run.train.validate();

  const auto& e = resolved.at("eval");
  run.eval.batch_size = e.at("batch_size").get<int>();
  if (!e.at("attack").is_null())
    run.eval.attack = attack_config_from_json(e.at("attack"));

  return run;
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError(strcat_msg("override must be key=value: '", assignment,
                                 "'"));
  const std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(value);
  } catch (const nlohmann::json::parse_error&) {
    parsed = value;
  }

  nlohmann::json* node = &config;
  size_t start = 0;
  while (true) {
    const size_t dot = key.find('.', start);
    const std::string part = key.substr(
        start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty())
      throw ConfigError(strcat_msg("bad override key '", key, "'"));
    if (dot == std::string::npos) {
      (*node)[part] = parsed;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

RunConfig load_config_file(const std::string& path,
                           const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in.is_open())
    throw ConfigError(strcat_msg("config file not found: ", path));
  nlohmann::json user;
  try {
    in >> user;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(strcat_msg("config parse error in ", path, ": ", e.what()));
  }
  for (const auto& o : overrides) apply_override(user, o);
  return resolve_config(user);
}

std::string config_digest(const nlohmann::json& resolved) {
  return Md5::hex_of_string(resolved.dump());
}

std::string model_digest(const nlohmann::json& resolved) {
  return Md5::hex_of_string(resolved.at("model").dump());
}

namespace {
// Deterministic per-class split of one synthetic pool into train/eval:
// the first train_per_class samples of each class train, the rest evaluate.
std::pair<Dataset, Dataset> split_synthetic(const Dataset& pool,
                                            int train_per_class) {
  Dataset train, eval;
  for (Dataset* part : {&train, &eval}) {
    part->channels = pool.channels;
    part->height = pool.height;
    part->width = pool.width;
    part->class_count = pool.class_count;
  }
  train.split = "train";
  eval.split = "test";
  std::vector<int> seen(pool.class_count, 0);
  const long per = pool.image_elems();
  for (long i = 0; i < pool.size(); ++i) {
    const int cls = pool.labels[i];
    Dataset* dst = seen[cls] < train_per_class ? &train : &eval;
    ++seen[cls];
    auto img = pool.image(i);
    dst->images.insert(dst->images.end(), img.begin(), img.end());
    dst->labels.push_back(cls);
  }
  (void)per;
  return {std::move(train), std::move(eval)};
}
}  // namespace

std::pair<Dataset, Dataset> load_data(const DataConfig& cfg) {
  if (cfg.source == "synthetic") {
    Dataset pool = make_synthetic(
        cfg.syn_classes, cfg.syn_train_per_class + cfg.syn_eval_per_class,
        cfg.syn_shape, cfg.subset_seed, cfg.syn_separation, cfg.syn_noise);
    return split_synthetic(pool, cfg.syn_train_per_class);
  }
  std::string root = cfg.root;
  if (root.empty()) {
    if (const char* env = std::getenv("MOE_DATA_ROOT")) root = env;
  }
  if (root.empty())
    throw ConfigError(
        "cifar100 data root not set (data.root or MOE_DATA_ROOT)");
  Dataset train = load_cifar100(root, "train");
  Dataset eval = load_cifar100(root, "test");
  if (cfg.classes > 0) {
    train = take_first_classes(train, cfg.classes);
    eval = take_first_classes(eval, cfg.classes);
  }
  if (cfg.train_per_class > 0)
    train = subset(train, cfg.train_per_class, cfg.subset_seed);
  if (cfg.eval_per_class > 0)
    eval = subset(eval, cfg.eval_per_class, cfg.subset_seed + 1);
  return {std::move(train), std::move(eval)};
}

}  // namespace moenet
