// moenet command-line entry point: train / eval / report subcommands.
// Exit codes: 0 ok, 1 numerical failure, 2 usage or config error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "moenet/checkpoint.hpp"
#include "moenet/config.hpp"
#include "moenet/manifest.hpp"
#include "moenet/reports.hpp"
#include "moenet/threads.hpp"
#include "moenet/train.hpp"

namespace fs = std::filesystem;
using namespace moenet;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> overrides;
  int64_t seed = -1;  // <0: keep config seed
};

RunConfig load_run_config(const CommonArgs& args) {
  RunConfig run = load_config_file(args.config_path, args.overrides);
  if (args.seed >= 0) {
    nlohmann::json user;
    {
      std::ifstream in(args.config_path);
      in >> user;
    }
    for (const auto& o : args.overrides) apply_override(user, o);
    user["train"]["seed"] = args.seed;
    run = resolve_config(user);
  }
  return run;
}

void apply_threads(const RunConfig& run) {
  const int threads = run.resolved.at("train").at("threads").get<int>();
  set_num_threads(threads);
}

RunManifest make_manifest(const std::string& command, const CommonArgs& args,
                          const RunConfig& run) {
  RunManifest m;
  m.command = command;
  m.config_path = args.config_path;
  m.config_digest = config_digest(run.resolved);
  m.model_digest = model_digest(run.resolved);
  m.seed = run.train.seed;
  m.out_dir = args.out_dir;
  m.overrides = args.overrides;
  m.started = iso8601_utc_now();
  m.threads = num_threads();
  m.resolved_config = run.resolved;
  return m;
}

std::string attack_label(const AttackConfig& cfg) {
  return strcat_msg(to_string(cfg.family), "-", cfg.steps);
}

int cmd_train(const CommonArgs& args) {
  RunConfig run = load_run_config(args);
  apply_threads(run);
  fs::create_directories(args.out_dir);
  RunManifest manifest = make_manifest("train", args, run);

  auto [train_ds, eval_ds] = load_data(run.data);
  auto model = build_model<float>(run.model, run.train.seed);

  const std::string log_path = args.out_dir + "/trainlog.jsonl";
  const std::string log_tmp = log_path + ".tmp";
  std::ofstream log_stream(log_tmp, std::ios::trunc);
  log_stream << nlohmann::json{{"schema", "moenet/trainlog"}, {"version", 1}}
             << "\n";

  const nlohmann::json model_json = run.resolved.at("model");
  const std::string mdigest = model_digest(run.resolved);
  auto write_ckpt = [&](const std::string& name) {
    save_checkpoint(args.out_dir + "/" + name, *model, model_json, mdigest);
  };

  TrainLog log = train(
      *model, train_ds, eval_ds, run.train,
      [&](const EpochRecord& rec) {
        log_stream << epoch_record_json(rec).dump() << "\n";
        log_stream.flush();
      },
      [&](int epoch) { write_ckpt(strcat_msg("checkpoint_epoch", epoch, ".bin")); });

  write_ckpt("checkpoint.bin");
  log_stream.close();
  fs::rename(log_tmp, log_path);

  manifest.finished = iso8601_utc_now();
  manifest.artifacts = {{"checkpoint", "checkpoint.bin"},
                        {"trainlog", "trainlog.jsonl"}};
  write_manifest(args.out_dir + "/manifest.json", manifest);

  const auto& last = log.epochs.back();
  std::cout << "trained " << run.train.epochs << " epochs; final eval accuracy "
            << last.eval_clean_accuracy << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint_path,
             const std::string& model_id_flag) {
  RunConfig run = load_run_config(args);
  apply_threads(run);
  fs::create_directories(args.out_dir);

  const std::string expect = model_digest(run.resolved);
  nlohmann::json header = read_checkpoint_header(checkpoint_path);
  const std::string found = header.value("config_digest", std::string());
  if (found != expect)
    throw ConfigError(strcat_msg(
        "checkpoint was built from a different model config: checkpoint digest ",
        found, ", config digest ", expect));

  auto model = build_model<float>(run.model, run.train.seed);
  load_checkpoint(checkpoint_path, *model, expect);

  auto [train_ds, eval_ds] = load_data(run.data);
  (void)train_ds;

  TradeoffPoint point;
  point.model_id = model_id_flag.empty()
                       ? fs::path(checkpoint_path).stem().string()
                       : model_id_flag;
  point.regime = run.train.adversarial ? "adversarial" : "normal";
  point.config_digest = expect;
  point.clean_accuracy =
      evaluate(*model, eval_ds, std::nullopt, run.eval.batch_size, run.train.seed);
  if (run.eval.attack)
    point.attacked_accuracy[attack_label(*run.eval.attack)] = evaluate(
        *model, eval_ds, run.eval.attack, run.eval.batch_size, run.train.seed);

  const std::string table = args.out_dir + "/tradeoff.jsonl";
  const bool appended = append_tradeoff_point(table, point);

  RunManifest manifest = make_manifest("eval", args, run);
  manifest.finished = iso8601_utc_now();
  manifest.artifacts = {{"tradeoff", "tradeoff.jsonl"},
                        {"checkpoint", checkpoint_path}};
  write_manifest(args.out_dir + "/manifest.json", manifest);

  std::cout << (appended ? "recorded" : "already recorded (no-op)")
            << ": clean=" << point.clean_accuracy;
  for (const auto& [name, acc] : point.attacked_accuracy)
    std::cout << " " << name << "=" << acc;
  std::cout << "\n";
  return 0;
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

int cmd_report(const CommonArgs& args, const std::string& kind,
               const std::string& checkpoint_path,
               const std::vector<std::string>& inputs,
               const std::string& experts_csv, const std::string& k_csv) {
  fs::create_directories(args.out_dir);

  if (kind == "tradeoff") {
    std::vector<TradeoffPoint> points;
    for (const auto& file : inputs) {
      auto part = read_tradeoff_points(file);
      if (part.empty())
        throw ConfigError(strcat_msg("no tradeoff records in ", file));
      points.insert(points.end(), part.begin(), part.end());
    }
    write_tradeoff_report(args.out_dir + "/tradeoff", points);
    std::cout << "tradeoff report: " << points.size() << " rows\n";
    return 0;
  }

  RunConfig run = load_run_config(args);
  apply_threads(run);

  if (kind == "cost") {
    if (run.model.replacements.size() != 1)
      throw ConfigError("cost report needs a model config with one replacement");
    std::vector<int> experts = parse_int_list(experts_csv);
    std::vector<CostCurveRow> rows;
    for (int n : experts) {
      ModelConfig cfg = run.model;
      cfg.replacements[0].moe.n_experts = n;
      cfg.replacements[0].moe.top_k = 1;
      auto model = build_model<float>(cfg, 0);
      std::stringstream ss(k_csv);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        int k = 0;
        if (tok == "half")
          k = std::max(1, n / 2);
        else if (tok == "full")
          k = n;
        else
          k = std::stoi(tok);
        if (k < 1 || k > n) continue;
        rows.push_back({n, k, count_cost(*model, k)});
      }
    }
    write_cost_report(args.out_dir + "/cost", rows);
    std::cout << "cost report: " << rows.size() << " rows\n";
    return 0;
  }

  // routing / fixed-expert need a checkpoint.
  const std::string expect = model_digest(run.resolved);
  nlohmann::json header = read_checkpoint_header(checkpoint_path);
  const std::string found = header.value("config_digest", std::string());
  if (found != expect)
    throw ConfigError(strcat_msg(
        "checkpoint was built from a different model config: checkpoint digest ",
        found, ", config digest ", expect));
  auto model = build_model<float>(run.model, run.train.seed);
  load_checkpoint(checkpoint_path, *model, expect);
  auto [train_ds, eval_ds] = load_data(run.data);
  (void)train_ds;

  if (kind == "routing") {
    RoutingReport report = routing_report(*model, eval_ds, run.eval.batch_size);
    write_routing_report(args.out_dir + "/routing", report);
    std::cout << "routing report: " << report.layers.size() << " layers over "
              << report.dataset_size << " inputs\n";
    return 0;
  }
  if (kind == "fixed-expert") {
    FixedExpertSweep sweep =
        fixed_expert_sweep(*model, eval_ds, run.eval.attack,
                           run.eval.batch_size, run.train.seed);
    write_fixed_expert_report(args.out_dir + "/fixed_expert", sweep);
    std::cout << "fixed-expert report: " << sweep.rows.size() << " rows\n";
    return 0;
  }
  throw ConfigError(strcat_msg("unknown report kind '", kind,
                               "' (routing|fixed-expert|tradeoff|cost)"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sparse mixture-of-experts CNNs with adversarial evaluation"};
  app.require_subcommand(1);

  CommonArgs targs, eargs, rargs;
  std::string checkpoint_path, model_id, report_kind;
  std::string experts_csv = "2,4,8,16,32";
  std::string k_csv = "1,half,full";
  std::vector<std::string> report_inputs;

  auto add_common = [](CLI::App* cmd, CommonArgs& a, bool config_required) {
    auto* copt = cmd->add_option("--config", a.config_path, "config file (JSON)");
    if (config_required) copt->required();
    cmd->add_option("--out", a.out_dir, "output directory")->required();
    cmd->add_option("--seed", a.seed, "override train.seed");
    cmd->add_option("--set", a.overrides,
                    "config override key=value (repeatable)");
  };

  auto* train_cmd = app.add_subcommand("train", "train a model");
  add_common(train_cmd, targs, true);

  auto* eval_cmd =
      app.add_subcommand("eval", "evaluate a checkpoint, append tradeoff row");
  add_common(eval_cmd, eargs, true);
  eval_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint file")
      ->required();
  eval_cmd->add_option("--id", model_id, "model id (default: checkpoint stem)");

  auto* report_cmd = app.add_subcommand("report", "emit report files");
  add_common(report_cmd, rargs, false);
  report_cmd
      ->add_option("--kind", report_kind, "routing|fixed-expert|tradeoff|cost")
      ->required();
  report_cmd->add_option("--checkpoint", checkpoint_path,
                         "checkpoint (routing/fixed-expert)");
  report_cmd->add_option("--inputs", report_inputs,
                         "tradeoff jsonl inputs (tradeoff)");
  report_cmd->add_option("--experts", experts_csv, "expert counts (cost)");
  report_cmd->add_option("--k", k_csv, "active experts: ints|half|full (cost)");

  try {
    app.parse(argc, argv);
    if (*train_cmd) return cmd_train(targs);
    if (*eval_cmd) return cmd_eval(eargs, checkpoint_path, model_id);
    if (*report_cmd)
      return cmd_report(rargs, report_kind, checkpoint_path, report_inputs,
                        experts_csv, k_csv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 2;
  } catch (const ModelBuildError& e) {
    std::cerr << "model error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
