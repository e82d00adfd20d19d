#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "moenet/checkpoint.hpp"
#include "moenet/config.hpp"
#include "moenet/reports.hpp"
#include "support/helpers.hpp"

using namespace moenet;
namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int exit_code;
  std::string output;
};

CmdResult run_cli(const std::string& args) {
  const std::string cmd = std::string(MOENET_CLI_PATH) + " " + args + " 2>&1";
  std::array<char, 4096> buf;
  std::string output;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  while (fgets(buf.data(), buf.size(), pipe)) output += buf.data();
  const int status = pclose(pipe);
  return {WEXITSTATUS(status), output};
}

std::string cli_dir() {
  const std::string dir =
      (fs::temp_directory_path() / "moenet_cli_tests").string();
  fs::create_directories(dir);
  return dir;
}

std::string write_tiny_config(const std::string& path, uint64_t seed = 7) {
  nlohmann::json cfg = {
      {"model",
       {{"arch", "tiny"},
        {"num_classes", 4},
        {"input_shape", {3, 8, 8}},
        {"replacements",
         {{{"stage", "conv4_x"},
           {"block", 1},
           {"moe",
            {{"experts", 2}, {"k", 1}, {"balance_loss", "entropy"}}}}}}}},
      {"data",
       {{"source", "synthetic"},
        {"synthetic",
         {{"classes", 4},
          {"train_per_class", 30},
          {"eval_per_class", 10},
          {"shape", {3, 8, 8}},
          {"separation", 1.5},
          {"noise", 0.1}}}}},
      {"train", {{"epochs", 2}, {"batch_size", 32}, {"seed", seed}}},
      {"eval",
       {{"attack",
         {{"family", "pgd"},
          {"epsilon", 0.03137254901960784},
          {"steps", 3},
          {"step_size", 0.00784313725490196},
          {"random_start", true}}}}}};
  std::ofstream out(path);
  out << cfg.dump(2);
  return path;
}

}  // namespace

TEST_CASE("missing config file exits 2 and names the path") {
  auto r = run_cli("train --config /no/such/config.json --out /tmp/moenet_x");
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("/no/such/config.json") != std::string::npos);
}

TEST_CASE("unknown config keys exit 2 and are listed") {
  const std::string dir = cli_dir();
  {
    std::ofstream out(dir + "/bad.json");
    out << R"({"train": {"epochz": 3}})";
  }
  auto r = run_cli("train --config " + dir + "/bad.json --out " + dir + "/o");
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("train.epochz") != std::string::npos);
}

TEST_CASE("train writes artifacts; checkpoint reloads to identical accuracy") {
  const std::string dir = cli_dir();
  const std::string cfg = write_tiny_config(dir + "/cfg.json");
  const std::string run_dir = dir + "/run_a";
  fs::remove_all(run_dir);
  auto r = run_cli("train --config " + cfg + " --out " + run_dir);
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  CHECK(fs::exists(run_dir + "/checkpoint.bin"));
  CHECK(fs::exists(run_dir + "/trainlog.jsonl"));
  CHECK(fs::exists(run_dir + "/manifest.json"));

  // Manifest re-runs the command exactly: digest must match the config.
  std::ifstream min(run_dir + "/manifest.json");
  nlohmann::json manifest;
  min >> manifest;
  RunConfig expect = load_config_file(cfg, {});
  CHECK(manifest.at("config_digest") == config_digest(expect.resolved));
  CHECK(manifest.at("command") == "train");

  // Reload the checkpoint in-process and reproduce the eval accuracy.
  auto model = build_model<float>(expect.model, expect.train.seed);
  load_checkpoint(run_dir + "/checkpoint.bin", *model,
                  model_digest(expect.resolved));
  auto [train_ds, eval_ds] = load_data(expect.data);
  (void)train_ds;
  const double acc = evaluate(*model, eval_ds, std::nullopt, 64, 0);

  std::ifstream log(run_dir + "/trainlog.jsonl");
  std::string line, last;
  std::getline(log, line);  // header
  while (std::getline(log, line))
    if (!line.empty()) last = line;
  auto rec = nlohmann::json::parse(last);
  CHECK(rec.at("eval_clean_accuracy").get<double>() == doctest::Approx(acc));
}

TEST_CASE("lr0=0 override leaves the checkpoint at the initialization") {
  const std::string dir = cli_dir();
  const std::string cfg = write_tiny_config(dir + "/cfg0.json", 11);
  const std::string run_dir = dir + "/run_zero";
  fs::remove_all(run_dir);
  auto r = run_cli("train --config " + cfg + " --out " + run_dir +
                   " --set train.lr0=0");
  REQUIRE(r.exit_code == 0);

  RunConfig rc = load_config_file(cfg, {"train.lr0=0"});
  auto fresh = build_model<float>(rc.model, rc.train.seed);
  auto trained = build_model<float>(rc.model, rc.train.seed);
  load_checkpoint(run_dir + "/checkpoint.bin", *trained, "");
  auto a = moenet::testing::snapshot_parameters(*fresh);
  auto b = moenet::testing::snapshot_parameters(*trained);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("eval appends once, is idempotent, and checks digests") {
  const std::string dir = cli_dir();
  const std::string cfg = write_tiny_config(dir + "/cfg1.json", 13);
  const std::string run_dir = dir + "/run_eval";
  const std::string eval_dir = dir + "/eval_out";
  fs::remove_all(run_dir);
  fs::remove_all(eval_dir);
  REQUIRE(run_cli("train --config " + cfg + " --out " + run_dir).exit_code == 0);

  auto r1 = run_cli("eval --config " + cfg + " --checkpoint " + run_dir +
                    "/checkpoint.bin --out " + eval_dir);
  REQUIRE(r1.exit_code == 0);
  CHECK(r1.output.find("recorded") != std::string::npos);
  auto r2 = run_cli("eval --config " + cfg + " --checkpoint " + run_dir +
                    "/checkpoint.bin --out " + eval_dir);
  REQUIRE(r2.exit_code == 0);
  CHECK(r2.output.find("no-op") != std::string::npos);
  CHECK(read_tradeoff_points(eval_dir + "/tradeoff.jsonl").size() == 1);

  // Evaluating under a different model config is refused with both digests.
  auto r3 = run_cli("eval --config " + cfg + " --checkpoint " + run_dir +
                    "/checkpoint.bin --out " + eval_dir +
                    " --set model.num_classes=5");
  CHECK(r3.exit_code == 2);
  CHECK(r3.output.find("digest") != std::string::npos);
}

TEST_CASE("eval under an epsilon-0 attack equals the clean accuracy") {
  const std::string dir = cli_dir();
  const std::string cfg = write_tiny_config(dir + "/cfg2.json", 17);
  const std::string run_dir = dir + "/run_eps0";
  const std::string eval_dir = dir + "/eval_eps0";
  fs::remove_all(run_dir);
  fs::remove_all(eval_dir);
  REQUIRE(run_cli("train --config " + cfg + " --out " + run_dir).exit_code == 0);
  auto r = run_cli("eval --config " + cfg + " --checkpoint " + run_dir +
                   "/checkpoint.bin --out " + eval_dir +
                   " --set eval.attack.epsilon=0");
  REQUIRE(r.exit_code == 0);
  auto points = read_tradeoff_points(eval_dir + "/tradeoff.jsonl");
  REQUIRE(points.size() == 1);
  REQUIRE(points[0].attacked_accuracy.count("pgd-3") == 1);
  CHECK(points[0].attacked_accuracy.at("pgd-3") ==
        doctest::Approx(points[0].clean_accuracy));
}

TEST_CASE("report kinds: routing rejects plain models, cost emits 15 rows") {
  const std::string dir = cli_dir();
  // Plain (no MoE) model config.
  nlohmann::json plain = {
      {"model",
       {{"arch", "tiny"}, {"num_classes", 4}, {"input_shape", {3, 8, 8}}}},
      {"data",
       {{"source", "synthetic"},
        {"synthetic",
         {{"classes", 4},
          {"train_per_class", 20},
          {"eval_per_class", 10},
          {"shape", {3, 8, 8}}}}}},
      {"train", {{"epochs", 1}, {"batch_size", 32}, {"seed", 3}}}};
  {
    std::ofstream out(dir + "/plain.json");
    out << plain.dump();
  }
  const std::string run_dir = dir + "/run_plain";
  fs::remove_all(run_dir);
  REQUIRE(run_cli("train --config " + dir + "/plain.json --out " + run_dir)
              .exit_code == 0);
  auto r = run_cli("report --kind routing --config " + dir +
                   "/plain.json --checkpoint " + run_dir +
                   "/checkpoint.bin --out " + dir + "/rep_plain");
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("no MoE layer") != std::string::npos);

  // Cost: N in {2,4,8,16,32} x k in {1, half, full} = 15 rows.
  const std::string cfg = write_tiny_config(dir + "/cfg3.json");
  auto rc = run_cli("report --kind cost --config " + cfg + " --out " + dir +
                    "/rep_cost --experts 2,4,8,16,32 --k 1,half,full");
  REQUIRE(rc.exit_code == 0);
  std::ifstream tsv(dir + "/rep_cost/cost.tsv");
  std::string line;
  int rows = 0;
  while (std::getline(tsv, line))
    if (!line.empty() && line[0] != '#' && line.rfind("n_experts", 0) != 0)
      ++rows;
  CHECK(rows == 15);
}

TEST_CASE("tradeoff report merges eval outputs sorted by id") {
  const std::string dir = cli_dir();
  const std::string cfg = write_tiny_config(dir + "/cfg4.json", 19);
  std::vector<std::string> ids = {"model-c", "model-a", "model-b"};
  const std::string run_dir = dir + "/run_merge";
  fs::remove_all(run_dir);
  REQUIRE(run_cli("train --config " + cfg + " --out " + run_dir).exit_code == 0);
  const std::string eval_dir = dir + "/eval_merge";
  fs::remove_all(eval_dir);
  for (const auto& id : ids) {
    auto r = run_cli("eval --config " + cfg + " --checkpoint " + run_dir +
                     "/checkpoint.bin --out " + eval_dir + " --id " + id);
    REQUIRE(r.exit_code == 0);
  }
  auto r = run_cli("report --kind tradeoff --inputs " + eval_dir +
                   "/tradeoff.jsonl --out " + dir + "/rep_merge");
  REQUIRE(r.exit_code == 0);
  auto points = read_tradeoff_points(dir + "/rep_merge/tradeoff.jsonl");
  REQUIRE(points.size() == 3);
  CHECK(points[0].model_id == "model-a");
  CHECK(points[1].model_id == "model-b");
  CHECK(points[2].model_id == "model-c");
}
