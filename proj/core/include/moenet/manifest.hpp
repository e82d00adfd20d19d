#pragma once

#include <string>
#include <vector>

#include "json.hpp"

namespace moenet {

// Everything needed to re-run a command exactly: resolved config, digest,
// seed, overrides, and the artifact map. Written to manifest.json in every
// output directory.
struct RunManifest {
  std::string command;
  std::string config_path;
  std::string config_digest;
  std::string model_digest;
  uint64_t seed = 0;
  std::string out_dir;
  std::vector<std::string> overrides;
  std::string started;
  std::string finished;
  int threads = 0;
  nlohmann::json resolved_config;
  nlohmann::json artifacts = nlohmann::json::object();
};

std::string iso8601_utc_now();
void write_manifest(const std::string& path, const RunManifest& manifest);
RunManifest read_manifest(const std::string& path);

}  // namespace moenet
