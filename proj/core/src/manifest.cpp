#include "moenet/manifest.hpp"

#include <ctime>
#include <fstream>

#include "moenet/checkpoint.hpp"
#include "moenet/common.hpp"

namespace moenet {

std::string iso8601_utc_now() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_manifest(const std::string& path, const RunManifest& m) {
  nlohmann::json j = {{"command", m.command},
                      {"config_path", m.config_path},
                      {"config_digest", m.config_digest},
                      {"model_digest", m.model_digest},
                      {"seed", m.seed},
                      {"out_dir", m.out_dir},
                      {"overrides", m.overrides},
                      {"started", m.started},
                      {"finished", m.finished},
                      {"threads", m.threads},
                      {"resolved_config", m.resolved_config},
                      {"artifacts", m.artifacts}};
  atomic_write_file(path, j.dump(2) + "\n");
}

RunManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in.is_open())
    throw FormatError(strcat_msg("manifest not found: ", path));
  nlohmann::json j;
  in >> j;
  RunManifest m;
  m.command = j.value("command", "");
  m.config_path = j.value("config_path", "");
  m.config_digest = j.value("config_digest", "");
  m.model_digest = j.value("model_digest", "");
  m.seed = j.value("seed", uint64_t{0});
  m.out_dir = j.value("out_dir", "");
  m.overrides = j.value("overrides", std::vector<std::string>{});
  m.started = j.value("started", "");
  m.finished = j.value("finished", "");
  m.threads = j.value("threads", 0);
  if (j.contains("resolved_config")) m.resolved_config = j["resolved_config"];
  if (j.contains("artifacts")) m.artifacts = j["artifacts"];
  return m;
}

}  // namespace moenet
