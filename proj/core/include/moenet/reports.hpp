#pragma once

// Report emission: every report is written both as line-delimited JSON
// records and as a flat tab-separated table. The first line of each file
// carries the schema name and version.

#include <string>
#include <vector>

#include "json.hpp"
#include "moenet/cost.hpp"
#include "moenet/diagnostics.hpp"
#include "moenet/train.hpp"

namespace moenet {

// base_path without extension; writes base_path.jsonl and base_path.tsv.
void write_routing_report(const std::string& base_path,
                          const RoutingReport& report);
void write_fixed_expert_report(const std::string& base_path,
                               const FixedExpertSweep& sweep);
void write_tradeoff_report(const std::string& base_path,
                           const std::vector<TradeoffPoint>& points);
void write_cost_report(const std::string& base_path,
                       const std::vector<CostCurveRow>& rows);

nlohmann::json epoch_record_json(const EpochRecord& rec);
nlohmann::json tradeoff_point_json(const TradeoffPoint& p);
TradeoffPoint tradeoff_point_from_json(const nlohmann::json& j);

// Append-with-idempotence for eval results: returns false (no write) when an
// identical row already exists; conflicting digests for the same model id
// raise ConfigError.
bool append_tradeoff_point(const std::string& jsonl_path,
                           const TradeoffPoint& point);
std::vector<TradeoffPoint> read_tradeoff_points(const std::string& jsonl_path);

}  // namespace moenet
