#pragma once

#include <json.hpp>
#include <string>

#include "encforge/batching.hpp"
#include "encforge/model.hpp"
#include "encforge/optim.hpp"
#include "encforge/schedule.hpp"

namespace encforge {

struct RunConfig;

using Json = nlohmann::json;

// Parsers reject unknown keys and wrong types with ConfigError; missing keys
// keep their defaults.

Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const Json& j);

Json to_json(const OptConfig& c);
OptConfig opt_config_from_json(const Json& j);

Json to_json(const ScheduleSpec& s);
/// Accepts either an explicit "batch_ladder" or a "batch_warmup" block
/// ({start, end, warmup_tokens, stages, granularity}) that is expanded with
/// build_batch_ladder.
ScheduleSpec schedule_from_json(const Json& j);

Json to_json(const MlmOptions& o);
MlmOptions mlm_options_from_json(const Json& j);

Json to_json(const RunConfig& r);
RunConfig run_config_from_json(const Json& j);

/// Named presets ("base", "large", "tiny", ...) or a JSON object.
ModelConfig model_config_preset(const std::string& name);

Json read_json_file(const std::string& path);
void write_json_file(const std::string& path, const Json& j);

}  // namespace encforge
