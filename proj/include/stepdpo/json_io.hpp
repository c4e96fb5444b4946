#pragma once

// JSON (de)serialization of configuration structs. Unknown keys are
// rejected; missing keys keep their defaults.

#include <json.hpp>

#include "stepdpo/model.hpp"
#include "stepdpo/pipeline.hpp"
#include "stepdpo/pref.hpp"
#include "stepdpo/task.hpp"
#include "stepdpo/train.hpp"

namespace stepdpo {

void to_json(nlohmann::json& j, const GenConfig& c);
void from_json(const nlohmann::json& j, GenConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
// Worker counts are run-time knobs and are not serialized with these.
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const SamplingConfig& c);
void from_json(const nlohmann::json& j, SamplingConfig& c);
void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);
void to_json(nlohmann::json& j, const PrefConfig& c);
void from_json(const nlohmann::json& j, PrefConfig& c);

/// Throws Error(config) naming the first key of j not in `allowed`.
void require_known_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const char* where);

/// FNV-1a 64 of the canonical (sorted-key, compact) dump, as 16 hex digits.
std::string json_hash(const nlohmann::json& j);
std::string fnv1a_hex(std::string_view bytes);

}  // namespace stepdpo
