#pragma once

#include <string>

#include <json.hpp>

#include "stepdpo/model.hpp"

namespace stepdpo {

// Checkpoint file: one line of JSON manifest (format, config, precision,
// layout, param_count, payload_bytes, checksum) terminated by '\n', then the
// flat parameter vector as little-endian IEEE-754 values.

/// `provenance`, when not null, is stored verbatim in the manifest.
template <class T>
void save_checkpoint(const Model<T>& m, const std::string& path, const nlohmann::json& provenance = nullptr);

/// Throws Error(corrupt_checkpoint) on checksum, size, layout or precision
/// mismatch and Error(missing_input) when the file cannot be opened.
template <class T>
Model<T> load_checkpoint(const std::string& path);

/// Reads only the manifest; used to pick the precision before loading.
ModelConfig read_checkpoint_config(const std::string& path);
/// The manifest's checksum field.
std::string read_checkpoint_checksum(const std::string& path);

}  // namespace stepdpo
