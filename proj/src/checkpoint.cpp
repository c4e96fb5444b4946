#include "stepdpo/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "stepdpo/error.hpp"
#include "stepdpo/json_io.hpp"

namespace stepdpo {

namespace {

constexpr const char* kFormat = "stepdpo-checkpoint";
constexpr int kVersion = 1;

template <class T>
constexpr Precision precision_of() {
  return sizeof(T) == 8 ? Precision::f64 : Precision::f32;
}

struct RawCheckpoint {
  nlohmann::json manifest;
  std::string payload;
};

RawCheckpoint read_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::missing_input, "cannot open checkpoint " + path);
  std::string header;
  if (!std::getline(in, header)) throw Error(ErrorKind::corrupt_checkpoint, "empty checkpoint " + path);
  RawCheckpoint raw;
  try {
    raw.manifest = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::corrupt_checkpoint, "unreadable manifest in " + path + ": " + ex.what());
  }
  std::ostringstream rest;
  rest << in.rdbuf();
  raw.payload = rest.str();
  return raw;
}

}  // namespace

template <class T>
void save_checkpoint(const Model<T>& m, const std::string& path, const nlohmann::json& provenance) {
  if (m.config().precision != precision_of<T>()) {
    throw Error(ErrorKind::argument, "model precision field disagrees with its scalar type");
  }
  std::string payload(m.param_count() * sizeof(T), '\0');
  char* dst = payload.data();
  for (T v : m.params()) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    std::memcpy(dst, bytes.data(), sizeof(T));
    dst += sizeof(T);
  }
  nlohmann::ordered_json manifest;
  manifest["format"] = kFormat;
  manifest["version"] = kVersion;
  manifest["config"] = nlohmann::json(m.config());
  manifest["precision"] = to_string(m.config().precision);
  manifest["param_count"] = m.param_count();
  manifest["payload_bytes"] = payload.size();
  manifest["checksum"] = fnv1a_hex(payload);
  if (!provenance.is_null()) manifest["provenance"] = provenance;
  auto& layout = manifest["layout"] = nlohmann::json::array();
  for (const auto& t : m.layout().tensors) {
    layout.push_back({{"name", t.name}, {"offset", t.offset}, {"rows", t.rows}, {"cols", t.cols}});
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write checkpoint " + path);
  out << manifest.dump() << '\n';
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw Error(ErrorKind::io, "write failed for checkpoint " + path);
}

template <class T>
Model<T> load_checkpoint(const std::string& path) {
  RawCheckpoint raw = read_raw(path);
  const auto& mf = raw.manifest;
  auto corrupt = [&](const std::string& why) { return Error(ErrorKind::corrupt_checkpoint, path + ": " + why); };
  ModelConfig cfg;
  std::size_t param_count = 0, payload_bytes = 0;
  std::string checksum;
  try {
    if (mf.at("format").get<std::string>() != kFormat) throw corrupt("not a stepdpo checkpoint");
    if (mf.at("version").get<int>() != kVersion) throw corrupt("unsupported checkpoint version");
    cfg = mf.at("config").get<ModelConfig>();
    param_count = mf.at("param_count").get<std::size_t>();
    payload_bytes = mf.at("payload_bytes").get<std::size_t>();
    checksum = mf.at("checksum").get<std::string>();
  } catch (const nlohmann::json::exception& ex) {
    throw corrupt(std::string("malformed manifest: ") + ex.what());
  } catch (const Error& ex) {
    if (ex.kind() == ErrorKind::corrupt_checkpoint) throw;
    throw corrupt(ex.what());
  }
  if (cfg.precision != precision_of<T>()) {
    throw corrupt(std::string("stored precision ") + to_string(cfg.precision) + " does not match the requested " +
                  to_string(precision_of<T>()));
  }
  const ParamLayout layout = ParamLayout::build(cfg);
  if (param_count != layout.total || payload_bytes != layout.total * sizeof(T)) {
    throw corrupt("manifest config implies " + std::to_string(layout.total) + " parameters but the manifest records " +
                  std::to_string(param_count) + " (" + std::to_string(payload_bytes) + " bytes)");
  }
  const auto& stored = mf.at("layout");
  if (stored.size() != layout.tensors.size()) throw corrupt("layout tensor count mismatch");
  for (std::size_t i = 0; i < stored.size(); ++i) {
    const auto& t = layout.tensors[i];
    if (stored[i].at("name") != t.name || stored[i].at("offset") != t.offset || stored[i].at("rows") != t.rows ||
        stored[i].at("cols") != t.cols) {
      throw corrupt("layout mismatch at tensor " + t.name);
    }
  }
  if (raw.payload.size() != payload_bytes) {
    throw corrupt("payload is " + std::to_string(raw.payload.size()) + " bytes, manifest says " +
                  std::to_string(payload_bytes));
  }
  if (fnv1a_hex(raw.payload) != checksum) throw corrupt("checksum mismatch");
  std::vector<T> params(layout.total);
  const char* src = raw.payload.data();
  for (auto& v : params) {
    std::array<char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), src, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    v = std::bit_cast<T>(bytes);
    src += sizeof(T);
  }
  return Model<T>(cfg, std::move(params));
}

ModelConfig read_checkpoint_config(const std::string& path) {
  RawCheckpoint raw = read_raw(path);
  try {
    return raw.manifest.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::corrupt_checkpoint, path + ": malformed manifest: " + ex.what());
  }
}

std::string read_checkpoint_checksum(const std::string& path) {
  RawCheckpoint raw = read_raw(path);
  try {
    return raw.manifest.at("checksum").get<std::string>();
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::corrupt_checkpoint, path + ": malformed manifest: " + ex.what());
  }
}

template void save_checkpoint(const Model<float>&, const std::string&, const nlohmann::json&);
template void save_checkpoint(const Model<double>&, const std::string&, const nlohmann::json&);
template Model<float> load_checkpoint<float>(const std::string&);
template Model<double> load_checkpoint<double>(const std::string&);

}  // namespace stepdpo
