#pragma once

// Binary checkpoints.
//
//   bytes 0..7   "MADECKPT"
//   bytes 8..15  manifest length N, uint64 little-endian
//   next N bytes JSON manifest
//   remainder    float64 little-endian payload, tensors in manifest order
//
// Manifest keys: format_version, model_config, dataset_ids,
// adapters_enabled, metadata, tensors [{name, shape, offset}] where offset is
// in bytes from the payload start.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "made/model.hpp"
#include "made/train.hpp"

namespace made {

inline constexpr char kCheckpointMagic[8] = {'M', 'A', 'D', 'E', 'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers},   {"d_model", c.d_model},
          {"num_heads", c.num_heads},     {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size},   {"max_positions", c.max_positions},
          {"adapter_bottleneck", c.adapter_bottleneck}, {"layer_norm_eps", c.layer_norm_eps}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  c.num_layers = j.value("num_layers", c.num_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_positions = j.value("max_positions", c.max_positions);
  c.adapter_bottleneck = j.value("adapter_bottleneck", c.adapter_bottleneck);
  c.layer_norm_eps = j.value("layer_norm_eps", c.layer_norm_eps);
  return c;
}

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

inline void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }
inline double get_f64(const char* p) { return std::bit_cast<double>(get_u64(p)); }

}  // namespace detail

/// Named tensors plus a JSON manifest, independent of model structure.
struct TensorArchive {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;
};

inline std::string serialize(const TensorArchive& a) {
  nlohmann::json manifest = a.header;
  manifest["format_version"] = kCheckpointVersion;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : a.tensors) {
    manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += 8 * t.size();
  }
  const std::string text = manifest.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& [_, t] : a.tensors)
    for (double v : t.data()) detail::put_f64(out, v);
  return out;
}

inline TensorArchive deserialize(const std::string& bytes, const std::string& source = "checkpoint") {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError(source + ": not a checkpoint (bad magic)");
  }
  const std::uint64_t n = detail::get_u64(bytes.data() + 8);
  if (n > bytes.size() - 16) throw FormatError(source + ": truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(n));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + ": malformed manifest: " + e.what());
  }
  if (!manifest.contains("format_version") || manifest["format_version"] != kCheckpointVersion) {
    throw FormatError(source + ": unsupported format_version " +
                      (manifest.contains("format_version") ? manifest["format_version"].dump() : "<missing>"));
  }
  const std::size_t payload_start = 16 + n;
  const std::size_t payload_size = bytes.size() - payload_start;
  TensorArchive a;
  std::uint64_t expected = 0;
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name");
    const Shape shape = entry.at("shape").get<Shape>();
    const std::uint64_t offset = entry.at("offset");
    if (offset != expected) throw FormatError(source + ": tensor " + name + " has offset " + std::to_string(offset) +
                                              ", expected " + std::to_string(expected));
    const std::uint64_t count = numel(shape);
    if (offset + 8 * count > payload_size) throw FormatError(source + ": truncated payload at tensor " + name);
    std::vector<double> values(count);
    const char* p = bytes.data() + payload_start + offset;
    for (std::uint64_t i = 0; i < count; ++i) values[i] = detail::get_f64(p + 8 * i);
    a.tensors.emplace_back(name, Tensor(shape, std::move(values)));
    expected = offset + 8 * count;
  }
  if (expected != payload_size) {
    throw FormatError(source + ": payload holds " + std::to_string(payload_size) + " bytes, manifest declares " +
                      std::to_string(expected));
  }
  manifest.erase("tensors");
  manifest.erase("format_version");
  a.header = std::move(manifest);
  return a;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Parameter sets.

inline TensorArchive to_archive(const ParameterSet& p, const nlohmann::json& metadata = nlohmann::json::object()) {
  TensorArchive a;
  a.header["model_config"] = to_json(p.config);
  a.header["dataset_ids"] = p.expert_ids();
  a.header["adapters_enabled"] = p.adapters_enabled;
  a.header["metadata"] = metadata;
  p.for_each([&](const std::string& path, const Tensor& t) { a.tensors.emplace_back(path, t); });
  return a;
}

/// Rebuilds a parameter set from archive tensors whose names start with
/// `prefix`; other tensors are ignored.
inline ParameterSet from_archive(const TensorArchive& a, const std::string& prefix = "") {
  ParameterSet p;
  p.config = model_config_from_json(a.header.at("model_config"));
  p.adapters_enabled = a.header.value("adapters_enabled", true);
  const auto ids = a.header.at("dataset_ids").get<std::vector<std::string>>();
  for (const auto& id : ids) {
    p.adapters[id];
    p.heads[id];
  }
  for (const auto& [full, t] : a.tensors) {
    if (full.rfind(prefix, 0) != 0) continue;
    const std::string path = full.substr(prefix.size());
    auto insert = [&](ParamMap& m, const std::string& name) {
      if (!m.emplace(name, t).second) throw FormatError("tensor " + full + " listed twice");
    };
    if (path.rfind(kBackbonePrefix, 0) == 0) {
      insert(p.backbone.tensors, path.substr(kBackbonePrefix.size()));
      continue;
    }
    const auto slash1 = path.find('/');
    const auto slash2 = slash1 == std::string::npos ? std::string::npos : path.find('/', slash1 + 1);
    if (slash2 == std::string::npos) throw FormatError("unrecognised tensor path " + full);
    const std::string kind = path.substr(0, slash1);
    const std::string id = path.substr(slash1 + 1, slash2 - slash1 - 1);
    const std::string name = path.substr(slash2 + 1);
    if (!p.heads.count(id)) throw FormatError("tensor " + full + " names unlisted dataset '" + id + "'");
    if (kind == "adapter") {
      insert(p.adapters[id].tensors, name);
    } else if (kind == "head") {
      insert(p.heads[id].tensors, name);
    } else {
      throw FormatError("unrecognised tensor path " + full);
    }
  }
  try {
    p.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint does not match its model_config: ") + e.what());
  }
  return p;
}

inline void save_checkpoint(const std::string& path, const ParameterSet& p,
                            const nlohmann::json& metadata = nlohmann::json::object()) {
  write_file(path, serialize(to_archive(p, metadata)));
}

struct LoadedCheckpoint {
  ParameterSet params;
  nlohmann::json metadata;
};

/// Loads a checkpoint; when `expected` is given, a different model config is
/// an error.
inline LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr) {
  const TensorArchive a = deserialize(read_file(path), path);
  LoadedCheckpoint out{from_archive(a), a.header.value("metadata", nlohmann::json::object())};
  if (expected && !(out.params.config == *expected)) {
    throw ConfigError(path + ": model_config " + to_json(out.params.config).dump() + " differs from expected " +
                      to_json(*expected).dump());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Resumable training state.

inline nlohmann::json to_json(const MetricsRow& r) {
  return {{"step", r.step}, {"dataset", r.dataset}, {"em", r.em}, {"f1", r.f1}, {"loss", r.loss}};
}

inline MetricsRow metrics_row_from_json(const nlohmann::json& j) {
  return {j.at("step"), j.at("dataset"), j.at("em"), j.at("f1"), j.at("loss")};
}

inline std::string serialize(const TrainState& s) {
  TensorArchive a = to_archive(s.params);
  for (auto [path, t] : to_archive(s.best).tensors) a.tensors.emplace_back("best/" + path, std::move(t));
  nlohmann::json moments = nlohmann::json::object();
  for (const auto& [path, m] : s.optimizer.moments) {
    a.tensors.emplace_back("opt.m/" + path, m.m);
    a.tensors.emplace_back("opt.v/" + path, m.v);
    moments[path] = m.t;
  }
  nlohmann::json& st = a.header["train_state"];
  st["best_dataset_ids"] = s.best.expert_ids();
  st["best_adapters_enabled"] = s.best.adapters_enabled;
  st["optimizer_step"] = s.optimizer.step;
  st["moment_steps"] = moments;
  st["step"] = s.step;
  st["best_score"] = s.best_score;
  st["best_step"] = s.best_step;
  st["since_improvement"] = s.since_improvement;
  st["checkpoints"] = s.checkpoints;
  st["history"] = nlohmann::json::array();
  for (const auto& r : s.history) st["history"].push_back(to_json(r));
  st["sampler_state"] = s.sampler_state;
  st["sampling_weights"] = s.sampling_weights;
  st["loss_sum"] = s.loss_sum;
  st["loss_count"] = s.loss_count;
  st["finished"] = s.finished;
  return serialize(a);
}

inline TrainState deserialize_train_state(const std::string& bytes, const std::string& source = "train state") {
  const TensorArchive a = deserialize(bytes, source);
  if (!a.header.contains("train_state")) throw FormatError(source + ": no train_state section");
  const nlohmann::json& st = a.header.at("train_state");
  TrainState s;
  TensorArchive current, best;
  current.header = best.header = a.header;
  best.header["dataset_ids"] = st.at("best_dataset_ids");
  best.header["adapters_enabled"] = st.at("best_adapters_enabled");
  for (const auto& [name, t] : a.tensors) {
    if (name.rfind("best/", 0) == 0) {
      best.tensors.emplace_back(name.substr(5), t);
    } else if (name.rfind("opt.m/", 0) == 0) {
      s.optimizer.moments[name.substr(6)].m = t;
    } else if (name.rfind("opt.v/", 0) == 0) {
      s.optimizer.moments[name.substr(6)].v = t;
    } else {
      current.tensors.emplace_back(name, t);
    }
  }
  s.params = from_archive(current);
  s.best = from_archive(best);
  for (auto& [path, m] : s.optimizer.moments) m.t = st.at("moment_steps").at(path);
  s.optimizer.step = st.at("optimizer_step");
  s.step = st.at("step");
  s.best_score = st.at("best_score").is_null() ? -std::numeric_limits<double>::infinity()
                                               : st.at("best_score").get<double>();
  s.best_step = st.at("best_step");
  s.since_improvement = st.at("since_improvement");
  s.checkpoints = st.at("checkpoints");
  for (const auto& r : st.at("history")) s.history.push_back(metrics_row_from_json(r));
  s.sampler_state = st.at("sampler_state");
  s.sampling_weights = st.at("sampling_weights").get<std::vector<double>>();
  s.loss_sum = st.at("loss_sum");
  s.loss_count = st.at("loss_count");
  s.finished = st.at("finished");
  return s;
}

inline void save_train_state(const std::string& path, const TrainState& s) { write_file(path, serialize(s)); }

inline TrainState load_train_state(const std::string& path) { return deserialize_train_state(read_file(path), path); }

}  // namespace made
