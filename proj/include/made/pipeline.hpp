#pragma once

// Experiment configuration and the commands behind the `made` CLI.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "made/checkpoint.hpp"
#include "made/data.hpp"
#include "made/eval.hpp"
#include "made/model.hpp"
#include "made/train.hpp"
#include "made/transfer.hpp"

namespace made {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration.

/// A dataset is either generated from a spec or read from JSONL files.
struct DatasetEntry {
  DatasetSpec spec;
  std::string train_file;
  std::string dev_file;

  bool generated() const { return train_file.empty() && dev_file.empty(); }
  const std::string& name() const { return spec.name; }
};

struct DataConfig {
  std::string dir = "data";
  std::uint64_t seed = 0;
  std::size_t stride = 128;
  std::vector<DatasetEntry> sources;
  std::vector<DatasetEntry> targets;
};

struct TransferSettings {
  TransferConfig base;
  std::size_t seeds = 3;
  std::size_t test_size = 400;
};

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  /// Per-mode partial train configs merged over `train`.
  json train_overrides = json::object();
  TransferSettings transfer;
  DataConfig data;
  std::string output_dir = "out";
  std::uint64_t seed = 0;
  /// Fully resolved configuration, as echoed to the output directory.
  json resolved;
};

inline json to_json(const DatasetSpec& s) {
  return {{"name", s.name},
          {"vocab_begin", s.vocab_begin},
          {"vocab_end", s.vocab_end},
          {"min_context", s.min_context},
          {"max_context", s.max_context},
          {"num_pairs", s.num_pairs},
          {"position_bias", to_string(s.position_bias)},
          {"distractor_rate", s.distractor_rate},
          {"indirection_depth", s.indirection_depth},
          {"duplicate_rate", s.duplicate_rate},
          {"train_size", s.train_size},
          {"dev_size", s.dev_size}};
}

namespace detail {

inline void reject_unknown_keys(const json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, _] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError(where + ": unknown key '" + k + "'");
}

}  // namespace detail

inline DatasetEntry dataset_entry_from_json(const json& j) {
  detail::reject_unknown_keys(j,
                              {"name", "vocab_begin", "vocab_end", "min_context", "max_context", "num_pairs",
                               "position_bias", "distractor_rate", "indirection_depth", "duplicate_rate",
                               "train_size", "dev_size", "train_file", "dev_file"},
                              "dataset");
  DatasetEntry e;
  DatasetSpec& s = e.spec;
  s.name = j.at("name").get<std::string>();
  s.vocab_begin = j.value("vocab_begin", s.vocab_begin);
  s.vocab_end = j.value("vocab_end", s.vocab_end);
  s.min_context = j.value("min_context", s.min_context);
  s.max_context = j.value("max_context", s.max_context);
  s.num_pairs = j.value("num_pairs", s.num_pairs);
  s.position_bias = position_bias_from_string(j.value("position_bias", to_string(s.position_bias)));
  s.distractor_rate = j.value("distractor_rate", s.distractor_rate);
  s.indirection_depth = j.value("indirection_depth", s.indirection_depth);
  s.duplicate_rate = j.value("duplicate_rate", s.duplicate_rate);
  s.train_size = j.value("train_size", s.train_size);
  s.dev_size = j.value("dev_size", s.dev_size);
  e.train_file = j.value("train_file", std::string());
  e.dev_file = j.value("dev_file", std::string());
  if (e.generated()) s.validate();
  return e;
}

inline json to_json(const DatasetEntry& e) {
  json j = to_json(e.spec);
  if (!e.generated()) {
    j = {{"name", e.spec.name}, {"train_file", e.train_file}, {"dev_file", e.dev_file}};
  }
  return j;
}

inline std::string to_string(SamplingMode m) { return m == SamplingMode::uniform ? "uniform" : "dynamic"; }

inline SamplingMode sampling_mode_from_string(const std::string& s) {
  if (s == "uniform") return SamplingMode::uniform;
  if (s == "dynamic") return SamplingMode::dynamic;
  throw ConfigError("unknown sampling mode '" + s + "'");
}

inline json to_json(const AdamWConfig& a) {
  return {{"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"weight_decay", a.weight_decay}};
}

inline AdamWConfig adamw_from_json(const json& j, AdamWConfig a = {}) {
  detail::reject_unknown_keys(j, {"beta1", "beta2", "eps", "weight_decay"}, "adamw");
  a.beta1 = j.value("beta1", a.beta1);
  a.beta2 = j.value("beta2", a.beta2);
  a.eps = j.value("eps", a.eps);
  a.weight_decay = j.value("weight_decay", a.weight_decay);
  return a;
}

inline json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"backbone_lr", c.backbone_lr},
          {"adapter_lr", c.adapter_lr},
          {"adamw", to_json(c.adamw)},
          {"checkpoint_interval", c.checkpoint_interval},
          {"patience", c.patience},
          {"max_epochs", c.max_epochs},
          {"max_steps", c.max_steps},
          {"sampling", to_string(c.sampling)},
          {"train_cap", c.train_cap},
          {"dev_cap", c.dev_cap},
          {"max_answer_length", c.max_answer_length},
          {"dynamic_floor", c.dynamic_floor},
          {"best_single", c.best_single}};
}

inline TrainConfig train_config_from_json(const json& j, TrainConfig c = {}) {
  detail::reject_unknown_keys(j,
                              {"batch_size", "backbone_lr", "adapter_lr", "adamw", "checkpoint_interval", "patience",
                               "max_epochs", "max_steps", "sampling", "train_cap", "dev_cap", "max_answer_length",
                               "dynamic_floor", "best_single"},
                              "train");
  c.batch_size = j.value("batch_size", c.batch_size);
  c.backbone_lr = j.value("backbone_lr", c.backbone_lr);
  c.adapter_lr = j.value("adapter_lr", c.adapter_lr);
  if (j.contains("adamw")) c.adamw = adamw_from_json(j["adamw"], c.adamw);
  c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
  c.patience = j.value("patience", c.patience);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.max_steps = j.value("max_steps", c.max_steps);
  if (j.contains("sampling")) c.sampling = sampling_mode_from_string(j["sampling"]);
  c.train_cap = j.value("train_cap", c.train_cap);
  c.dev_cap = j.value("dev_cap", c.dev_cap);
  c.max_answer_length = j.value("max_answer_length", c.max_answer_length);
  c.dynamic_floor = j.value("dynamic_floor", c.dynamic_floor);
  c.best_single = j.value("best_single", c.best_single);
  c.validate();
  return c;
}

inline json to_json(const TransferSettings& t) {
  const TransferConfig& c = t.base;
  return {{"k", c.k},
          {"max_steps", c.max_steps},
          {"patience", c.patience},
          {"backbone_lr", c.backbone_lr},
          {"adapter_lr", c.adapter_lr},
          {"freeze_backbone", c.freeze_backbone},
          {"batch_size", c.batch_size},
          {"adamw", to_json(c.adamw)},
          {"seeds", t.seeds},
          {"test_size", t.test_size}};
}

inline TransferSettings transfer_settings_from_json(const json& j, TransferSettings t = {}) {
  detail::reject_unknown_keys(j,
                              {"k", "max_steps", "patience", "backbone_lr", "adapter_lr", "freeze_backbone",
                               "batch_size", "adamw", "seeds", "test_size"},
                              "transfer");
  TransferConfig& c = t.base;
  c.k = j.value("k", c.k);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.patience = j.value("patience", c.patience);
  c.backbone_lr = j.value("backbone_lr", c.backbone_lr);
  c.adapter_lr = j.value("adapter_lr", c.adapter_lr);
  c.freeze_backbone = j.value("freeze_backbone", c.freeze_backbone);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("adamw")) c.adamw = adamw_from_json(j["adamw"], c.adamw);
  t.seeds = j.value("seeds", t.seeds);
  t.test_size = j.value("test_size", t.test_size);
  if (t.seeds == 0) throw ConfigError("transfer.seeds must be >= 1");
  c.validate();
  return t;
}

/// Applies "a.b.c=value" overrides. Values parse as JSON when possible and
/// fall back to plain strings.
inline void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &config;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) throw ConfigError("override '" + key + "' descends into a non-object");
    node = &(*node)[parts[i]];
  }
  if (!node->is_object() && !node->is_null()) throw ConfigError("override '" + key + "' descends into a non-object");
  (*node)[parts.back()] = value;
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
  detail::reject_unknown_keys(j, {"model", "train", "train_overrides", "transfer", "data", "output_dir", "seed"},
                              "config");
  ExperimentConfig c;
  if (j.contains("model")) {
    detail::reject_unknown_keys(j["model"],
                                {"num_layers", "d_model", "num_heads", "d_ff", "vocab_size", "max_positions",
                                 "adapter_bottleneck", "layer_norm_eps"},
                                "model");
    c.model = model_config_from_json(j["model"]);
  }
  c.model.validate();
  if (j.contains("train")) c.train = train_config_from_json(j["train"]);
  if (j.contains("train_overrides")) {
    c.train_overrides = j["train_overrides"];
    for (const auto& [mode, patch] : c.train_overrides.items()) {
      const std::vector<std::string> modes = {"single", "multi", "multi-dynamic", "made-joint", "adapter-tune",
                                              "single-adapters"};
      if (std::find(modes.begin(), modes.end(), mode) == modes.end()) {
        throw ConfigError("train_overrides: unknown mode '" + mode + "'");
      }
      json merged = to_json(c.train);
      merged.merge_patch(patch);
      train_config_from_json(merged);
    }
  }
  if (j.contains("transfer")) c.transfer = transfer_settings_from_json(j["transfer"]);
  if (j.contains("data")) {
    const json& d = j["data"];
    detail::reject_unknown_keys(d, {"dir", "seed", "stride", "sources", "targets"}, "data");
    c.data.dir = d.value("dir", c.data.dir);
    c.data.seed = d.value("seed", c.data.seed);
    c.data.stride = d.value("stride", c.data.stride);
    for (const auto& e : d.value("sources", json::array())) c.data.sources.push_back(dataset_entry_from_json(e));
    for (const auto& e : d.value("targets", json::array())) c.data.targets.push_back(dataset_entry_from_json(e));
  }
  if (c.data.stride == 0) throw ConfigError("data.stride must be >= 1");
  {
    DatasetCollection col;
    for (const auto& e : c.data.sources) col.sources.push_back(e.spec);
    for (const auto& e : c.data.targets) col.targets.push_back(e.spec);
    col.validate();
  }
  c.output_dir = j.value("output_dir", c.output_dir);
  c.seed = j.value("seed", c.seed);

  json data = {{"dir", c.data.dir}, {"seed", c.data.seed}, {"stride", c.data.stride}};
  data["sources"] = json::array();
  data["targets"] = json::array();
  for (const auto& e : c.data.sources) data["sources"].push_back(to_json(e));
  for (const auto& e : c.data.targets) data["targets"].push_back(to_json(e));
  c.resolved = {{"model", to_json(c.model)},
                {"train", to_json(c.train)},
                {"train_overrides", c.train_overrides},
                {"transfer", to_json(c.transfer)},
                {"data", data},
                {"output_dir", c.output_dir},
                {"seed", c.seed}};
  return c;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline ExperimentConfig load_experiment_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  json j = read_json_file(path);
  for (const auto& o : overrides) apply_override(j, o);
  return experiment_config_from_json(j);
}

/// Train settings for a mode: the base config with that mode's overrides.
inline TrainConfig train_config_for(const ExperimentConfig& c, const std::string& mode) {
  if (!c.train_overrides.contains(mode)) return c.train;
  json merged = to_json(c.train);
  merged.merge_patch(c.train_overrides[mode]);
  return train_config_from_json(merged);
}

// ---------------------------------------------------------------------------
// Output helpers.

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os << "step,dataset,em,f1,loss\n";
  for (const auto& r : rows)
    os << r.step << ',' << r.dataset << ',' << format_number(r.em) << ',' << format_number(r.f1) << ','
       << format_number(r.loss) << '\n';
  return os.str();
}

inline std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  std::getline(in, line);
  if (line != "step,dataset,em,f1,loss") throw DataError(path + ": not a metrics CSV");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[5];
    for (auto& x : f) std::getline(ss, x, ',');
    rows.push_back({std::stoull(f[0]), f[1], std::stod(f[2]), std::stod(f[3]), std::stod(f[4])});
  }
  return rows;
}

inline void echo_config(const ExperimentConfig& c) {
  write_text(fs::path(c.output_dir) / "config.resolved.json", c.resolved.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Data access.

inline fs::path split_path(const ExperimentConfig& c, const std::string& name, const std::string& split) {
  return fs::path(c.data.dir) / (name + "." + split + ".jsonl");
}

inline const DatasetEntry& find_dataset(const ExperimentConfig& c, const std::string& name) {
  for (const auto* list : {&c.data.sources, &c.data.targets})
    for (const auto& e : *list)
      if (e.name() == name) return e;
  throw UnknownExpertError("dataset '" + name + "' is not in the config");
}

inline bool is_target(const ExperimentConfig& c, const std::string& name) {
  for (const auto& e : c.data.targets)
    if (e.name() == name) return true;
  return false;
}

/// Examples of one split, capped to the first `cap` entries when cap > 0.
inline std::vector<Example> load_split(const ExperimentConfig& c, const std::string& name, const std::string& split,
                                       std::size_t cap = 0) {
  const DatasetEntry& e = find_dataset(c, name);
  std::string path;
  if (e.generated()) {
    path = split_path(c, name, split).string();
  } else {
    path = split == "train" ? e.train_file : e.dev_file;
  }
  if (path.empty()) throw DataError("dataset '" + name + "' has no " + split + " file");
  if (!fs::exists(path)) throw DataError(path + " does not exist; run gen-data first");
  LoadResult r = load_jsonl(path);
  if (cap && r.examples.size() > cap) r.examples.resize(cap);
  if (r.examples.empty()) throw DataError(path + " holds no usable examples");
  return std::move(r.examples);
}

inline QADataset load_prepared(const ExperimentConfig& c, const std::string& name, const std::string& split,
                               std::size_t cap = 0) {
  return prepare(name, load_split(c, name, split, cap), synthetic::vocab(), c.model.max_positions, c.data.stride);
}

/// Fixed test reservation of a target pool and the remainder it leaves for
/// K-shot sampling. The split depends only on the data seed.
struct TargetSplit {
  std::vector<Example> test;
  std::vector<Example> pool;
};

inline TargetSplit split_target(const ExperimentConfig& c, const std::string& name) {
  std::vector<Example> all = load_split(c, name, "dev");
  Rng rng(derive_seed(c.data.seed, "test-split:" + name));
  rng.shuffle(all.begin(), all.end());
  const std::size_t t = std::min(c.transfer.test_size, all.size());
  TargetSplit s;
  s.test.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(t));
  s.pool.assign(all.begin() + static_cast<std::ptrdiff_t>(t), all.end());
  return s;
}

inline std::vector<Example> sample_k(const std::vector<Example>& pool, std::size_t k, std::uint64_t seed,
                                     const std::string& name) {
  if (k < 2) throw ConfigError("transfer needs K >= 2 so both halves of the split are non-empty");
  if (pool.size() < k) {
    throw DataError("target '" + name + "' has " + std::to_string(pool.size()) + " examples after the test reservation, K=" +
                    std::to_string(k) + " requested");
  }
  std::vector<std::size_t> idx(pool.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(derive_seed(seed, "k-sample:" + name));
  rng.shuffle(idx.begin(), idx.end());
  std::vector<Example> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(pool[idx[i]]);
  return out;
}

// ---------------------------------------------------------------------------
// Commands.

inline json cmd_gen_data(const ExperimentConfig& c) {
  if (c.data.sources.empty() && c.data.targets.empty()) throw ConfigError("gen-data: no datasets configured");
  fs::create_directories(c.data.dir);
  json out = json::array();
  for (const auto& e : c.data.sources) {
    if (!e.generated()) continue;
    const Corpus corpus = generate(e.spec, c.data.seed);
    save_jsonl(split_path(c, e.name(), "train").string(), corpus.train);
    save_jsonl(split_path(c, e.name(), "dev").string(), corpus.dev);
    out.push_back({{"dataset", e.name()}, {"role", "source"}, {"train", corpus.train.size()}, {"dev", corpus.dev.size()}});
  }
  for (const auto& e : c.data.targets) {
    if (!e.generated()) continue;
    // Targets only need an evaluation pool; it holds both the reserved test
    // examples and the K-shot candidates.
    DatasetSpec s = e.spec;
    s.train_size = 1;
    const Corpus corpus = generate(s, c.data.seed);
    save_jsonl(split_path(c, e.name(), "dev").string(), corpus.dev);
    out.push_back({{"dataset", e.name()}, {"role", "target"}, {"dev", corpus.dev.size()}});
  }
  return {{"command", "gen-data"}, {"dir", c.data.dir}, {"datasets", out}};
}

inline const std::vector<std::string>& train_modes() {
  static const std::vector<std::string> modes = {"single", "multi", "multi-dynamic", "made-joint", "single-adapters"};
  return modes;
}

struct TrainOptions {
  std::string mode;
  /// Dataset for single mode; defaults to the only source.
  std::string dataset;
  std::string resume_from;
  /// Pause after this many total steps and save the resumable state.
  std::uint64_t stop_after = 0;
  /// Output stem; defaults to the mode (single: single-<dataset>).
  std::string name;
};

struct TrainJob {
  TrainPlan plan;
  ParameterSet init;
  std::vector<QADataset> train, dev;
  TrainConfig cfg;
};

inline std::vector<std::string> source_names(const ExperimentConfig& c) {
  std::vector<std::string> names;
  for (const auto& e : c.data.sources) names.push_back(e.name());
  return names;
}

/// EM+F1 of the best checkpoint of each single-dataset run.
inline std::vector<double> best_single_scores(const ExperimentConfig& c, const std::vector<std::string>& datasets) {
  std::vector<double> best;
  for (const auto& d : datasets) {
    const fs::path p = fs::path(c.output_dir) / ("single-" + d + ".metrics.csv");
    if (!fs::exists(p)) {
      throw ConfigError("multi-dynamic needs single-dataset results; run `train --mode single --dataset " + d +
                        "` first (missing " + p.string() + ")");
    }
    double b = -1.0;
    for (const auto& r : read_metrics_csv(p.string()))
      if (r.dataset == d) b = std::max(b, r.em + r.f1);
    best.push_back(b);
  }
  return best;
}

inline TrainJob make_train_job(const ExperimentConfig& c, const TrainOptions& o) {
  TrainJob job;
  job.cfg = train_config_for(c, o.mode);
  job.cfg.seed = c.seed;
  std::vector<std::string> names;
  if (o.mode == "single") {
    if (!o.dataset.empty()) {
      names = {o.dataset};
    } else if (c.data.sources.size() == 1) {
      names = {c.data.sources.front().name()};
    } else {
      throw ConfigError("single mode trains on exactly one dataset; pass --dataset");
    }
    job.init = init_finetune_model(c.model, c.seed, names.front());
    job.plan = {{names.front()}, true};
  } else if (o.mode == "multi" || o.mode == "multi-dynamic") {
    names = source_names(c);
    job.init = init_finetune_model(c.model, c.seed, kSharedExpert);
    job.plan = {std::vector<std::string>(names.size(), kSharedExpert), true};
    if (o.mode == "multi-dynamic") {
      job.cfg.sampling = SamplingMode::dynamic;
      if (job.cfg.best_single.empty()) job.cfg.best_single = best_single_scores(c, names);
    }
  } else if (o.mode == "made-joint") {
    names = source_names(c);
    job.init = init_model(c.model, c.seed, names);
    job.plan = {names, true};
  } else {
    throw ConfigError("unknown train mode '" + o.mode + "'");
  }
  if (names.empty()) throw ConfigError("no source datasets configured");
  for (const auto& n : names) {
    if (is_target(c, n)) throw ConfigError("dataset '" + n + "' is a target and cannot be trained on");
    job.train.push_back(load_prepared(c, n, "train", job.cfg.train_cap));
    job.dev.push_back(load_prepared(c, n, "dev", job.cfg.dev_cap));
  }
  return job;
}

inline json train_metadata(const std::string& mode, const TrainState& s) {
  return {{"mode", mode}, {"best_step", s.best_step}, {"best_score", s.best_score}, {"steps", s.step}};
}

inline json cmd_train(const ExperimentConfig& c, const TrainOptions& o) {
  echo_config(c);
  const fs::path out(c.output_dir);
  if (o.mode == "single-adapters") {
    if (!o.resume_from.empty() || o.stop_after) throw ConfigError("single-adapters runs cannot be paused or resumed");
    const auto names = source_names(c);
    if (names.empty()) throw ConfigError("no source datasets configured");
    TrainConfig cfg = train_config_for(c, o.mode);
    cfg.seed = c.seed;
    ParameterSet combined = init_model(c.model, c.seed, names);
    std::vector<MetricsRow> history;
    for (const auto& n : names) {
      const QADataset tr = load_prepared(c, n, "train", cfg.train_cap);
      const QADataset dv = load_prepared(c, n, "dev", cfg.dev_cap);
      TrainResult r = adapter_tune(init_model(c.model, c.seed, {n}), n, tr, dv, cfg);
      combined.adapters[n] = r.best.adapters.at(n);
      combined.heads[n] = r.best.heads.at(n);
      history.insert(history.end(), r.history.begin(), r.history.end());
    }
    const std::string stem = o.name.empty() ? o.mode : o.name;
    save_checkpoint((out / (stem + ".ckpt")).string(), combined, {{"mode", o.mode}});
    write_text(out / (stem + ".metrics.csv"), metrics_csv(history));
    return {{"command", "train"}, {"mode", o.mode}, {"checkpoint", (out / (stem + ".ckpt")).string()}};
  }
  TrainJob job = make_train_job(c, o);
  const std::string stem =
      !o.name.empty() ? o.name : (o.mode == "single" ? "single-" + job.plan.routes.front() : o.mode);
  TrainState state = o.resume_from.empty() ? Trainer::initial_state(job.init) : load_train_state(o.resume_from);
  if (!o.resume_from.empty() && !(state.params.config == c.model)) {
    throw ConfigError("resume state was trained under a different model_config");
  }
  Trainer trainer(std::move(state), job.plan, pointers(job.train), pointers(job.dev), job.cfg);
  trainer.run(o.stop_after);
  const TrainState& s = trainer.state();
  save_train_state((out / (stem + ".state")).string(), s);
  write_text(out / (stem + ".metrics.csv"), metrics_csv(s.history));
  json result = {{"command", "train"},         {"mode", o.mode},         {"steps", s.step},
                 {"finished", s.finished},     {"best_step", s.best_step}, {"best_score", s.best_score},
                 {"state", (out / (stem + ".state")).string()}};
  if (s.finished) {
    save_checkpoint((out / (stem + ".ckpt")).string(), s.best, train_metadata(o.mode, s));
    result["checkpoint"] = (out / (stem + ".ckpt")).string();
  }
  return result;
}

inline json cmd_adapter_tune(const ExperimentConfig& c, const std::string& checkpoint, const std::string& dataset,
                             const std::string& output) {
  echo_config(c);
  LoadedCheckpoint in = load_checkpoint(checkpoint, &c.model);
  in.params.require_expert(dataset);
  TrainConfig cfg = train_config_for(c, "adapter-tune");
  cfg.seed = c.seed;
  const QADataset tr = load_prepared(c, dataset, "train", cfg.train_cap);
  const QADataset dv = load_prepared(c, dataset, "dev", cfg.dev_cap);
  TrainResult r = adapter_tune(in.params, dataset, tr, dv, cfg);
  ParameterSet outp = in.params;
  outp.adapters[dataset] = r.best.adapters.at(dataset);
  outp.heads[dataset] = r.best.heads.at(dataset);
  json meta = in.metadata;
  meta["adapter_tuned"].push_back({{"dataset", dataset}, {"best_step", r.best_step}, {"best_f1", r.best_score}});
  const std::string dest = output.empty() ? (fs::path(c.output_dir) / "made.ckpt").string() : output;
  save_checkpoint(dest, outp, meta);
  write_text(fs::path(c.output_dir) / ("adapter-tune-" + dataset + ".metrics.csv"), metrics_csv(r.history));
  return {{"command", "adapter-tune"}, {"dataset", dataset}, {"checkpoint", dest}, {"best_step", r.best_step},
          {"best_f1", r.best_score}};
}

/// Zero-shot model for a method: avg, ensemble, or expert:<id>.
inline ScoreReport zero_shot_score(const ParameterSet& p, const QADataset& test, const std::string& method,
                                   std::size_t max_answer_length) {
  if (method == "avg") {
    const ParameterSet avg = average_experts(p);
    return evaluate(ExpertScorer(avg, kAveragedExpert), test, max_answer_length);
  }
  if (method == "ensemble") return evaluate(EnsembleScorer(p), test, max_answer_length);
  if (method.rfind("expert:", 0) == 0) {
    const std::string id = method.substr(7);
    return evaluate(ExpertScorer(p, id), test, max_answer_length);
  }
  throw ConfigError("unknown zero-shot method '" + method + "' (avg, ensemble, expert:<id>, grid)");
}

inline QADataset target_test_set(const ExperimentConfig& c, const std::string& target) {
  if (!is_target(c, target)) throw UnknownExpertError("'" + target + "' is not a configured target dataset");
  return prepare(target, split_target(c, target).test, synthetic::vocab(), c.model.max_positions, c.data.stride);
}

inline std::vector<std::string> resolve_targets(const ExperimentConfig& c, const std::string& target) {
  std::vector<std::string> names;
  if (target.empty() || target == "all") {
    for (const auto& e : c.data.targets) names.push_back(e.name());
  } else {
    names.push_back(target);
  }
  if (names.empty()) throw ConfigError("no target datasets configured");
  return names;
}

inline json cmd_zero_shot(const ExperimentConfig& c, const std::string& checkpoint, const std::string& target,
                          const std::string& method, const std::string& tag = "") {
  echo_config(c);
  const LoadedCheckpoint in = load_checkpoint(checkpoint, &c.model);
  const auto targets = resolve_targets(c, target);
  const std::size_t max_len = c.train.max_answer_length;
  const std::string stem = tag.empty() ? fs::path(checkpoint).stem().string() : tag;
  if (method == "grid") {
    std::ostringstream csv;
    csv << "expert";
    for (const auto& t : targets) csv << ',' << t;
    csv << '\n';
    std::vector<QADataset> tests;
    for (const auto& t : targets) tests.push_back(target_test_set(c, t));
    json grid = json::object();
    for (const auto& id : in.params.expert_ids()) {
      csv << id;
      for (const auto& test : tests) {
        const ScoreReport r = zero_shot_score(in.params, test, "expert:" + id, max_len);
        csv << ',' << format_number(r.f1);
        grid[id][test.name] = r.f1;
      }
      csv << '\n';
    }
    const fs::path path = fs::path(c.output_dir) / ("zero-shot-grid-" + stem + ".csv");
    write_text(path, csv.str());
    return {{"command", "zero-shot"}, {"method", "grid"}, {"f1", grid}, {"csv", path.string()}};
  }
  json reports = json::object();
  for (const auto& t : targets) {
    const ScoreReport r = zero_shot_score(in.params, target_test_set(c, t), method, max_len);
    json rep = to_json(r);
    rep["target"] = t;
    rep["method"] = method;
    std::string safe = method;
    std::replace(safe.begin(), safe.end(), ':', '-');
    write_text(fs::path(c.output_dir) / ("zero-shot-" + safe + "-" + t + "-" + stem + ".json"), rep.dump(2) + "\n");
    reports[t] = rep;
  }
  return {{"command", "zero-shot"}, {"method", method}, {"reports", reports}};
}

struct TransferRun {
  std::uint64_t seed = 0;
  TransferResult result;
  ScoreReport test;
};

/// One transfer method on one target for seeds base_seed .. base_seed+n−1.
inline std::vector<TransferRun> run_transfer(const ExperimentConfig& c, const ParameterSet& params,
                                             const std::string& target, std::size_t k, const std::string& method,
                                             std::size_t seeds) {
  if (method != "pre-avg" && method != "post-avg") {
    throw ConfigError("unknown transfer method '" + method + "' (pre-avg, post-avg)");
  }
  if (k < 2) throw ConfigError("transfer needs K >= 2 so both halves of the split are non-empty");
  const TargetSplit split = split_target(c, target);
  const QADataset test = prepare(target, split.test, synthetic::vocab(), c.model.max_positions, c.data.stride);
  std::vector<TransferRun> runs;
  for (std::size_t s = 0; s < seeds; ++s) {
    TransferConfig cfg = c.transfer.base;
    cfg.k = k;
    cfg.seed = c.seed + s;
    const auto examples = sample_k(split.pool, k, cfg.seed, target);
    TransferRun run;
    run.seed = cfg.seed;
    run.result = method == "pre-avg"
                     ? transfer_pre_avg(params, examples, synthetic::vocab(), c.data.stride, cfg)
                     : transfer_post_avg(params, examples, synthetic::vocab(), c.data.stride, cfg);
    run.test = evaluate(ExpertScorer(run.result.params, kTargetExpert), test, c.train.max_answer_length);
    runs.push_back(std::move(run));
  }
  return runs;
}

inline json cmd_transfer(const ExperimentConfig& c, const std::string& checkpoint, const std::string& target,
                         std::size_t k, const std::string& method, std::size_t seeds, const std::string& tag = "") {
  echo_config(c);
  const LoadedCheckpoint in = load_checkpoint(checkpoint, &c.model);
  const std::string stem = tag.empty() ? fs::path(checkpoint).stem().string() : tag;
  json out = json::object();
  for (const auto& t : resolve_targets(c, target)) {
    const auto runs = run_transfer(c, in.params, t, k, method, seeds);
    json report = {{"target", t}, {"method", method}, {"k", k}, {"checkpoint", checkpoint}};
    report["seeds"] = json::array();
    std::ostringstream log;
    log << "seed,epoch,step,train_loss,val_loss\n";
    double em = 0.0, f1 = 0.0;
    for (const auto& r : runs) {
      json row = to_json(r.result);
      row["seed"] = r.seed;
      row["em"] = r.test.em;
      row["f1"] = r.test.f1;
      row.erase("history");
      report["seeds"].push_back(row);
      for (const auto& h : r.result.history)
        log << r.seed << ',' << h.epoch << ',' << h.step << ',' << format_number(h.train_loss) << ','
            << format_number(h.val_loss) << '\n';
      em += r.test.em;
      f1 += r.test.f1;
    }
    report["mean_em"] = em / static_cast<double>(runs.size());
    report["mean_f1"] = f1 / static_cast<double>(runs.size());
    const std::string base = "transfer-" + method + "-" + t + "-k" + std::to_string(k) + "-" + stem;
    write_text(fs::path(c.output_dir) / (base + ".json"), report.dump(2) + "\n");
    write_text(fs::path(c.output_dir) / (base + ".log.csv"), log.str());
    out[t] = report;
  }
  return {{"command", "transfer"}, {"method", method}, {"k", k}, {"reports", out}};
}

/// gen-data → made-joint → adapter-tune for every source → zero-shot
/// (avg, ensemble, grid) → pre-/post-average transfer on every target.
inline json cmd_pipeline(const ExperimentConfig& c) {
  json out = {{"command", "pipeline"}};
  out["gen_data"] = cmd_gen_data(c);
  out["train"] = cmd_train(c, {"made-joint", "", "", 0, ""});
  const std::string joint = (fs::path(c.output_dir) / "made-joint.ckpt").string();
  const std::string made = (fs::path(c.output_dir) / "made.ckpt").string();
  std::string current = joint;
  out["adapter_tune"] = json::array();
  for (const auto& n : source_names(c)) {
    out["adapter_tune"].push_back(cmd_adapter_tune(c, current, n, made));
    current = made;
  }
  if (!c.data.targets.empty()) {
    for (const std::string m : {"avg", "ensemble", "grid"}) out["zero_shot"][m] = cmd_zero_shot(c, made, "all", m);
    for (const std::string m : {"pre-avg", "post-avg"})
      out["transfer"][m] = cmd_transfer(c, made, "all", c.transfer.base.k, m, c.transfer.seeds);
  }
  write_text(fs::path(c.output_dir) / "pipeline.json", out.dump(2) + "\n");
  return out;
}

}  // namespace made
