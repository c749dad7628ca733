#pragma once

// Span decoding across chunks and EM/F1 scoring.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "made/data.hpp"
#include "made/model.hpp"

namespace made {

/// Start/end log-probabilities over the packed positions of one chunk.
struct SpanDistribution {
  std::vector<double> start;
  std::vector<double> end;
};

using ChunkScorer = std::function<SpanDistribution(const Chunk&)>;

inline SpanDistribution to_distribution(const Tensor& log_probs) {
  const std::size_t n = log_probs.dim(1);
  SpanDistribution d;
  d.start.assign(log_probs.data().begin(), log_probs.data().begin() + static_cast<std::ptrdiff_t>(n));
  d.end.assign(log_probs.data().begin() + static_cast<std::ptrdiff_t>(n), log_probs.data().end());
  return d;
}

/// One forward pass of (θ, φ, ψ) over a chunk. A null adapter runs the plain
/// backbone.
inline SpanDistribution expert_distribution(const ModelConfig& config, const Backbone& backbone, const Adapter* adapter,
                                            const SpanHead& head, const Chunk& chunk) {
  Graph g;
  BackboneVars b = bind_backbone(g, config, backbone, false);
  AdapterVars a;
  if (adapter) a = bind_adapter(g, config, *adapter, "eval", false);
  HeadVars h = bind_head(g, head, "eval", false);
  Var hidden = encode(config, b, adapter ? &a : nullptr, chunk.ids);
  return to_distribution(span_log_probs(h, hidden, chunk.eligible).value());
}

/// Scores chunks with a single expert of a ParameterSet and counts encoder
/// passes.
class ExpertScorer {
 public:
  ExpertScorer(const ParameterSet& params, std::string expert_id) : params_(&params), id_(std::move(expert_id)) {
    params.require_expert(id_);
  }

  SpanDistribution operator()(const Chunk& chunk) const {
    ++*passes_;
    const Adapter* adapter = params_->adapters_enabled ? &params_->adapters.at(id_) : nullptr;
    return expert_distribution(params_->config, params_->backbone, adapter, params_->heads.at(id_), chunk);
  }

  std::size_t forward_passes() const { return *passes_; }

 private:
  const ParameterSet* params_;
  std::string id_;
  std::shared_ptr<std::size_t> passes_ = std::make_shared<std::size_t>(0);
};

/// Averages token-level start/end probabilities of every expert (probability
/// space), one encoder pass per expert.
class EnsembleScorer {
 public:
  explicit EnsembleScorer(const ParameterSet& params) : params_(&params) {
    if (params.heads.empty()) throw UnknownExpertError("ensemble needs at least one expert");
  }

  SpanDistribution operator()(const Chunk& chunk) const {
    const auto ids = params_->expert_ids();
    std::vector<double> start(chunk.ids.size(), 0.0), end(chunk.ids.size(), 0.0);
    for (const auto& id : ids) {
      ++*passes_;
      const Adapter* adapter = params_->adapters_enabled ? &params_->adapters.at(id) : nullptr;
      const auto d = expert_distribution(params_->config, params_->backbone, adapter, params_->heads.at(id), chunk);
      for (std::size_t i = 0; i < start.size(); ++i) {
        start[i] += std::exp(d.start[i]);
        end[i] += std::exp(d.end[i]);
      }
    }
    SpanDistribution out;
    const double inv = 1.0 / static_cast<double>(ids.size());
    for (std::size_t i = 0; i < start.size(); ++i) {
      out.start.push_back(start[i] > 0.0 ? std::log(start[i] * inv) : kMaskedLogit);
      out.end.push_back(end[i] > 0.0 ? std::log(end[i] * inv) : kMaskedLogit);
    }
    return out;
  }

  std::size_t forward_passes() const { return *passes_; }

 private:
  const ParameterSet* params_;
  std::shared_ptr<std::size_t> passes_ = std::make_shared<std::size_t>(0);
};

struct Prediction {
  std::string example_id;
  std::string answer;
  /// Context-level token span of the answer.
  Span span;
  double log_prob = -std::numeric_limits<double>::infinity();
  std::size_t chunk_offset = 0;
};

inline constexpr std::size_t kDefaultMaxAnswerLength = 10;

/// Best non-CLS span (i ≤ j < i + max_answer_len, both in the context
/// window) across all chunks by start[i] + end[j]. Ties keep the earliest
/// chunk, then the earliest (i, j).
inline Prediction decode(const Example& ex, const std::vector<Chunk>& chunks,
                         const std::vector<SpanDistribution>& dists, std::size_t max_answer_len = kDefaultMaxAnswerLength) {
  if (chunks.size() != dists.size()) throw DimensionError("decode: one distribution per chunk required");
  if (max_answer_len == 0) throw ConfigError("max_answer_len must be >= 1");
  Prediction best;
  best.example_id = ex.id;
  bool found = false;
  for (std::size_t c = 0; c < chunks.size(); ++c) {
    const Chunk& ch = chunks[c];
    const auto& d = dists[c];
    const std::size_t n = ch.ids.size();
    for (std::size_t i = ch.context_start(); i < n; ++i) {
      if (!ch.eligible[i]) continue;
      const std::size_t jmax = std::min(n, i + max_answer_len);
      for (std::size_t j = i; j < jmax; ++j) {
        if (!ch.eligible[j]) continue;
        const double lp = d.start[i] + d.end[j];
        if (!found || lp > best.log_prob) {
          found = true;
          best.log_prob = lp;
          best.chunk_offset = ch.offset;
          best.span = {i - ch.context_start() + ch.offset, j - ch.context_start() + ch.offset};
        }
      }
    }
  }
  if (!found) throw DataError("decode: example " + ex.id + " has no eligible span positions");
  best.answer = join_tokens(ex.context, best.span.start, best.span.end);
  return best;
}

template <typename Scorer>
Prediction decode(const Scorer& scorer, const Example& ex, const std::vector<Chunk>& chunks,
                  std::size_t max_answer_len = kDefaultMaxAnswerLength) {
  std::vector<SpanDistribution> dists;
  dists.reserve(chunks.size());
  for (const auto& c : chunks) dists.push_back(scorer(c));
  return decode(ex, chunks, dists, max_answer_len);
}

// ---------------------------------------------------------------------------
// Metrics. Normalization is lowercase + whitespace split.

inline TokenList normalize_answer(const std::string& s) {
  std::string lower = s;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return split_whitespace(lower);
}

inline double token_f1_single(const std::string& prediction, const std::string& gold) {
  const TokenList p = normalize_answer(prediction), g = normalize_answer(gold);
  if (p.empty() && g.empty()) return 1.0;
  if (p.empty() || g.empty()) return 0.0;
  std::map<std::string, long> counts;
  for (const auto& t : g) ++counts[t];
  long common = 0;
  for (const auto& t : p) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(p.size());
  const double recall = static_cast<double>(common) / static_cast<double>(g.size());
  return 2.0 * precision * recall / (precision + recall);
}

/// Max over golds of bag-of-tokens F1, in [0, 1].
inline double token_f1(const std::string& prediction, const std::vector<std::string>& golds) {
  double best = 0.0;
  for (const auto& g : golds) best = std::max(best, token_f1_single(prediction, g));
  return best;
}

inline int exact_match(const std::string& prediction, const std::vector<std::string>& golds) {
  const TokenList p = normalize_answer(prediction);
  for (const auto& g : golds)
    if (normalize_answer(g) == p) return 1;
  return 0;
}

struct ScoreRow {
  std::string example_id;
  std::string prediction;
  int em = 0;
  double f1 = 0.0;
};

/// EM and F1 as percentages.
struct ScoreReport {
  double em = 0.0;
  double f1 = 0.0;
  std::vector<ScoreRow> rows;
};

inline ScoreReport score(const std::vector<std::pair<std::string, std::string>>& id_and_prediction,
                         const std::vector<std::vector<std::string>>& golds) {
  if (id_and_prediction.empty()) throw DataError("cannot score an empty dataset");
  if (id_and_prediction.size() != golds.size()) throw DimensionError("score: predictions and golds differ in length");
  ScoreReport r;
  double em = 0.0, f1 = 0.0;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    ScoreRow row{id_and_prediction[i].first, id_and_prediction[i].second, 0, 0.0};
    row.em = exact_match(row.prediction, golds[i]);
    row.f1 = token_f1(row.prediction, golds[i]);
    em += row.em;
    f1 += row.f1;
    r.rows.push_back(std::move(row));
  }
  r.em = 100.0 * em / static_cast<double>(golds.size());
  r.f1 = 100.0 * f1 / static_cast<double>(golds.size());
  return r;
}

template <typename Scorer>
ScoreReport evaluate(const Scorer& scorer, const QADataset& dataset, std::size_t max_answer_len = kDefaultMaxAnswerLength) {
  if (dataset.examples.empty()) throw DataError("cannot evaluate on empty dataset " + dataset.name);
  std::vector<std::pair<std::string, std::string>> preds;
  std::vector<std::vector<std::string>> golds;
  for (std::size_t i = 0; i < dataset.examples.size(); ++i) {
    const auto p = decode(scorer, dataset.examples[i], dataset.chunks[i], max_answer_len);
    preds.emplace_back(p.example_id, p.answer);
    golds.push_back(dataset.examples[i].answers);
  }
  return score(preds, golds);
}

inline nlohmann::json to_json(const ScoreReport& r, bool with_rows = false) {
  nlohmann::json j;
  j["em"] = r.em;
  j["f1"] = r.f1;
  j["n"] = r.rows.size();
  if (with_rows) {
    j["rows"] = nlohmann::json::array();
    for (const auto& row : r.rows)
      j["rows"].push_back({{"id", row.example_id}, {"prediction", row.prediction}, {"em", row.em}, {"f1", row.f1}});
  }
  return j;
}

inline void write_csv(std::ostream& out, const ScoreReport& r) {
  out << "id,prediction,em,f1\n";
  for (const auto& row : r.rows) out << row.example_id << ',' << row.prediction << ',' << row.em << ',' << row.f1 << '\n';
}

}  // namespace made
