#pragma once

// Parameter-space composition of dataset experts: uniform and weighted
// averaging, probability-space ensembles, and few-shot pre-/post-average
// transfer.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "made/autodiff.hpp"
#include "made/data.hpp"
#include "made/eval.hpp"
#include "made/model.hpp"
#include "made/train.hpp"

namespace made {

using MixtureWeights = std::vector<double>;

namespace detail {

inline ParamMap combine(const std::vector<const ParamMap*>& maps, const MixtureWeights& alpha) {
  if (maps.empty()) throw ConfigError("averaging needs at least one expert");
  if (alpha.size() != maps.size()) throw ConfigError("mixture weights do not match the number of experts");
  const ParamMap& first = *maps.front();
  for (const auto* m : maps) {
    if (m->size() != first.size()) throw DimensionError("experts have different parameter sets");
    for (const auto& [path, t] : first) {
      auto it = m->find(path);
      if (it == m->end()) throw DimensionError("expert is missing parameter " + path);
      if (it->second.shape() != t.shape()) {
        throw DimensionError("shape mismatch for " + path + ": " + shape_str(t.shape()) + " vs " +
                             shape_str(it->second.shape()));
      }
    }
  }
  ParamMap out;
  for (const auto& [path, t] : first) {
    Tensor acc(t.shape());
    for (std::size_t e = 0; e < maps.size(); ++e) {
      const Tensor& x = maps[e]->at(path);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += alpha[e] * x[i];
    }
    out.emplace(path, std::move(acc));
  }
  return out;
}

}  // namespace detail

struct Expert {
  Adapter adapter;
  SpanHead head;
  friend bool operator==(const Expert&, const Expert&) = default;
};

/// α_i = exp(−loss_i) / Σ_j exp(−loss_j).
inline MixtureWeights mixture_weights(const std::vector<double>& mean_losses) {
  if (mean_losses.empty()) throw ConfigError("mixture_weights: no losses");
  double lo = std::numeric_limits<double>::infinity();
  for (double l : mean_losses) {
    if (!std::isfinite(l)) throw NumericError("mixture_weights: non-finite loss");
    lo = std::min(lo, l);
  }
  double z = 0.0;
  for (double l : mean_losses) z += std::exp(-(l - lo));
  const double log_z = std::log(z) - lo;
  MixtureWeights alpha;
  for (double l : mean_losses) alpha.push_back(std::exp(-l - log_z));
  return alpha;
}

/// Σ α_i φ_i and Σ α_i ψ_i for normalized α.
inline Expert weighted_average(const std::vector<Adapter>& adapters, const std::vector<SpanHead>& heads,
                               const MixtureWeights& alpha) {
  if (adapters.size() != heads.size()) throw ConfigError("weighted_average: adapters and heads differ in count");
  std::vector<const ParamMap*> a, h;
  for (const auto& x : adapters) a.push_back(&x.tensors);
  for (const auto& x : heads) h.push_back(&x.tensors);
  return {Adapter{detail::combine(a, alpha)}, SpanHead{detail::combine(h, alpha)}};
}

inline Expert average_uniform(const std::vector<Adapter>& adapters, const std::vector<SpanHead>& heads) {
  if (adapters.empty()) throw ConfigError("averaging needs at least one expert");
  return weighted_average(adapters, heads, MixtureWeights(adapters.size(), 1.0 / static_cast<double>(adapters.size())));
}

/// Experts of a parameter set in id order.
inline std::pair<std::vector<Adapter>, std::vector<SpanHead>> experts_of(const ParameterSet& p) {
  std::pair<std::vector<Adapter>, std::vector<SpanHead>> out;
  for (const auto& id : p.expert_ids()) {
    out.first.push_back(p.adapters.at(id));
    out.second.push_back(p.heads.at(id));
  }
  return out;
}

/// Single-expert model holding θ and the α-combination of every expert.
inline ParameterSet collapse(const ParameterSet& p, const MixtureWeights& alpha, const std::string& new_id) {
  const auto [adapters, heads] = experts_of(p);
  Expert e = weighted_average(adapters, heads, alpha);
  ParameterSet out;
  out.config = p.config;
  out.backbone = p.backbone;
  out.adapters_enabled = p.adapters_enabled;
  out.adapters.emplace(new_id, std::move(e.adapter));
  out.heads.emplace(new_id, std::move(e.head));
  return out;
}

inline constexpr const char* kAveragedExpert = "avg";

inline ParameterSet average_experts(const ParameterSet& p, const std::string& new_id = kAveragedExpert) {
  const std::size_t n = p.heads.size();
  if (n == 0) throw ConfigError("averaging needs at least one expert");
  return collapse(p, MixtureWeights(n, 1.0 / static_cast<double>(n)), new_id);
}

inline Prediction ensemble_predict(const ParameterSet& p, const Example& ex, const std::vector<Chunk>& chunks,
                                   std::size_t max_answer_len = kDefaultMaxAnswerLength) {
  return decode(EnsembleScorer(p), ex, chunks, max_answer_len);
}

/// −log((1/|S|) Σ exp(−loss_i)).
inline double marginal_nll(const std::vector<double>& losses) {
  if (losses.empty()) throw ConfigError("marginal_nll: no experts");
  const double lo = *std::min_element(losses.begin(), losses.end());
  double s = 0.0;
  for (double l : losses) s += std::exp(-(l - lo));
  return lo - std::log(s / static_cast<double>(losses.size()));
}

inline Var marginal_nll(const std::vector<Var>& losses) {
  if (losses.empty()) throw ConfigError("marginal_nll: no experts");
  Var lse = logsumexp(scale(stack(losses), -1.0));
  return add(scale(lse, -1.0), lse.graph().constant(Tensor::scalar(std::log(static_cast<double>(losses.size())))));
}

inline double marginal_nll(const ParameterSet& p, const Chunk& chunk) {
  std::vector<double> losses;
  for (const auto& id : p.expert_ids()) losses.push_back(chunk_loss(p, id, chunk));
  return marginal_nll(losses);
}

/// Mean per-chunk NLL of one expert over every chunk of a dataset.
inline double mean_chunk_loss(const ParameterSet& p, const std::string& id, const QADataset& d) {
  if (d.units.empty()) throw DataError("mean_chunk_loss: empty dataset " + d.name);
  double total = 0.0;
  for (std::size_t i = 0; i < d.size_units(); ++i) total += chunk_loss(p, id, d.unit(i));
  return total / static_cast<double>(d.size_units());
}

inline double mean_marginal_nll(const ParameterSet& p, const QADataset& d) {
  if (d.units.empty()) throw DataError("mean_marginal_nll: empty dataset " + d.name);
  double total = 0.0;
  for (std::size_t i = 0; i < d.size_units(); ++i) total += marginal_nll(p, d.unit(i));
  return total / static_cast<double>(d.size_units());
}

// ---------------------------------------------------------------------------
// Few-shot transfer.

struct TransferConfig {
  std::size_t k = 64;
  std::size_t max_steps = 200;
  /// Epochs without validation-loss improvement before stopping.
  std::size_t patience = 10;
  double backbone_lr = 1e-5;
  double adapter_lr = 1e-5;
  bool freeze_backbone = false;
  std::size_t batch_size = 8;
  AdamWConfig adamw;
  std::uint64_t seed = 0;

  void validate() const {
    if (k < 2) throw ConfigError("transfer needs K >= 2 so both halves of the split are non-empty");
    if (max_steps == 0) throw ConfigError("transfer max_steps must be >= 1");
    if (patience == 0) throw ConfigError("transfer patience must be >= 1");
    if (batch_size == 0) throw ConfigError("transfer batch_size must be >= 1");
    if (!(backbone_lr > 0.0) || !(adapter_lr > 0.0)) throw ConfigError("transfer learning rates must be positive");
  }
};

struct TransferLogRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TransferResult {
  /// Single expert with id kTargetExpert.
  ParameterSet params;
  MixtureWeights alpha;
  std::vector<std::string> expert_ids;
  std::vector<double> probe_losses;
  std::size_t steps_run = 0;
  std::size_t best_step = 0;
  std::size_t train_size = 0;
  std::size_t val_size = 0;
  std::vector<TransferLogRow> history;
};

inline constexpr const char* kTargetExpert = "target";

/// First K/2 examples train, the rest validate.
inline std::pair<std::vector<Example>, std::vector<Example>> split_half(const std::vector<Example>& k_examples) {
  if (k_examples.size() < 2) throw ConfigError("transfer needs K >= 2 so both halves of the split are non-empty");
  const std::size_t half = k_examples.size() / 2;
  return {std::vector<Example>(k_examples.begin(), k_examples.begin() + static_cast<std::ptrdiff_t>(half)),
          std::vector<Example>(k_examples.begin() + static_cast<std::ptrdiff_t>(half), k_examples.end())};
}

namespace detail {

using ItemLoss = std::function<Var(Graph&, const ParameterSet&, const Chunk&)>;
using ValLoss = std::function<double(const ParameterSet&)>;

/// Epoch loop shared by both transfer methods: shuffled passes over the
/// training units, validation loss after each epoch, best-on-validation
/// selection, patience in epochs and a hard step cap.
inline ParameterSet few_shot_tune(ParameterSet params, const QADataset& train, const ItemLoss& item_loss,
                                  const ValLoss& val_loss, const TransferConfig& cfg, TransferResult& log) {
  OptimizerState opt;
  Rng rng(derive_seed(cfg.seed, "transfer:order"));
  const bool backbone = !cfg.freeze_backbone;
  const LearningRateFn lr = [&](const std::string& path) {
    return path.rfind(kBackbonePrefix, 0) == 0 ? cfg.backbone_lr : cfg.adapter_lr;
  };
  ParameterSet best = params;
  double best_val = val_loss(params);
  log.history.push_back({0, 0, 0.0, best_val});
  std::size_t step = 0, stale = 0, epoch = 0;
  std::vector<std::size_t> order(train.size_units());
  while (step < cfg.max_steps && stale < cfg.patience) {
    ++epoch;
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size() && step < cfg.max_steps; b += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - b);
      BatchGradient bg = batch_gradient(n, [&](Graph& g, std::size_t i) {
        return item_loss(g, params, train.unit(order[b + i]));
      });
      if (!backbone) {
        for (auto it = bg.grads.begin(); it != bg.grads.end();)
          it = it->first.rfind(kBackbonePrefix, 0) == 0 ? bg.grads.erase(it) : std::next(it);
      }
      adamw_step(opt, params, bg.grads, lr, cfg.adamw);
      ++step;
      epoch_loss += bg.mean_loss;
      ++batches;
    }
    const double v = val_loss(params);
    log.history.push_back({epoch, step, batches ? epoch_loss / static_cast<double>(batches) : 0.0, v});
    if (v < best_val) {
      best_val = v;
      best = params;
      log.best_step = step;
      stale = 0;
    } else {
      ++stale;
    }
  }
  log.steps_run = step;
  return best;
}

}  // namespace detail

/// Initialize one expert as the α-combination (α from zero-shot loss on the
/// training half), then fine-tune it on the training half.
inline TransferResult transfer_pre_avg(const ParameterSet& params, const std::vector<Example>& k_examples,
                                       const Vocab& vocab, std::size_t stride, const TransferConfig& cfg) {
  cfg.validate();
  if (k_examples.size() != cfg.k) throw ConfigError("transfer: expected exactly K examples");
  const auto [tr, va] = split_half(k_examples);
  const QADataset train = prepare("transfer-train", tr, vocab, params.config.max_positions, stride);
  const QADataset val = prepare("transfer-val", va, vocab, params.config.max_positions, stride);
  TransferResult r;
  r.train_size = tr.size();
  r.val_size = va.size();
  r.expert_ids = params.expert_ids();
  for (const auto& id : r.expert_ids) r.probe_losses.push_back(mean_chunk_loss(params, id, train));
  r.alpha = mixture_weights(r.probe_losses);
  ParameterSet start = collapse(params, r.alpha, kTargetExpert);
  auto item_loss = [&](Graph& g, const ParameterSet& p, const Chunk& c) {
    BackboneVars b = bind_backbone(g, p.config, p.backbone, !cfg.freeze_backbone);
    ExpertVars e = bind_expert(g, p, kTargetExpert, true);
    return chunk_loss(expert_log_probs(p.config, b, e, c), c);
  };
  auto val_loss = [&](const ParameterSet& p) { return mean_chunk_loss(p, kTargetExpert, val); };
  r.params = detail::few_shot_tune(std::move(start), train, item_loss, val_loss, cfg, r);
  return r;
}

/// Tune θ and every expert jointly on the marginal likelihood, then
/// α-average the tuned experts using held-out per-expert losses.
inline TransferResult transfer_post_avg(const ParameterSet& params, const std::vector<Example>& k_examples,
                                        const Vocab& vocab, std::size_t stride, const TransferConfig& cfg) {
  cfg.validate();
  if (k_examples.size() != cfg.k) throw ConfigError("transfer: expected exactly K examples");
  const auto [tr, va] = split_half(k_examples);
  const QADataset train = prepare("transfer-train", tr, vocab, params.config.max_positions, stride);
  const QADataset val = prepare("transfer-val", va, vocab, params.config.max_positions, stride);
  TransferResult r;
  r.train_size = tr.size();
  r.val_size = va.size();
  r.expert_ids = params.expert_ids();
  auto item_loss = [&](Graph& g, const ParameterSet& p, const Chunk& c) {
    BackboneVars b = bind_backbone(g, p.config, p.backbone, !cfg.freeze_backbone);
    std::vector<Var> losses;
    for (const auto& id : r.expert_ids) {
      ExpertVars e = bind_expert(g, p, id, true);
      losses.push_back(chunk_loss(expert_log_probs(p.config, b, e, c), c));
    }
    return marginal_nll(losses);
  };
  auto val_loss = [&](const ParameterSet& p) { return mean_marginal_nll(p, val); };
  const ParameterSet tuned = detail::few_shot_tune(params, train, item_loss, val_loss, cfg, r);
  for (const auto& id : r.expert_ids) r.probe_losses.push_back(mean_chunk_loss(tuned, id, val));
  r.alpha = mixture_weights(r.probe_losses);
  r.params = collapse(tuned, r.alpha, kTargetExpert);
  return r;
}

inline nlohmann::json to_json(const TransferResult& r) {
  nlohmann::json j;
  j["experts"] = r.expert_ids;
  j["alpha"] = r.alpha;
  j["probe_losses"] = r.probe_losses;
  j["steps_run"] = r.steps_run;
  j["best_step"] = r.best_step;
  j["train_size"] = r.train_size;
  j["val_size"] = r.val_size;
  j["history"] = nlohmann::json::array();
  for (const auto& h : r.history)
    j["history"].push_back({{"epoch", h.epoch}, {"step", h.step}, {"train_loss", h.train_loss}, {"val_loss", h.val_loss}});
  return j;
}

}  // namespace made
