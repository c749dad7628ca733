#pragma once

// Span losses, AdamW, and the training regimes: single-dataset, multi-dataset
// (uniform or dynamic sampling), MADE joint optimization and adapter tuning.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "made/autodiff.hpp"
#include "made/data.hpp"
#include "made/eval.hpp"
#include "made/model.hpp"

namespace made {

// ---------------------------------------------------------------------------
// Loss.

/// Negative log marginal likelihood of the chunk's labels under a (2 × n)
/// start/end log-probability matrix. Positive chunks marginalize over every
/// occurrence span; negative chunks target the CLS pair.
inline Var chunk_loss(const Var& log_probs, const Chunk& chunk) {
  const std::size_t n = log_probs.value().dim(1);
  if (!chunk.is_negative && chunk.spans.empty()) {
    throw DataError("chunk of " + chunk.example_id + " is marked positive but has no spans");
  }
  if (chunk.is_negative) {
    return scale(sum(gather(log_probs, {0, n})), -1.0);
  }
  std::vector<std::size_t> starts, ends;
  for (const Span& s : chunk.spans) {
    starts.push_back(chunk.packed_position(s.start));
    ends.push_back(n + chunk.packed_position(s.end));
  }
  Var pair_log_probs = add(gather(log_probs, starts), gather(log_probs, ends));
  return scale(logsumexp(pair_log_probs), -1.0);
}

/// Expert parameters bound into a graph.
struct ExpertVars {
  std::optional<AdapterVars> adapter;
  HeadVars head;
};

inline ExpertVars bind_expert(Graph& g, const ParameterSet& p, const std::string& id, bool trainable) {
  ExpertVars e;
  if (p.adapters_enabled) e.adapter = bind_adapter(g, p.config, p.adapters.at(id), id, trainable);
  e.head = bind_head(g, p.heads.at(id), id, trainable);
  return e;
}

inline Var expert_log_probs(const ModelConfig& c, const BackboneVars& b, const ExpertVars& e, const Chunk& chunk) {
  Var hidden = encode(c, b, e.adapter ? &*e.adapter : nullptr, chunk.ids);
  return span_log_probs(e.head, hidden, chunk.eligible);
}

/// Forward-only loss value of one expert on one chunk.
inline double chunk_loss(const ParameterSet& p, const std::string& id, const Chunk& chunk) {
  p.require_expert(id);
  Graph g;
  BackboneVars b = bind_backbone(g, p.config, p.backbone, false);
  ExpertVars e = bind_expert(g, p, id, false);
  return chunk_loss(expert_log_probs(p.config, b, e, chunk), chunk).value().item();
}

// ---------------------------------------------------------------------------
// AdamW.

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct MomentState {
  Tensor m;
  Tensor v;
  std::uint64_t t = 0;
};

/// Per-parameter moments and step counts. A parameter is only updated on
/// steps where it received a gradient.
struct OptimizerState {
  std::map<std::string, MomentState> moments;
  std::uint64_t step = 0;
};

/// Decoupled weight decay applies to weight matrices only; biases and
/// layer-norm gains are exempt.
inline bool decays(const std::string& path) {
  const std::string suffix = ".weight";
  return path.size() >= suffix.size() && path.compare(path.size() - suffix.size(), suffix.size(), suffix) == 0;
}

using LearningRateFn = std::function<double(const std::string& path)>;

template <typename Lookup>
void adamw_step(OptimizerState& state, Lookup&& find, const Gradients& grads, const LearningRateFn& lr,
                const AdamWConfig& cfg) {
  for (const auto& [path, g] : grads) {
    if (!g.all_finite()) throw NumericError("non-finite gradient for " + path);
    Tensor* p = find(path);
    if (!p) throw ConfigError("gradient for unknown parameter " + path);
    if (p->shape() != g.shape()) {
      throw DimensionError("gradient shape " + shape_str(g.shape()) + " differs from parameter " + path + " " +
                           shape_str(p->shape()));
    }
  }
  ++state.step;
  for (const auto& [path, g] : grads) {
    Tensor& w = *find(path);
    auto [it, fresh] = state.moments.try_emplace(path);
    MomentState& ms = it->second;
    if (fresh) {
      ms.m = Tensor::zeros(w.shape());
      ms.v = Tensor::zeros(w.shape());
    }
    ++ms.t;
    const double rate = lr(path);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(ms.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(ms.t));
    const double decay = decays(path) ? rate * cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      ms.m[i] = cfg.beta1 * ms.m[i] + (1.0 - cfg.beta1) * g[i];
      ms.v[i] = cfg.beta2 * ms.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = ms.m[i] / bc1;
      const double vhat = ms.v[i] / bc2;
      w[i] -= decay * w[i];
      w[i] -= rate * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

inline void adamw_step(OptimizerState& state, ParamMap& params, const Gradients& grads, const LearningRateFn& lr,
                       const AdamWConfig& cfg) {
  adamw_step(
      state,
      [&](const std::string& path) -> Tensor* {
        auto it = params.find(path);
        return it == params.end() ? nullptr : &it->second;
      },
      grads, lr, cfg);
}

inline void adamw_step(OptimizerState& state, ParameterSet& params, const Gradients& grads, const LearningRateFn& lr,
                       const AdamWConfig& cfg) {
  adamw_step(state, [&](const std::string& path) { return params.find(path); }, grads, lr, cfg);
}

// ---------------------------------------------------------------------------
// Batch gradients.

struct BatchGradient {
  Gradients grads;
  double mean_loss = 0.0;
};

/// Mean loss and gradient over `n` items, one graph per item, summed in item
/// order.
inline BatchGradient batch_gradient(std::size_t n, const std::function<Var(Graph&, std::size_t)>& item_loss) {
  BatchGradient out;
  if (n == 0) return out;
  for (std::size_t i = 0; i < n; ++i) {
    Graph g;
    Var loss = item_loss(g, i);
    out.mean_loss += loss.value().item();
    Gradients gi = g.backward(loss);
    for (auto& [path, t] : gi) {
      auto it = out.grads.find(path);
      if (it == out.grads.end()) {
        out.grads.emplace(path, std::move(t));
      } else {
        detail::add_into(it->second, t);
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  out.mean_loss *= inv;
  for (auto& [_, t] : out.grads)
    for (double& v : t.data()) v *= inv;
  return out;
}

// ---------------------------------------------------------------------------
// Training configuration and state.

enum class SamplingMode { uniform, dynamic };

struct TrainConfig {
  std::size_t batch_size = 8;
  double backbone_lr = 1e-5;
  double adapter_lr = 1e-4;
  AdamWConfig adamw;
  std::size_t checkpoint_interval = 1024;
  std::size_t patience = 10;
  double max_epochs = 3.0;
  /// Hard cap on optimization steps; 0 leaves only the epoch limit.
  std::size_t max_steps = 0;
  std::uint64_t seed = 0;
  SamplingMode sampling = SamplingMode::uniform;
  std::size_t train_cap = 75000;
  std::size_t dev_cap = 1000;
  std::size_t max_answer_length = kDefaultMaxAnswerLength;
  /// Best single-dataset EM+F1 per training dataset, for dynamic sampling.
  std::vector<double> best_single;
  double dynamic_floor = 0.1;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(backbone_lr > 0.0) || !(adapter_lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (patience == 0) throw ConfigError("patience must be >= 1");
    if (checkpoint_interval == 0) throw ConfigError("checkpoint_interval must be >= 1");
    if (!(max_epochs > 0.0)) throw ConfigError("max_epochs must be positive");
  }
};

struct MetricsRow {
  std::uint64_t step = 0;
  std::string dataset;
  double em = 0.0;
  double f1 = 0.0;
  double loss = 0.0;
  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

struct DevScore {
  double em = 0.0;
  double f1 = 0.0;
};

/// Everything needed to continue a run exactly where it stopped.
struct TrainState {
  ParameterSet params;
  OptimizerState optimizer;
  std::uint64_t step = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  std::uint64_t best_step = 0;
  std::size_t since_improvement = 0;
  std::size_t checkpoints = 0;
  ParameterSet best;
  std::vector<MetricsRow> history;
  std::string sampler_state;
  std::vector<double> sampling_weights;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  bool finished = false;
};

/// Which expert each training dataset routes through, and whether θ trains.
struct TrainPlan {
  std::vector<std::string> routes;
  bool train_backbone = true;
};

using DevEvaluator = std::function<std::vector<DevScore>(const ParameterSet&)>;

inline LearningRateFn group_learning_rates(const TrainConfig& cfg) {
  const double backbone = cfg.backbone_lr, expert = cfg.adapter_lr;
  return [backbone, expert](const std::string& path) {
    return path.rfind(kBackbonePrefix, 0) == 0 ? backbone : expert;
  };
}

inline DevEvaluator default_dev_evaluator(const TrainPlan& plan, std::vector<const QADataset*> dev,
                                          std::size_t max_answer_length) {
  return [routes = plan.routes, dev = std::move(dev), max_answer_length](const ParameterSet& p) {
    std::vector<DevScore> out;
    for (std::size_t d = 0; d < dev.size(); ++d) {
      const ScoreReport r = evaluate(ExpertScorer(p, routes[d]), *dev[d], max_answer_length);
      out.push_back({r.em, r.f1});
    }
    return out;
  };
}

/// Step-driven training loop with periodic validation, best-checkpoint
/// selection and patience-based early stopping. The initial parameters are
/// evaluated as checkpoint 0, so the selected model is never worse on dev
/// than the starting point.
class Trainer {
 public:
  Trainer(TrainState state, TrainPlan plan, std::vector<const QADataset*> train, std::vector<const QADataset*> dev,
          TrainConfig cfg, DevEvaluator evaluator = {})
      : state_(std::move(state)),
        plan_(std::move(plan)),
        train_(std::move(train)),
        dev_(std::move(dev)),
        cfg_(std::move(cfg)),
        evaluator_(std::move(evaluator)),
        sampler_(dataset_sizes(train_), cfg_.batch_size, derive_seed(cfg_.seed, "sampler")) {
    cfg_.validate();
    if (train_.empty()) throw DataError("training needs at least one dataset");
    if (plan_.routes.size() != train_.size()) throw ConfigError("one route per training dataset required");
    if (dev_.size() != train_.size()) throw ConfigError("one dev set per training dataset required");
    for (const auto& id : plan_.routes) state_.params.require_expert(id);
    if (cfg_.sampling == SamplingMode::dynamic && cfg_.best_single.size() != train_.size()) {
      throw ConfigError("dynamic sampling needs best single-dataset EM+F1 for every dataset");
    }
    if (!evaluator_) evaluator_ = default_dev_evaluator(plan_, dev_, cfg_.max_answer_length);
    if (!state_.sampler_state.empty()) sampler_.rng().set_state(state_.sampler_state);
    sampler_.set_weights(state_.sampling_weights);
  }

  static TrainState initial_state(ParameterSet params) {
    TrainState s;
    s.best = params;
    s.params = std::move(params);
    return s;
  }

  std::uint64_t total_steps() const {
    std::size_t examples = 0;
    for (const auto* d : train_) examples += d->size();
    const double per_epoch = static_cast<double>(examples) / static_cast<double>(cfg_.batch_size);
    auto steps = static_cast<std::uint64_t>(std::ceil(cfg_.max_epochs * per_epoch));
    steps = std::max<std::uint64_t>(steps, 1);
    if (cfg_.max_steps) steps = std::min<std::uint64_t>(steps, cfg_.max_steps);
    return steps;
  }

  /// Runs until early stopping or the step limit. `interrupt_after`, when
  /// non-zero, pauses once that many total steps have been taken.
  void run(std::uint64_t interrupt_after = 0) {
    if (state_.finished) return;
    if (state_.checkpoints == 0) validate();
    const std::uint64_t limit = total_steps();
    while (!state_.finished) {
      if (interrupt_after && state_.step >= interrupt_after) break;
      train_step();
      if (state_.step % cfg_.checkpoint_interval == 0 || state_.step >= limit) validate();
      if (state_.step >= limit) state_.finished = true;
    }
    state_.sampler_state = sampler_.rng().state();
  }

  const TrainState& state() const { return state_; }
  TrainState& state() { return state_; }
  const TrainPlan& plan() const { return plan_; }

 private:
  static std::vector<std::size_t> dataset_sizes(const std::vector<const QADataset*>& ds) {
    std::vector<std::size_t> sizes;
    for (const auto* d : ds) sizes.push_back(d->units.size());
    return sizes;
  }

  void train_step() {
    const auto batch = sampler_.next();
    const ParameterSet& p = state_.params;
    auto item_loss = [&](Graph& g, std::size_t i) {
      const BatchItem& item = batch[i];
      const std::string& id = plan_.routes[item.dataset];
      BackboneVars b = bind_backbone(g, p.config, p.backbone, plan_.train_backbone);
      ExpertVars e = bind_expert(g, p, id, true);
      const Chunk& c = train_[item.dataset]->unit(item.index);
      return chunk_loss(expert_log_probs(p.config, b, e, c), c);
    };
    BatchGradient bg = batch_gradient(batch.size(), item_loss);
    adamw_step(state_.optimizer, state_.params, bg.grads, group_learning_rates(cfg_), cfg_.adamw);
    ++state_.step;
    state_.loss_sum += bg.mean_loss;
    ++state_.loss_count;
  }

  void validate() {
    const auto scores = evaluator_(state_.params);
    if (scores.size() != train_.size()) throw ConfigError("dev evaluator returned wrong number of scores");
    const double loss = state_.loss_count ? state_.loss_sum / static_cast<double>(state_.loss_count) : 0.0;
    double mean_f1 = 0.0;
    for (std::size_t d = 0; d < scores.size(); ++d) {
      state_.history.push_back({state_.step, train_[d]->name, scores[d].em, scores[d].f1, loss});
      mean_f1 += scores[d].f1;
    }
    mean_f1 /= static_cast<double>(scores.size());
    state_.loss_sum = 0.0;
    state_.loss_count = 0;
    ++state_.checkpoints;
    if (mean_f1 > state_.best_score) {
      state_.best_score = mean_f1;
      state_.best_step = state_.step;
      state_.best = state_.params;
      state_.since_improvement = 0;
    } else if (++state_.since_improvement >= cfg_.patience) {
      state_.finished = true;
    }
    if (cfg_.sampling == SamplingMode::dynamic) {
      std::vector<double> current;
      for (const auto& s : scores) current.push_back(s.em + s.f1);
      state_.sampling_weights = dynamic_weights(current, cfg_.best_single, cfg_.dynamic_floor);
      sampler_.set_weights(state_.sampling_weights);
    }
  }

  TrainState state_;
  TrainPlan plan_;
  std::vector<const QADataset*> train_;
  std::vector<const QADataset*> dev_;
  TrainConfig cfg_;
  DevEvaluator evaluator_;
  MixedBatchSampler sampler_;
};

struct TrainResult {
  ParameterSet best;
  std::uint64_t best_step = 0;
  double best_score = 0.0;
  std::uint64_t steps = 0;
  std::vector<MetricsRow> history;
};

inline TrainResult to_result(const TrainState& s) {
  return {s.best, s.best_step, s.best_score, s.step, s.history};
}

inline std::vector<const QADataset*> pointers(const std::vector<QADataset>& ds) {
  std::vector<const QADataset*> out;
  for (const auto& d : ds) out.push_back(&d);
  return out;
}

/// Fresh parameters for plain fine-tuning: one expert, adapters disabled.
inline ParameterSet init_finetune_model(const ModelConfig& config, std::uint64_t seed, const std::string& expert_id) {
  ParameterSet p = init_model(config, seed, {expert_id});
  p.adapters_enabled = false;
  return p;
}

inline constexpr const char* kSharedExpert = "shared";

/// θ and a single shared head ψ on mixed batches from every dataset.
inline TrainResult train_multi(ParameterSet params, const std::vector<QADataset>& train, const std::vector<QADataset>& dev,
                               const TrainConfig& cfg, DevEvaluator evaluator = {}) {
  if (params.heads.size() != 1) throw ConfigError("multi-dataset fine-tuning expects exactly one shared head");
  if (params.adapters_enabled) throw ConfigError("multi-dataset fine-tuning runs with adapters disabled");
  TrainPlan plan{std::vector<std::string>(train.size(), params.expert_ids().front()), true};
  Trainer t(Trainer::initial_state(std::move(params)), plan, pointers(train), pointers(dev), cfg, std::move(evaluator));
  t.run();
  return to_result(t.state());
}

/// Plain fine-tuning on exactly one dataset.
inline TrainResult train_single(ParameterSet params, const QADataset& train, const QADataset& dev, const TrainConfig& cfg,
                                DevEvaluator evaluator = {}) {
  return train_multi(std::move(params), {train}, {dev}, cfg, std::move(evaluator));
}

/// MADE joint phase: each item routes through its own dataset's (φ_i, ψ_i);
/// θ trains on every item.
inline TrainResult train_made_joint(ParameterSet params, const std::vector<QADataset>& train,
                                    const std::vector<QADataset>& dev, const TrainConfig& cfg,
                                    DevEvaluator evaluator = {}) {
  TrainPlan plan;
  for (const auto& d : train) {
    if (!params.has_expert(d.name)) throw UnknownExpertError("dataset '" + d.name + "' has no adapter entry");
    plan.routes.push_back(d.name);
  }
  plan.train_backbone = true;
  params.adapters_enabled = true;
  Trainer t(Trainer::initial_state(std::move(params)), plan, pointers(train), pointers(dev), cfg, std::move(evaluator));
  t.run();
  return to_result(t.state());
}

/// MADE second phase: θ frozen, only (φ_i, ψ_i) of `dataset_id` trains.
inline TrainResult adapter_tune(ParameterSet params, const std::string& dataset_id, const QADataset& train,
                                const QADataset& dev, const TrainConfig& cfg, DevEvaluator evaluator = {}) {
  params.require_expert(dataset_id);
  if (!params.adapters_enabled) throw ConfigError("adapter tuning needs adapters enabled");
  TrainPlan plan{{dataset_id}, false};
  std::vector<const QADataset*> tr{&train}, dv{&dev};
  Trainer t(Trainer::initial_state(std::move(params)), plan, tr, dv, cfg, std::move(evaluator));
  t.run();
  return to_result(t.state());
}

}  // namespace made
