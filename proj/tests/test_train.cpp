#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "support.hpp"

using namespace made;
using namespace made::testing;

namespace {

Chunk chunk_with(std::size_t window, std::vector<Span> spans) {
  Chunk c;
  c.example_id = "c";
  c.question_length = 1;
  c.window_length = window;
  c.ids.assign(window + 3, 5);
  c.ids[0] = Vocab::kCls;
  c.ids[2] = Vocab::kSep;
  c.eligible.assign(c.ids.size(), 0);
  c.eligible[0] = 1;
  for (std::size_t i = c.context_start(); i < c.ids.size(); ++i) c.eligible[i] = 1;
  c.spans = std::move(spans);
  c.is_negative = c.spans.empty();
  return c;
}

Tensor uniform_log_probs(const Chunk& c) {
  std::size_t eligible = 0;
  for (char e : c.eligible) eligible += e != 0;
  const std::size_t n = c.ids.size();
  Tensor t({2, n});
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t i = 0; i < n; ++i)
      t[r * n + i] = c.eligible[i] ? -std::log(static_cast<double>(eligible)) : kMaskedLogit;
  return t;
}

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.num_heads = 2;
  c.d_ff = 32;
  c.max_positions = 16;
  c.adapter_bottleneck = 4;
  return c;
}

DatasetSpec easy_spec(const std::string& name, std::size_t train, std::size_t dev) {
  DatasetSpec s;
  s.name = name;
  s.vocab_end = 8;
  s.num_pairs = 1;
  s.min_context = 2;
  s.max_context = 2;
  s.train_size = train;
  s.dev_size = dev;
  return s;
}

std::pair<QADataset, QADataset> easy_data(const std::string& name, std::size_t train, std::size_t dev,
                                          std::uint64_t seed = 0) {
  const Corpus c = generate(easy_spec(name, train, dev), seed);
  const Vocab v = synthetic::vocab();
  return {prepare(name, c.train, v, 16, 8), prepare(name, c.dev, v, 16, 8)};
}

DevEvaluator constant_evaluator(std::size_t n) {
  return [n](const ParameterSet&) { return std::vector<DevScore>(n, DevScore{0.0, 0.0}); };
}

}  // namespace

TEST(ChunkLoss, SingleOccurrenceIsStartPlusEnd) {
  Rng rng(1);
  const Chunk c = chunk_with(5, {{1, 3}});
  Graph g;
  Tensor t = random_tensor(rng, {2, c.ids.size()});
  Var lp = log_softmax(g.constant(t), 1);
  const double want = -(lp.value()[c.packed_position(1)] + lp.value()[c.ids.size() + c.packed_position(3)]);
  EXPECT_NEAR(chunk_loss(lp, c).value().item(), want, 1e-12);
}

TEST(ChunkLoss, UniformTwoOccurrences) {
  const Chunk c = chunk_with(6, {{0, 0}, {4, 4}});
  const double n = 7.0;  // CLS + 6 context positions
  Graph g;
  EXPECT_NEAR(chunk_loss(g.constant(uniform_log_probs(c)), c).value().item(), -std::log(2.0 / (n * n)), 1e-12);
}

TEST(ChunkLoss, NegativeTargetsCls) {
  const Chunk c = chunk_with(4, {});
  Graph g;
  EXPECT_NEAR(chunk_loss(g.constant(uniform_log_probs(c)), c).value().item(), 2.0 * std::log(5.0), 1e-12);
}

TEST(ChunkLoss, PositiveWithoutSpansIsAContractViolation) {
  Chunk c = chunk_with(4, {});
  c.is_negative = false;
  Graph g;
  EXPECT_THROW(chunk_loss(g.constant(uniform_log_probs(c)), c), DataError);
}

TEST(ChunkLoss, MatchesEnumeratedMarginalOnToyModel) {
  const ModelConfig c = toy_config();
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    ParameterSet p = init_model(c, trial, {"a"});
    perturb(p, rng);
    const Chunk ch = random_chunk(rng, c.vocab_size, 12, trial % 5 == 0);
    Graph g;
    BackboneVars b = bind_backbone(g, c, p.backbone, false);
    ExpertVars e = bind_expert(g, p, "a", false);
    Var lp = expert_log_probs(c, b, e, ch);
    const double loss = chunk_loss(lp, ch).value().item();
    EXPECT_NEAR(loss, brute_force_chunk_nll(lp.value(), ch), 1e-9);
    EXPECT_GE(loss, 0.0);
  }
}

TEST(AdamW, ZeroGradientZeroDecayLeavesParameters) {
  ParamMap p{{"w.weight", Tensor::vector({1.0, -2.0})}};
  OptimizerState s;
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  adamw_step(s, p, {{"w.weight", Tensor::zeros({2})}}, [](const std::string&) { return 0.1; }, cfg);
  EXPECT_EQ(p.at("w.weight"), Tensor::vector({1.0, -2.0}));
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  ParamMap p{{"w.weight", Tensor::scalar(1.0)}};
  OptimizerState s;
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  adamw_step(s, p, {{"w.weight", Tensor::scalar(1.0)}}, [](const std::string&) { return 0.1; }, cfg);
  // m̂ = 1, v̂ = 1: w = 1 − 0.1·1/(1 + eps).
  EXPECT_NEAR(p.at("w.weight")[0], 0.9, 1e-8);
  EXPECT_EQ(s.step, 1u);
  EXPECT_EQ(s.moments.at("w.weight").t, 1u);
}

TEST(AdamW, DecoupledDecayOnWeightsOnly) {
  ParamMap p{{"w.weight", Tensor::scalar(2.0)}, {"w.bias", Tensor::scalar(2.0)}, {"ln.gain", Tensor::scalar(2.0)}};
  OptimizerState s;
  AdamWConfig cfg;
  cfg.weight_decay = 0.5;
  Gradients g{{"w.weight", Tensor::scalar(0.0)}, {"w.bias", Tensor::scalar(0.0)}, {"ln.gain", Tensor::scalar(0.0)}};
  adamw_step(s, p, g, [](const std::string&) { return 0.1; }, cfg);
  EXPECT_DOUBLE_EQ(p.at("w.weight")[0], 2.0 * (1.0 - 0.1 * 0.5));
  EXPECT_EQ(p.at("w.bias")[0], 2.0);
  EXPECT_EQ(p.at("ln.gain")[0], 2.0);
}

TEST(AdamW, MatchesReferenceOverSeveralSteps) {
  Rng rng(4);
  ParamMap p{{"x.weight", random_tensor(rng, {3})}};
  std::vector<double> w(p.at("x.weight").values()), m(3, 0.0), v(3, 0.0);
  OptimizerState s;
  AdamWConfig cfg;
  const double lr = 0.01;
  for (int t = 1; t <= 6; ++t) {
    Tensor g = random_tensor(rng, {3});
    adamw_step(s, p, {{"x.weight", g}}, [&](const std::string&) { return lr; }, cfg);
    for (std::size_t i = 0; i < 3; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      w[i] = w[i] * (1 - lr * 0.01) - lr * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(p.at("x.weight")[i], w[i], 1e-14);
    }
  }
}

TEST(AdamW, RejectsNonFiniteAndUnknownGradients) {
  ParamMap p{{"a.weight", Tensor::scalar(1.0)}};
  OptimizerState s;
  const LearningRateFn lr = [](const std::string&) { return 0.1; };
  try {
    adamw_step(s, p, {{"a.weight", Tensor::scalar(std::nan(""))}}, lr, {});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("a.weight"), std::string::npos);
  }
  EXPECT_EQ(p.at("a.weight")[0], 1.0);
  EXPECT_THROW(adamw_step(s, p, {{"b.weight", Tensor::scalar(1.0)}}, lr, {}), ConfigError);
  EXPECT_THROW(adamw_step(s, p, {{"a.weight", Tensor::zeros({2})}}, lr, {}), DimensionError);
}

TEST(AdamW, LearningRateGroups) {
  TrainConfig cfg;
  cfg.backbone_lr = 1e-5;
  cfg.adapter_lr = 1e-4;
  const auto lr = group_learning_rates(cfg);
  EXPECT_EQ(lr("backbone/tok_emb.weight"), 1e-5);
  EXPECT_EQ(lr("adapter/a/layer0.attn.up.weight"), 1e-4);
  EXPECT_EQ(lr("head/a/span.weight"), 1e-4);
}

TEST(BatchGradient, IsTheMeanOfItemGradients) {
  Tensor w = Tensor::vector({1.0, 2.0});
  const std::vector<double> xs = {3.0, -1.0, 0.5};
  const auto bg = batch_gradient(xs.size(), [&](Graph& g, std::size_t i) {
    Var vw = g.parameter("w", w);
    return scale(sum(mul(vw, vw)), xs[i]);
  });
  const double mean_x = (3.0 - 1.0 + 0.5) / 3.0;
  EXPECT_NEAR(bg.grads.at("w")[0], 2.0 * mean_x, 1e-15);
  EXPECT_NEAR(bg.grads.at("w")[1], 4.0 * mean_x, 1e-15);
  EXPECT_NEAR(bg.mean_loss, 5.0 * mean_x, 1e-15);
}

TEST(Training, RoutingIsolationOnASingleDatasetStep) {
  const ModelConfig c = small_config();
  const ParameterSet p = init_model(c, 0, {"d0", "d1", "d2"});
  auto [tr, dv] = easy_data("d1", 20, 4);
  TrainConfig cfg;
  cfg.max_steps = 1;
  cfg.backbone_lr = cfg.adapter_lr = 1e-2;
  Trainer t(Trainer::initial_state(p), {{"d1"}, true}, {&tr}, {&dv}, cfg, constant_evaluator(1));
  t.run();
  const ParameterSet& q = t.state().params;
  EXPECT_EQ(t.state().step, 1u);
  for (const char* other : {"d0", "d2"}) {
    EXPECT_EQ(q.adapters.at(other), p.adapters.at(other));
    EXPECT_EQ(q.heads.at(other), p.heads.at(other));
  }
  EXPECT_FALSE(q.adapters.at("d1") == p.adapters.at("d1"));
  EXPECT_FALSE(q.heads.at("d1") == p.heads.at("d1"));
  EXPECT_FALSE(q.backbone == p.backbone);
  for (const auto& [path, _] : t.state().optimizer.moments) {
    EXPECT_EQ(path.find("/d0/"), std::string::npos);
    EXPECT_EQ(path.find("/d2/"), std::string::npos);
  }
}

TEST(Training, AdapterTuneFreezesBackboneAndOtherExperts) {
  const ModelConfig c = small_config();
  const ParameterSet p = init_model(c, 1, {"d0", "d1"});
  auto [tr, dv] = easy_data("d0", 20, 4);
  TrainConfig cfg;
  cfg.max_steps = 5;
  cfg.checkpoint_interval = 5;
  cfg.adapter_lr = 1e-2;
  const auto r = adapter_tune(p, "d0", tr, dv, cfg, constant_evaluator(1));
  EXPECT_EQ(r.best.backbone, p.backbone);
  EXPECT_EQ(r.best.adapters.at("d1"), p.adapters.at("d1"));
  EXPECT_EQ(r.best.heads.at("d1"), p.heads.at("d1"));
  EXPECT_THROW(adapter_tune(p, "zz", tr, dv, cfg), UnknownExpertError);
}

TEST(Training, AdapterTuneChangesOnlyItsExpert) {
  const ModelConfig c = small_config();
  const ParameterSet p = init_model(c, 1, {"d0", "d1"});
  auto [tr, dv] = easy_data("d0", 20, 4);
  TrainConfig cfg;
  cfg.max_steps = 3;
  cfg.adapter_lr = 1e-2;
  // Every checkpoint improves, so the final parameters are selected.
  auto rising = std::make_shared<double>(0.0);
  DevEvaluator ev = [rising](const ParameterSet&) {
    *rising += 1.0;
    return std::vector<DevScore>{{*rising, *rising}};
  };
  cfg.checkpoint_interval = 1;
  const auto r = adapter_tune(p, "d0", tr, dv, cfg, ev);
  EXPECT_EQ(r.best_step, 3u);
  EXPECT_EQ(r.best.backbone, p.backbone);
  EXPECT_FALSE(r.best.adapters.at("d0") == p.adapters.at("d0"));
  EXPECT_EQ(r.best.adapters.at("d1"), p.adapters.at("d1"));
}

TEST(Training, MultiMemorizesTinyDataset) {
  const ModelConfig c = small_config();
  auto [tr, dv] = easy_data("tiny", 8, 8);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.backbone_lr = cfg.adapter_lr = 1e-2;
  cfg.max_steps = 150;
  cfg.max_epochs = 1000;
  cfg.checkpoint_interval = 150;
  auto calls = std::make_shared<int>(0);
  const DevEvaluator rising = [calls](const ParameterSet&) {
    return std::vector<DevScore>{{0.0, static_cast<double>((*calls)++)}};
  };
  const auto r = train_multi(init_finetune_model(c, 0, kSharedExpert), {tr}, {dv}, cfg, rising);
  EXPECT_EQ(r.best_step, 150u);
  double loss = 0.0;
  for (std::size_t i = 0; i < tr.size_units(); ++i) loss += chunk_loss(r.best, kSharedExpert, tr.unit(i));
  EXPECT_EQ(r.steps, 150u);
  EXPECT_LT(loss / static_cast<double>(tr.size_units()), 0.1);
}

TEST(Training, PatienceOneStopsAtSecondCheckpoint) {
  const ModelConfig c = small_config();
  auto [tr, dv] = easy_data("p", 16, 4);
  TrainConfig cfg;
  cfg.patience = 1;
  cfg.checkpoint_interval = 2;
  cfg.max_epochs = 100;
  auto score = std::make_shared<double>(10.0);
  DevEvaluator worsening = [score](const ParameterSet&) {
    *score -= 1.0;
    return std::vector<DevScore>{{*score, *score}};
  };
  const auto r = train_multi(init_finetune_model(c, 0, kSharedExpert), {tr}, {dv}, cfg, worsening);
  EXPECT_EQ(r.steps, 2u);
  EXPECT_EQ(r.history.size(), 2u);
  EXPECT_EQ(r.best_step, 0u);
}

TEST(Training, BestCheckpointDominatesFinal) {
  const ModelConfig c = small_config();
  auto [tr, dv] = easy_data("b", 40, 20);
  TrainConfig cfg;
  cfg.backbone_lr = cfg.adapter_lr = 3e-3;
  cfg.max_steps = 30;
  cfg.checkpoint_interval = 10;
  cfg.max_epochs = 100;
  const auto r = train_multi(init_finetune_model(c, 2, kSharedExpert), {tr}, {dv}, cfg);
  ASSERT_EQ(r.history.size(), 4u);
  EXPECT_GE(r.best_score, r.history.back().f1);
  double mx = 0.0;
  for (const auto& h : r.history) mx = std::max(mx, h.f1);
  EXPECT_EQ(r.best_score, mx);
}

TEST(Training, TotalStepsFollowsEpochDefinition) {
  const ModelConfig c = small_config();
  auto [a, da] = easy_data("a", 30, 2);
  auto [b, db] = easy_data("b", 50, 2);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.max_epochs = 2.0;
  Trainer t(Trainer::initial_state(init_finetune_model(c, 0, kSharedExpert)), {{kSharedExpert, kSharedExpert}, true},
            {&a, &b}, {&da, &db}, cfg, constant_evaluator(2));
  EXPECT_EQ(t.total_steps(), 20u);  // ceil(2·80/8)
  cfg.max_steps = 7;
  Trainer capped(Trainer::initial_state(init_finetune_model(c, 0, kSharedExpert)),
                 {{kSharedExpert, kSharedExpert}, true}, {&a, &b}, {&da, &db}, cfg, constant_evaluator(2));
  EXPECT_EQ(capped.total_steps(), 7u);
}

TEST(Training, IdenticalDatasetsLearnAlike) {
  const ModelConfig c = small_config();
  auto [tr, dv] = easy_data("x", 64, 40);
  QADataset tr2 = tr, dv2 = dv;
  tr2.name = dv2.name = "y";
  TrainConfig cfg;
  cfg.backbone_lr = 3e-3;
  cfg.adapter_lr = 3e-3;
  cfg.max_steps = 150;
  cfg.checkpoint_interval = 50;
  cfg.max_epochs = 1000;
  const auto r = train_made_joint(init_model(c, 0, {"x", "y"}), {tr, tr2}, {dv, dv2}, cfg);
  const auto& h = r.history;
  ASSERT_GE(h.size(), 2u);
  const auto& fx = h[h.size() - 2];
  const auto& fy = h[h.size() - 1];
  EXPECT_EQ(fx.dataset, "x");
  EXPECT_EQ(fy.dataset, "y");
  EXPECT_NEAR(fx.f1, fy.f1, 2.0);
  EXPECT_GT(fx.f1, 90.0);
}

TEST(Training, ConfigurationErrors) {
  const ModelConfig c = small_config();
  auto [tr, dv] = easy_data("e", 8, 2);
  TrainConfig cfg;
  EXPECT_THROW(train_multi(init_model(c, 0, {"a", "b"}), {tr}, {dv}, cfg), ConfigError);
  EXPECT_THROW(train_multi(init_model(c, 0, {"a"}), {tr}, {dv}, cfg), ConfigError);
  EXPECT_THROW(train_made_joint(init_model(c, 0, {"other"}), {tr}, {dv}, cfg), UnknownExpertError);
  EXPECT_THROW(train_multi(init_finetune_model(c, 0, "s"), {}, {}, cfg), DataError);
  cfg.patience = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  TrainConfig dyn;
  dyn.sampling = SamplingMode::dynamic;
  EXPECT_THROW(train_multi(init_finetune_model(c, 0, "s"), {tr}, {dv}, dyn), ConfigError);
}

TEST(Training, DynamicSamplingUpdatesWeightsAtValidation) {
  const ModelConfig c = small_config();
  auto [a, da] = easy_data("a", 16, 4);
  auto [b, db] = easy_data("b", 16, 4, 1);
  TrainConfig cfg;
  cfg.sampling = SamplingMode::dynamic;
  cfg.best_single = {150.0, 150.0};
  cfg.max_steps = 2;
  cfg.checkpoint_interval = 1;
  DevEvaluator ev = [](const ParameterSet&) { return std::vector<DevScore>{{40.0, 50.0}, {70.0, 80.0}}; };
  Trainer t(Trainer::initial_state(init_finetune_model(c, 0, kSharedExpert)), {{kSharedExpert, kSharedExpert}, true},
            {&a, &b}, {&da, &db}, cfg, ev);
  t.run();
  const auto& w = t.state().sampling_weights;
  ASSERT_EQ(w.size(), 2u);
  EXPECT_NEAR(w[0], 60.0 / 60.1, 1e-12);
  EXPECT_NEAR(w[1], 0.1 / 60.1, 1e-12);
}
