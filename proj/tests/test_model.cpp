#include <gtest/gtest.h>

#include "support.hpp"

using namespace made;
using namespace made::testing;

TEST(Model, DeskAdapterCountMatchesClosedForm) {
  ModelConfig c;
  const auto s = param_stats(c);
  const std::size_t L = c.num_layers, d = c.d_model, m = c.adapter_bottleneck;
  EXPECT_EQ(s.per_adapter_count, L * 2 * (2 * d * m + m + d));
  EXPECT_EQ(s.per_adapter_count, 4384u);
  EXPECT_EQ(s.per_head_count, 2 * d + 2);
}

TEST(Model, RobertaShapedOverhead) {
  ModelConfig c;
  c.vocab_size = 50265;
  c.max_positions = 514;
  c.num_layers = 12;
  c.d_model = 768;
  c.num_heads = 12;
  c.d_ff = 3072;
  c.adapter_bottleneck = 48;
  const auto s = param_stats(c);
  EXPECT_EQ(s.per_adapter_count, 12u * 2 * (2 * 768 * 48 + 48 + 768));
  EXPECT_NEAR(100.0 * s.overhead_ratio, 1.4, 0.3);
  EXPECT_GT(s.backbone_count, 120'000'000u);
  EXPECT_LT(s.backbone_count, 130'000'000u);
}

TEST(Model, ConfigValidation) {
  ModelConfig c;
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.num_layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.adapter_bottleneck = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Model, InitIsDeterministicAndSeedDependent) {
  const auto a = init_model(toy_config(), 1, {"x", "y"});
  const auto b = init_model(toy_config(), 1, {"x", "y"});
  const auto c = init_model(toy_config(), 2, {"x", "y"});
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a == c);
  EXPECT_FALSE(a.adapters.at("x") == a.adapters.at("y"));
}

TEST(Model, InitStatistics) {
  ModelConfig c;
  const auto p = init_model(c, 3, {"a"});
  const Tensor& w = p.backbone.at("tok_emb.weight");
  double m = 0.0, v = 0.0;
  for (double x : w.data()) m += x / static_cast<double>(w.size());
  for (double x : w.data()) v += (x - m) * (x - m) / static_cast<double>(w.size());
  EXPECT_NEAR(m, 0.0, 0.002);
  EXPECT_NEAR(std::sqrt(v), 0.02, 0.003);
  EXPECT_EQ(p.backbone.at("layer0.ln1.gain"), Tensor::full({c.d_model}, 1.0));
  EXPECT_EQ(p.adapters.at("a").at("layer1.ffn.up.weight"), Tensor::zeros({c.adapter_bottleneck, c.d_model}));
  EXPECT_EQ(p.backbone.tensors.count("layer0.attn.k.bias"), 0u);
}

TEST(Model, AdapterIdentityAtInit) {
  const ModelConfig c = toy_config();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ParameterSet p = init_model(c, seed, {"a"});
    const std::vector<std::int32_t> ids = {1, 5, 6, 2, 7, 8, 9};
    const Tensor with = encode(p, "a", ids);
    p.adapters_enabled = false;
    const Tensor without = encode(p, "a", ids);
    EXPECT_EQ(with, without);
  }
}

TEST(Model, TrainedAdapterChangesOutput) {
  const ModelConfig c = toy_config();
  ParameterSet p = init_model(c, 0, {"a"});
  p.adapters.at("a").tensors.at("layer0.attn.up.weight")[0] = 0.5;
  const std::vector<std::int32_t> ids = {1, 5, 6, 2, 7};
  const Tensor with = encode(p, "a", ids);
  p.adapters_enabled = false;
  EXPECT_FALSE(with == encode(p, "a", ids));
}

TEST(Model, SpanLogProbsNormalizeOverEligiblePairs) {
  Rng rng(11);
  const ModelConfig c = toy_config();
  for (int trial = 0; trial < 20; ++trial) {
    ParameterSet p = init_model(c, trial, {"a"});
    perturb(p, rng);
    const Chunk ch = toy_chunk(rng, c, false);
    Graph g;
    BackboneVars b = bind_backbone(g, c, p.backbone, false);
    AdapterVars a = bind_adapter(g, c, p.adapters.at("a"), "a", false);
    HeadVars h = bind_head(g, p.heads.at("a"), "a", false);
    const Tensor lp = span_log_probs(h, encode(c, b, &a, ch.ids), ch.eligible).value();
    const std::size_t n = ch.ids.size();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (ch.eligible[i] && ch.eligible[j]) total += std::exp(lp[i] + lp[n + j]);
    EXPECT_NEAR(total, 1.0, 1e-9);
    for (std::size_t i = 0; i < n; ++i) {
      if (!ch.eligible[i]) {
        EXPECT_EQ(std::exp(lp[i]), 0.0);
      }
    }
  }
}

TEST(Model, EncodeRejectsLongSequences) {
  const ModelConfig c = toy_config();
  const ParameterSet p = init_model(c, 0, {"a"});
  EXPECT_THROW(encode(p, "a", std::vector<std::int32_t>(c.max_positions + 1, 5)), DimensionError);
  EXPECT_THROW(encode(p, "a", {}), DimensionError);
  EXPECT_THROW(encode(p, "nope", {1, 2}), UnknownExpertError);
}

TEST(Model, AttentionMaskHidesPositions) {
  const ModelConfig c = toy_config();
  ParameterSet p = init_model(c, 0, {"a"});
  Rng rng(2);
  perturb(p, rng);
  const Tensor full = encode(p, "a", {1, 5, 6, 0, 0}, {1, 1, 1, 0, 0});
  const Tensor trimmed = encode(p, "a", {1, 5, 6});
  for (std::size_t i = 0; i < 3 * c.d_model; ++i) EXPECT_NEAR(full[i], trimmed[i], 1e-12);
  EXPECT_THROW(encode(p, "a", {1, 5}, {0, 0}), DimensionError);
}

TEST(Model, ParameterSetFindAndValidate) {
  ParameterSet p = init_model(toy_config(), 0, {"a"});
  EXPECT_NE(p.find("backbone/tok_emb.weight"), nullptr);
  EXPECT_NE(p.find("adapter/a/layer0.attn.down.weight"), nullptr);
  EXPECT_NE(p.find("head/a/span.bias"), nullptr);
  EXPECT_EQ(p.find("head/b/span.bias"), nullptr);
  EXPECT_EQ(p.find("bogus"), nullptr);
  p.heads.at("a").tensors.at("span.bias") = Tensor::zeros({3});
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(GradCheck, FullChunkLossOfToyModel) {
  const ModelConfig c = toy_config();
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(100 + seed);
    ParameterSet p = init_model(c, seed, {"a"});
    perturb(p, rng);
    const Chunk ch = toy_chunk(rng, c, seed % 2 == 1);
    const auto r = grad_check(expert_loss_builder(c, "a", ch), flatten(p));
    EXPECT_LE(r.max_rel_error, 1e-5) << r.worst_path << "[" << r.worst_index << "]";
  }
}
