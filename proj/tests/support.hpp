#pragma once

// Shared fixtures and independent oracles for the unit suites and the
// acceptance binary.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "made/autodiff.hpp"
#include "made/data.hpp"
#include "made/eval.hpp"
#include "made/model.hpp"
#include "made/random.hpp"
#include "made/train.hpp"

namespace made::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

/// Tiny model used by gradient checks and oracles.
inline ModelConfig toy_config() {
  ModelConfig c;
  c.num_layers = 2;
  c.d_model = 8;
  c.num_heads = 2;
  c.d_ff = 12;
  c.vocab_size = 16;
  c.max_positions = 16;
  c.adapter_bottleneck = 3;
  return c;
}

/// Randomizes every tensor, including the zero-initialized ones, so that no
/// gradient is structurally trivial.
inline void perturb(ParameterSet& p, Rng& rng, double scale = 0.3) {
  p.for_each_mut([&](const std::string&, Tensor& t) {
    for (double& v : t.data()) v += scale * rng.normal();
  });
}

// ---------------------------------------------------------------------------
// Gradient-check cases: one per primitive op.

struct OpCase {
  std::string name;
  ParamMap params;
  LossBuilder loss;
};

/// Contracts a tensor-valued output to a scalar with fixed random weights so
/// every output element contributes a distinct gradient.
inline Var contract(Graph& g, const Var& y, Rng& rng) {
  Tensor w = random_tensor(rng, y.shape());
  Var wv = g.constant(std::move(w));
  return sum(mul(y, wv));
}

inline std::vector<OpCase> op_cases(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<OpCase> cases;
  const std::size_t n = 3 + rng.uniform_index(3), m = 2 + rng.uniform_index(3), p = 2 + rng.uniform_index(3);
  auto rt = [&](Shape s, double scale = 1.0) { return random_tensor(rng, std::move(s), scale); };
  auto contract_seed = rng.next();
  auto with_contract = [contract_seed](std::function<Var(Graph&, const std::map<std::string, Var>&)> f) {
    return [f, contract_seed](Graph& g, const std::map<std::string, Var>& v) {
      Rng r(contract_seed);
      return contract(g, f(g, v), r);
    };
  };

  cases.push_back({"matmul", {{"a", rt({n, m})}, {"b", rt({m, p})}},
                   with_contract([](Graph&, const auto& v) { return matmul(v.at("a"), v.at("b")); })});
  cases.push_back({"transpose", {{"a", rt({n, m})}},
                   with_contract([](Graph&, const auto& v) { return transpose(v.at("a")); })});
  cases.push_back({"add", {{"a", rt({n, m})}, {"b", rt({n, m})}},
                   with_contract([](Graph&, const auto& v) { return add(v.at("a"), v.at("b")); })});
  cases.push_back({"add_row_broadcast", {{"a", rt({n, m})}, {"b", rt({m})}},
                   with_contract([](Graph&, const auto& v) { return add(v.at("a"), v.at("b")); })});
  cases.push_back({"sub", {{"a", rt({n, m})}, {"b", rt({m})}},
                   with_contract([](Graph&, const auto& v) { return sub(v.at("a"), v.at("b")); })});
  cases.push_back({"mul", {{"a", rt({n, m})}, {"b", rt({n, m})}},
                   with_contract([](Graph&, const auto& v) { return mul(v.at("a"), v.at("b")); })});
  cases.push_back({"scale", {{"a", rt({n, m})}},
                   with_contract([](Graph&, const auto& v) { return scale(v.at("a"), -1.7); })});
  cases.push_back({"gelu", {{"a", rt({n, m}, 2.0)}},
                   with_contract([](Graph&, const auto& v) { return gelu(v.at("a")); })});
  {
    std::vector<std::int32_t> ids;
    for (std::size_t i = 0; i < n + 2; ++i) ids.push_back(static_cast<std::int32_t>(rng.uniform_index(5)));
    cases.push_back({"embedding", {{"table", rt({5, m})}},
                     with_contract([ids](Graph&, const auto& v) { return embedding(v.at("table"), ids); })});
  }
  {
    std::vector<char> fill(m, 0);
    fill[rng.uniform_index(m)] = 1;
    cases.push_back({"masked_fill+log_softmax", {{"a", rt({n, m})}}, with_contract([fill](Graph&, const auto& v) {
                       return log_softmax(masked_fill(v.at("a"), fill, -50.0), 1);
                     })});
  }
  cases.push_back({"sum", {{"a", rt({n, m})}}, [](Graph&, const auto& v) { return sum(v.at("a")); }});
  cases.push_back({"mean", {{"a", rt({n, m})}}, [](Graph& g, const auto& v) {
                     return mul(mean(v.at("a")), g.constant(Tensor::scalar(3.0)));
                   }});
  cases.push_back({"logsumexp", {{"a", rt({n * m})}}, [](Graph&, const auto& v) { return logsumexp(v.at("a")); }});
  cases.push_back({"log_softmax_axis0", {{"a", rt({n, m})}},
                   with_contract([](Graph&, const auto& v) { return log_softmax(v.at("a"), 0); })});
  cases.push_back({"log_softmax_axis1", {{"a", rt({n, m})}},
                   with_contract([](Graph&, const auto& v) { return log_softmax(v.at("a"), 1); })});
  cases.push_back({"softmax", {{"a", rt({n, m})}},
                   with_contract([](Graph&, const auto& v) { return softmax(v.at("a")); })});
  cases.push_back({"layer_norm", {{"x", rt({n, m + 2})}, {"gain", rt({m + 2})}, {"bias", rt({m + 2})}},
                   with_contract([](Graph&, const auto& v) {
                     return layer_norm(v.at("x"), v.at("gain"), v.at("bias"), 1e-5);
                   })});
  cases.push_back({"slice_cols+concat_cols", {{"a", rt({n, m + 2})}, {"b", rt({n, 2})}},
                   with_contract([m](Graph&, const auto& v) {
                     return concat_cols({slice_cols(v.at("a"), 1, m), v.at("b"), slice_cols(v.at("a"), 0, 1)});
                   })});
  {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < 4; ++i) idx.push_back(rng.uniform_index(n * m));
    cases.push_back({"gather", {{"a", rt({n, m})}},
                     with_contract([idx](Graph&, const auto& v) { return gather(v.at("a"), idx); })});
  }
  cases.push_back({"stack", {{"a", rt({3})}, {"b", rt({2})}}, with_contract([](Graph&, const auto& v) {
                     return stack({sum(v.at("a")), logsumexp(v.at("b")), sum(mul(v.at("a"), v.at("a")))});
                   })});
  return cases;
}

// ---------------------------------------------------------------------------
// Random chunks and brute-force oracles.

/// A packed chunk over a short random context with one to three spans of a
/// one- or two-token answer.
inline Chunk random_chunk(Rng& rng, std::size_t vocab_size, std::size_t max_context, bool negative = false) {
  Chunk c;
  c.example_id = "rand";
  c.question_length = 1 + rng.uniform_index(2);
  c.window_length = 2 + rng.uniform_index(max_context - 1);
  c.ids.push_back(Vocab::kCls);
  for (std::size_t i = 0; i < c.question_length; ++i)
    c.ids.push_back(static_cast<std::int32_t>(4 + rng.uniform_index(vocab_size - 4)));
  c.ids.push_back(Vocab::kSep);
  for (std::size_t i = 0; i < c.window_length; ++i)
    c.ids.push_back(static_cast<std::int32_t>(4 + rng.uniform_index(vocab_size - 4)));
  c.eligible.assign(c.ids.size(), 0);
  c.eligible[0] = 1;
  for (std::size_t i = c.context_start(); i < c.ids.size(); ++i) c.eligible[i] = 1;
  if (!negative) {
    const std::size_t len = 1 + rng.uniform_index(2);
    std::set<Span> spans;
    const std::size_t count = 1 + rng.uniform_index(3);
    for (std::size_t k = 0; k < count && len <= c.window_length; ++k) {
      const std::size_t s = rng.uniform_index(c.window_length - len + 1);
      spans.insert({s, s + len - 1});
    }
    c.spans.assign(spans.begin(), spans.end());
  }
  c.is_negative = c.spans.empty();
  return c;
}

/// −log Σ_{(i,j) ∈ occurrences} p(start=i)·p(end=j) by explicit enumeration in
/// probability space; negatives score the CLS pair.
inline double brute_force_chunk_nll(const Tensor& log_probs, const Chunk& c) {
  const std::size_t n = log_probs.dim(1);
  if (c.is_negative) return -(log_probs[0] + log_probs[n]);
  double mass = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      bool occ = false;
      for (const Span& s : c.spans)
        occ = occ || (c.packed_position(s.start) == i && c.packed_position(s.end) == j);
      if (occ) mass += std::exp(log_probs[i]) * std::exp(log_probs[n + j]);
    }
  }
  return -std::log(mass);
}

struct BruteDecode {
  std::size_t chunk = 0;
  Span span;
  double score = -std::numeric_limits<double>::infinity();
};

/// Exhaustive search over every chunk and every (i, j) window pair with
/// 0 ≤ j − i < max_len; strict improvement keeps the earliest maximizer.
inline BruteDecode brute_force_decode(const std::vector<Chunk>& chunks, const std::vector<SpanDistribution>& dists,
                                      std::size_t max_len) {
  BruteDecode best;
  for (std::size_t c = 0; c < chunks.size(); ++c) {
    const Chunk& ch = chunks[c];
    for (std::size_t a = 0; a < ch.window_length; ++a) {
      for (std::size_t b = a; b < ch.window_length && b - a < max_len; ++b) {
        const double s = dists[c].start[ch.packed_position(a)] + dists[c].end[ch.packed_position(b)];
        if (s > best.score) best = {c, {ch.offset + a, ch.offset + b}, s};
      }
    }
  }
  return best;
}

/// Random log-distributions over the eligible positions of a chunk.
inline SpanDistribution random_distribution(Rng& rng, const Chunk& c) {
  SpanDistribution d;
  for (auto* row : {&d.start, &d.end}) {
    std::vector<double> logits(c.ids.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < logits.size(); ++i) {
      logits[i] = c.eligible[i] ? 2.0 * rng.normal() : kMaskedLogit;
      mx = std::max(mx, logits[i]);
    }
    double z = 0.0;
    for (double l : logits) z += l > kMaskedLogit / 2 ? std::exp(l - mx) : 0.0;
    for (double l : logits) row->push_back(l > kMaskedLogit / 2 ? l - mx - std::log(z) : kMaskedLogit);
  }
  return d;
}

/// A random multi-chunk example with a window small enough to force
/// several chunks.
inline Example random_example(Rng& rng, std::size_t max_context, const std::string& id) {
  Example ex;
  ex.id = id;
  ex.question = {synthetic::key(rng.uniform_index(8))};
  const std::size_t len = 4 + rng.uniform_index(max_context - 3);
  for (std::size_t i = 0; i < len; ++i) ex.context.push_back(synthetic::value(rng.uniform_index(6)));
  ex.answers = {ex.context[rng.uniform_index(len)]};
  for (std::size_t i = 0; i < len; ++i)
    if (ex.context[i] == ex.answers[0]) ex.spans.push_back({i, i});
  return ex;
}

// ---------------------------------------------------------------------------
// Full-model loss builder for gradient checks.

/// Flattens a ParameterSet into path → tensor and back.
inline ParamMap flatten(const ParameterSet& p) {
  ParamMap out;
  p.for_each([&](const std::string& path, const Tensor& t) { out.emplace(path, t); });
  return out;
}

/// chunk_loss of one expert as a function of every θ, φ, ψ tensor.
inline LossBuilder expert_loss_builder(const ModelConfig& c, const std::string& id, const Chunk& chunk,
                                       bool with_adapter = true) {
  return [c, id, chunk, with_adapter](Graph&, const std::map<std::string, Var>& v) {
    BackboneVars b = bind_backbone(c, [&](const std::string& n) { return v.at(kBackbonePrefix + n); });
    AdapterVars a;
    if (with_adapter) a = bind_adapter(c, [&](const std::string& n) { return v.at(adapter_prefix(id) + n); });
    HeadVars h = bind_head([&](const std::string& n) { return v.at(head_prefix(id) + n); });
    Var hidden = encode(c, b, with_adapter ? &a : nullptr, chunk.ids);
    return chunk_loss(span_log_probs(h, hidden, chunk.eligible), chunk);
  };
}

/// A toy chunk built from the synthetic vocabulary restricted to the toy
/// model's table.
inline Chunk toy_chunk(Rng& rng, const ModelConfig& c, bool negative) {
  return random_chunk(rng, c.vocab_size, c.max_positions - 4, negative);
}

}  // namespace made::testing
