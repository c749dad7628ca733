#pragma once

// Adapter-equipped transformer encoder with per-dataset span heads.
//
// Post-norm blocks. Each layer has two adapter slots, one on the attention
// sublayer output and one on the FFN sublayer output, applied before the
// residual add and layer norm:
//
//   h = Attn(x);  h = h + Up(gelu(Down(h)));  x = LN1(x + h)
//   f = FFN(x);   f = f + Up(gelu(Down(f)));  x = LN2(x + f)
//
// The key projection carries no bias: a bias on keys shifts every score in a
// softmax row by the same amount, so it never affects the output.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "made/autodiff.hpp"
#include "made/error.hpp"
#include "made/random.hpp"
#include "made/tensor.hpp"

namespace made {

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t d_model = 64;
  std::size_t num_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 200;
  std::size_t max_positions = 64;
  std::size_t adapter_bottleneck = 8;
  double layer_norm_eps = 1e-5;

  void validate() const {
    if (num_layers == 0) throw ConfigError("num_layers must be >= 1");
    if (d_model == 0 || num_heads == 0 || d_model % num_heads != 0) {
      throw ConfigError("d_model (" + std::to_string(d_model) + ") must be a positive multiple of num_heads (" +
                        std::to_string(num_heads) + ")");
    }
    if (d_ff == 0) throw ConfigError("d_ff must be >= 1");
    if (vocab_size < 4) throw ConfigError("vocab_size must cover the 4 reserved tokens");
    if (max_positions < 4) throw ConfigError("max_positions must be >= 4");
    if (adapter_bottleneck == 0) throw ConfigError("adapter_bottleneck must be >= 1");
    if (!(layer_norm_eps > 0.0)) throw ConfigError("layer_norm_eps must be positive");
  }

  std::size_t head_dim() const { return d_model / num_heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class InitKind { normal, zeros, ones };

struct TensorSpec {
  std::string name;
  Shape shape;
  InitKind init;
};

inline std::string layer_prefix(std::size_t layer) { return "layer" + std::to_string(layer) + "."; }

inline std::vector<TensorSpec> backbone_layout(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  std::vector<TensorSpec> out = {
      {"tok_emb.weight", {c.vocab_size, d}, InitKind::normal},
      {"pos_emb.weight", {c.max_positions, d}, InitKind::normal},
      {"emb_ln.gain", {d}, InitKind::ones},
      {"emb_ln.bias", {d}, InitKind::zeros},
  };
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const std::string p = layer_prefix(l);
    const std::vector<TensorSpec> layer = {
        {p + "attn.q.weight", {d, d}, InitKind::normal},
        {p + "attn.q.bias", {d}, InitKind::zeros},
        {p + "attn.k.weight", {d, d}, InitKind::normal},
        {p + "attn.v.weight", {d, d}, InitKind::normal},
        {p + "attn.v.bias", {d}, InitKind::zeros},
        {p + "attn.o.weight", {d, d}, InitKind::normal},
        {p + "attn.o.bias", {d}, InitKind::zeros},
        {p + "ln1.gain", {d}, InitKind::ones},
        {p + "ln1.bias", {d}, InitKind::zeros},
        {p + "ffn.in.weight", {d, c.d_ff}, InitKind::normal},
        {p + "ffn.in.bias", {c.d_ff}, InitKind::zeros},
        {p + "ffn.out.weight", {c.d_ff, d}, InitKind::normal},
        {p + "ffn.out.bias", {d}, InitKind::zeros},
        {p + "ln2.gain", {d}, InitKind::ones},
        {p + "ln2.bias", {d}, InitKind::zeros},
    };
    out.insert(out.end(), layer.begin(), layer.end());
  }
  return out;
}

inline constexpr const char* kAdapterSlots[2] = {"attn", "ffn"};

inline std::vector<TensorSpec> adapter_layout(const ModelConfig& c) {
  const std::size_t d = c.d_model, m = c.adapter_bottleneck;
  std::vector<TensorSpec> out;
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    for (const char* slot : kAdapterSlots) {
      const std::string p = layer_prefix(l) + slot + ".";
      out.push_back({p + "down.weight", {d, m}, InitKind::normal});
      out.push_back({p + "down.bias", {m}, InitKind::zeros});
      out.push_back({p + "up.weight", {m, d}, InitKind::zeros});
      out.push_back({p + "up.bias", {d}, InitKind::zeros});
    }
  }
  return out;
}

inline std::vector<TensorSpec> head_layout(const ModelConfig& c) {
  return {{"span.weight", {c.d_model, 2}, InitKind::normal}, {"span.bias", {2}, InitKind::zeros}};
}

inline std::size_t count_params(const std::vector<TensorSpec>& layout) {
  std::size_t n = 0;
  for (const auto& t : layout) n += numel(t.shape);
  return n;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Deterministic seed for a named component.
inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& name) {
  return detail::splitmix64(seed ^ detail::splitmix64(detail::fnv1a(name)));
}

inline constexpr double kInitStd = 0.02;

/// Normal(0, std) truncated at ±2·std by rejection.
inline double truncated_normal(Rng& rng, double stddev) {
  for (;;) {
    const double z = rng.normal();
    if (std::abs(z) <= 2.0) return z * stddev;
  }
}

inline ParamMap init_tensors(const std::vector<TensorSpec>& layout, std::uint64_t seed, double stddev = kInitStd) {
  Rng rng(seed);
  ParamMap out;
  for (const auto& spec : layout) {
    Tensor t(spec.shape);
    switch (spec.init) {
      case InitKind::normal:
        for (double& v : t.data()) v = truncated_normal(rng, stddev);
        break;
      case InitKind::ones:
        for (double& v : t.data()) v = 1.0;
        break;
      case InitKind::zeros:
        break;
    }
    out.emplace(spec.name, std::move(t));
  }
  return out;
}

/// Shared encoder parameters θ.
struct Backbone {
  ParamMap tensors;
  const Tensor& at(const std::string& name) const { return tensors.at(name); }
  friend bool operator==(const Backbone&, const Backbone&) = default;
};

/// Per-dataset bottleneck adapters φ_i.
struct Adapter {
  ParamMap tensors;
  const Tensor& at(const std::string& name) const { return tensors.at(name); }
  friend bool operator==(const Adapter&, const Adapter&) = default;
};

/// Per-dataset start/end classifier ψ_i.
struct SpanHead {
  ParamMap tensors;
  const Tensor& at(const std::string& name) const { return tensors.at(name); }
  friend bool operator==(const SpanHead&, const SpanHead&) = default;
};

inline const std::string kBackbonePrefix = "backbone/";
inline std::string adapter_prefix(const std::string& id) { return "adapter/" + id + "/"; }
inline std::string head_prefix(const std::string& id) { return "head/" + id + "/"; }

/// θ, {φ_i}, {ψ_i}. Experts are keyed by dataset id and iterated in
/// lexicographic order everywhere.
struct ParameterSet {
  ModelConfig config;
  Backbone backbone;
  std::map<std::string, Adapter> adapters;
  std::map<std::string, SpanHead> heads;
  /// Plain fine-tuning models keep (identity) adapters but never run them.
  bool adapters_enabled = true;

  std::vector<std::string> expert_ids() const {
    std::vector<std::string> ids;
    for (const auto& [id, _] : heads) ids.push_back(id);
    return ids;
  }

  bool has_expert(const std::string& id) const { return heads.count(id) != 0; }

  void require_expert(const std::string& id) const {
    if (!heads.count(id) || !adapters.count(id)) throw UnknownExpertError("unknown dataset id '" + id + "'");
  }

  void validate() const {
    config.validate();
    if (adapters.size() != heads.size()) throw ConfigError("adapter and head key sets differ");
    for (const auto& [id, _] : heads) {
      if (!adapters.count(id)) throw ConfigError("head '" + id + "' has no adapter");
      if (id.empty() || id.find('/') != std::string::npos) throw ConfigError("invalid dataset id '" + id + "'");
    }
    auto check = [](const ParamMap& m, const std::vector<TensorSpec>& layout, const std::string& what) {
      if (m.size() != layout.size()) throw ConfigError(what + ": wrong tensor count");
      for (const auto& spec : layout) {
        auto it = m.find(spec.name);
        if (it == m.end()) throw ConfigError(what + ": missing " + spec.name);
        if (it->second.shape() != spec.shape) {
          throw ConfigError(what + ": " + spec.name + " has shape " + shape_str(it->second.shape()) +
                            ", expected " + shape_str(spec.shape));
        }
      }
    };
    check(backbone.tensors, backbone_layout(config), "backbone");
    for (const auto& [id, a] : adapters) check(a.tensors, adapter_layout(config), "adapter " + id);
    for (const auto& [id, h] : heads) check(h.tensors, head_layout(config), "head " + id);
  }

  /// Visits every tensor with its full path, in a fixed order.
  template <typename F>
  void for_each(F&& fn) const {
    for (const auto& [name, t] : backbone.tensors) fn(kBackbonePrefix + name, t);
    for (const auto& [id, a] : adapters)
      for (const auto& [name, t] : a.tensors) fn(adapter_prefix(id) + name, t);
    for (const auto& [id, h] : heads)
      for (const auto& [name, t] : h.tensors) fn(head_prefix(id) + name, t);
  }

  template <typename F>
  void for_each_mut(F&& fn) {
    for (auto& [name, t] : backbone.tensors) fn(kBackbonePrefix + name, t);
    for (auto& [id, a] : adapters)
      for (auto& [name, t] : a.tensors) fn(adapter_prefix(id) + name, t);
    for (auto& [id, h] : heads)
      for (auto& [name, t] : h.tensors) fn(head_prefix(id) + name, t);
  }

  Tensor* find(const std::string& path) {
    auto lookup = [](ParamMap& m, const std::string& name) -> Tensor* {
      auto it = m.find(name);
      return it == m.end() ? nullptr : &it->second;
    };
    if (path.rfind(kBackbonePrefix, 0) == 0) return lookup(backbone.tensors, path.substr(kBackbonePrefix.size()));
    const auto slash1 = path.find('/');
    const auto slash2 = slash1 == std::string::npos ? slash1 : path.find('/', slash1 + 1);
    if (slash2 == std::string::npos) return nullptr;
    const std::string kind = path.substr(0, slash1);
    const std::string id = path.substr(slash1 + 1, slash2 - slash1 - 1);
    const std::string name = path.substr(slash2 + 1);
    if (kind == "adapter") {
      auto it = adapters.find(id);
      return it == adapters.end() ? nullptr : lookup(it->second.tensors, name);
    }
    if (kind == "head") {
      auto it = heads.find(id);
      return it == heads.end() ? nullptr : lookup(it->second.tensors, name);
    }
    return nullptr;
  }

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;
};

inline Backbone init_backbone(const ModelConfig& config, std::uint64_t seed) {
  return Backbone{init_tensors(backbone_layout(config), derive_seed(seed, "backbone"))};
}

inline Adapter init_adapter(const ModelConfig& config, std::uint64_t seed, const std::string& id) {
  return Adapter{init_tensors(adapter_layout(config), derive_seed(seed, "adapter:" + id))};
}

inline SpanHead init_head(const ModelConfig& config, std::uint64_t seed, const std::string& id) {
  return SpanHead{init_tensors(head_layout(config), derive_seed(seed, "head:" + id))};
}

/// Fresh parameters: truncated-normal weights, unit/zero layer norms, zero
/// adapter up-projections (identity adapters), one expert per id.
inline ParameterSet init_model(const ModelConfig& config, std::uint64_t seed,
                               const std::vector<std::string>& expert_ids) {
  config.validate();
  ParameterSet p;
  p.config = config;
  p.backbone = init_backbone(config, seed);
  for (const auto& id : expert_ids) {
    p.adapters.emplace(id, init_adapter(config, seed, id));
    p.heads.emplace(id, init_head(config, seed, id));
  }
  p.validate();
  return p;
}

struct ParamStats {
  std::size_t backbone_count = 0;
  std::size_t per_adapter_count = 0;
  std::size_t per_head_count = 0;
  double overhead_ratio = 0.0;
};

/// Counts from the layout alone; nothing is allocated.
inline ParamStats param_stats(const ModelConfig& config) {
  config.validate();
  ParamStats s;
  s.backbone_count = count_params(backbone_layout(config));
  s.per_adapter_count = count_params(adapter_layout(config));
  s.per_head_count = count_params(head_layout(config));
  s.overhead_ratio = static_cast<double>(s.per_adapter_count) / static_cast<double>(s.backbone_count);
  return s;
}

// ---------------------------------------------------------------------------
// Graph bindings and forward pass.

struct LayerVars {
  Var q_w, q_b, k_w, v_w, v_b, o_w, o_b;
  Var ln1_g, ln1_b;
  Var ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;
  Var ln2_g, ln2_b;
};

struct BackboneVars {
  Var tok_emb, pos_emb, emb_ln_g, emb_ln_b;
  std::vector<LayerVars> layers;
};

struct AdapterSlotVars {
  Var down_w, down_b, up_w, up_b;
};

struct AdapterVars {
  std::vector<AdapterSlotVars> attn, ffn;
};

struct HeadVars {
  Var weight, bias;
};

/// Leaf lookup by tensor name within one component.
using LeafFn = std::function<Var(const std::string& name)>;

inline BackboneVars bind_backbone(const ModelConfig& c, const LeafFn& bind) {
  BackboneVars v;
  v.tok_emb = bind("tok_emb.weight");
  v.pos_emb = bind("pos_emb.weight");
  v.emb_ln_g = bind("emb_ln.gain");
  v.emb_ln_b = bind("emb_ln.bias");
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const std::string p = layer_prefix(l);
    LayerVars lv;
    lv.q_w = bind(p + "attn.q.weight");
    lv.q_b = bind(p + "attn.q.bias");
    lv.k_w = bind(p + "attn.k.weight");
    lv.v_w = bind(p + "attn.v.weight");
    lv.v_b = bind(p + "attn.v.bias");
    lv.o_w = bind(p + "attn.o.weight");
    lv.o_b = bind(p + "attn.o.bias");
    lv.ln1_g = bind(p + "ln1.gain");
    lv.ln1_b = bind(p + "ln1.bias");
    lv.ffn_in_w = bind(p + "ffn.in.weight");
    lv.ffn_in_b = bind(p + "ffn.in.bias");
    lv.ffn_out_w = bind(p + "ffn.out.weight");
    lv.ffn_out_b = bind(p + "ffn.out.bias");
    lv.ln2_g = bind(p + "ln2.gain");
    lv.ln2_b = bind(p + "ln2.bias");
    v.layers.push_back(lv);
  }
  return v;
}

inline BackboneVars bind_backbone(Graph& g, const ModelConfig& c, const Backbone& b, bool trainable) {
  return bind_backbone(c, [&](const std::string& name) { return g.parameter(kBackbonePrefix + name, b.at(name), trainable); });
}

inline AdapterVars bind_adapter(const ModelConfig& c, const LeafFn& bind) {
  AdapterVars v;
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    for (int s = 0; s < 2; ++s) {
      const std::string p = layer_prefix(l) + kAdapterSlots[s] + ".";
      AdapterSlotVars slot{bind(p + "down.weight"), bind(p + "down.bias"), bind(p + "up.weight"), bind(p + "up.bias")};
      (s == 0 ? v.attn : v.ffn).push_back(slot);
    }
  }
  return v;
}

/// `path_id` names the leaves (adapter/<path_id>/...); it need not be a key
/// of any ParameterSet, so detached adapters bind the same way.
inline AdapterVars bind_adapter(Graph& g, const ModelConfig& c, const Adapter& a, const std::string& path_id,
                                bool trainable) {
  const std::string prefix = adapter_prefix(path_id);
  return bind_adapter(c, [&](const std::string& name) { return g.parameter(prefix + name, a.at(name), trainable); });
}

inline HeadVars bind_head(const LeafFn& bind) { return {bind("span.weight"), bind("span.bias")}; }

inline HeadVars bind_head(Graph& g, const SpanHead& h, const std::string& path_id, bool trainable) {
  const std::string prefix = head_prefix(path_id);
  return bind_head([&](const std::string& name) { return g.parameter(prefix + name, h.at(name), trainable); });
}

/// h + Up(gelu(Down(h))).
inline Var apply_adapter(const Var& h, const AdapterSlotVars& a) {
  Var z = gelu(add(matmul(h, a.down_w), a.down_b));
  return add(h, add(matmul(z, a.up_w), a.up_b));
}

inline Var self_attention(const ModelConfig& c, const LayerVars& lv, const Var& x, const std::vector<char>* key_fill) {
  Var q = add(matmul(x, lv.q_w), lv.q_b);
  Var k = matmul(x, lv.k_w);
  Var v = add(matmul(x, lv.v_w), lv.v_b);
  const std::size_t dh = c.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> heads;
  heads.reserve(c.num_heads);
  for (std::size_t h = 0; h < c.num_heads; ++h) {
    Var qh = slice_cols(q, h * dh, dh);
    Var kh = slice_cols(k, h * dh, dh);
    Var vh = slice_cols(v, h * dh, dh);
    Var scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    if (key_fill) scores = masked_fill(scores, *key_fill);
    heads.push_back(matmul(softmax(scores), vh));
  }
  return add(matmul(heads.size() == 1 ? heads.front() : concat_cols(heads), lv.o_w), lv.o_b);
}

/// Hidden states (len × d_model). `attention_mask`, when non-empty, marks
/// the positions that may be attended to (1) or ignored (0).
inline Var encode(const ModelConfig& c, const BackboneVars& b, const AdapterVars* adapter,
                  const std::vector<std::int32_t>& token_ids, const std::vector<char>& attention_mask = {}) {
  const std::size_t n = token_ids.size();
  if (n == 0) throw DimensionError("encode: empty sequence");
  if (n > c.max_positions) {
    throw DimensionError("encode: sequence of " + std::to_string(n) + " tokens exceeds max_positions " +
                         std::to_string(c.max_positions));
  }
  std::vector<char> key_fill;
  if (!attention_mask.empty()) {
    if (attention_mask.size() != n) throw DimensionError("encode: attention mask length differs from sequence");
    key_fill.resize(n);
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      key_fill[i] = attention_mask[i] ? 0 : 1;
      any = any || attention_mask[i];
    }
    if (!any) throw DimensionError("encode: attention mask excludes every position");
  }
  std::vector<std::int32_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<std::int32_t>(i);
  Var x = add(embedding(b.tok_emb, token_ids), embedding(b.pos_emb, positions));
  x = layer_norm(x, b.emb_ln_g, b.emb_ln_b, c.layer_norm_eps);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const LayerVars& lv = b.layers[l];
    Var h = self_attention(c, lv, x, key_fill.empty() ? nullptr : &key_fill);
    if (adapter) h = apply_adapter(h, adapter->attn[l]);
    x = layer_norm(add(x, h), lv.ln1_g, lv.ln1_b, c.layer_norm_eps);
    Var f = add(matmul(gelu(add(matmul(x, lv.ffn_in_w), lv.ffn_in_b)), lv.ffn_out_w), lv.ffn_out_b);
    if (adapter) f = apply_adapter(f, adapter->ffn[l]);
    x = layer_norm(add(x, f), lv.ln2_g, lv.ln2_b, c.layer_norm_eps);
  }
  return x;
}

/// Start/end log-probabilities as a (2 × len) matrix: row 0 start, row 1
/// end. Positions with eligible[i] == 0 receive zero probability, so
/// log p(i..j) = out[0,i] + out[1,j] normalizes over eligible pairs.
inline Var span_log_probs(const HeadVars& head, const Var& hidden, const std::vector<char>& eligible) {
  const std::size_t n = hidden.value().dim(0);
  if (eligible.size() != n) throw DimensionError("span_log_probs: eligibility mask length differs from sequence");
  std::vector<char> fill(n);
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    fill[i] = eligible[i] ? 0 : 1;
    any = any || eligible[i];
  }
  if (!any) throw DimensionError("span_log_probs: every position is masked");
  Var logits = transpose(add(matmul(hidden, head.weight), head.bias));
  return log_softmax(masked_fill(logits, fill), 1);
}

/// Forward-only convenience: hidden states for one expert of a ParameterSet.
inline Tensor encode(const ParameterSet& params, const std::string& dataset_id,
                     const std::vector<std::int32_t>& token_ids, const std::vector<char>& attention_mask = {}) {
  params.require_expert(dataset_id);
  Graph g;
  BackboneVars b = bind_backbone(g, params.config, params.backbone, false);
  AdapterVars a;
  if (params.adapters_enabled) a = bind_adapter(g, params.config, params.adapters.at(dataset_id), dataset_id, false);
  return encode(params.config, b, params.adapters_enabled ? &a : nullptr, token_ids, attention_mask).value();
}

}  // namespace made
