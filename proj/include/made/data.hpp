#pragma once

// Extractive-QA examples, the synthetic key-value corpus family, MRQA-style
// JSONL ingestion, sliding-window chunking and mixed-batch sampling.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "made/error.hpp"
#include "made/model.hpp"
#include "made/random.hpp"

namespace made {

using TokenList = std::vector<std::string>;

inline TokenList split_whitespace(const std::string& text) {
  TokenList out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

inline std::string join_tokens(const TokenList& tokens, std::size_t begin, std::size_t end_inclusive) {
  std::string out;
  for (std::size_t i = begin; i <= end_inclusive && i < tokens.size(); ++i) {
    if (i > begin) out += ' ';
    out += tokens[i];
  }
  return out;
}

inline std::string join_tokens(const TokenList& tokens) {
  return tokens.empty() ? std::string() : join_tokens(tokens, 0, tokens.size() - 1);
}

/// Token string <-> id bijection with PAD, CLS, SEP, UNK at ids 0..3.
class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kCls = 1;
  static constexpr std::int32_t kSep = 2;
  static constexpr std::int32_t kUnk = 3;

  Vocab() {
    for (const char* t : {"[PAD]", "[CLS]", "[SEP]", "[UNK]"}) add(t);
  }

  std::int32_t add(const std::string& token) {
    auto it = ids_.find(token);
    if (it != ids_.end()) return it->second;
    const auto id = static_cast<std::int32_t>(tokens_.size());
    tokens_.push_back(token);
    ids_.emplace(token, id);
    return id;
  }

  std::int32_t id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }

  std::vector<std::int32_t> encode(const TokenList& tokens) const {
    std::vector<std::int32_t> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

// Closed vocabulary of the synthetic task family: 4 reserved + "not" + 64
// keys + 64 values + 32 aliases + 35 fillers = 200 tokens.
namespace synthetic {

inline constexpr std::size_t kNumKeys = 64;
inline constexpr std::size_t kNumValues = 64;
inline constexpr std::size_t kNumAliases = 32;
inline constexpr std::size_t kNumFillers = 35;
inline const std::string kNegation = "not";

inline std::string key(std::size_t i) { return "k" + std::to_string(i); }
inline std::string value(std::size_t i) { return "v" + std::to_string(i); }
inline std::string alias(std::size_t i) { return "a" + std::to_string(i); }
inline std::string filler(std::size_t i) { return "f" + std::to_string(i); }

inline Vocab vocab() {
  Vocab v;
  v.add(kNegation);
  for (std::size_t i = 0; i < kNumKeys; ++i) v.add(key(i));
  for (std::size_t i = 0; i < kNumValues; ++i) v.add(value(i));
  for (std::size_t i = 0; i < kNumAliases; ++i) v.add(alias(i));
  for (std::size_t i = 0; i < kNumFillers; ++i) v.add(filler(i));
  return v;
}

}  // namespace synthetic

/// Inclusive token span [start, end].
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;
  friend bool operator==(const Span&, const Span&) = default;
  friend auto operator<=>(const Span&, const Span&) = default;
};

/// One question over one context. `spans` lists every occurrence of any gold
/// answer string in the context (distant supervision).
struct Example {
  std::string id;
  TokenList question;
  TokenList context;
  std::vector<std::string> answers;
  std::vector<Span> spans;

  friend bool operator==(const Example&, const Example&) = default;
};

/// Packed window "[CLS] question [SEP] context[offset, offset + len)".
struct Chunk {
  std::string example_id;
  std::size_t offset = 0;
  std::size_t window_length = 0;
  std::size_t question_length = 0;
  std::vector<std::int32_t> ids;
  /// Answer-eligible positions: CLS and the context window.
  std::vector<char> eligible;
  /// Occurrence spans fully inside the window, window-relative.
  std::vector<Span> spans;
  bool is_negative = true;

  std::size_t context_start() const { return question_length + 2; }
  std::size_t packed_position(std::size_t window_index) const { return window_index + context_start(); }

  friend bool operator==(const Chunk&, const Chunk&) = default;
};

/// Window starts 0, stride, 2·stride, ... with the final window clamped to end
/// at the context end. A stride longer than the window is reduced to the
/// window length so that every token is covered.
inline std::vector<std::size_t> window_offsets(std::size_t context_length, std::size_t capacity, std::size_t stride) {
  if (stride == 0) throw ConfigError("chunk stride must be >= 1");
  if (capacity == 0) throw ConfigError("chunk window capacity must be >= 1");
  stride = std::min(stride, capacity);
  std::vector<std::size_t> offsets{0};
  while (offsets.back() + capacity < context_length) {
    std::size_t next = offsets.back() + stride;
    if (next + capacity > context_length) next = context_length - capacity;
    offsets.push_back(next);
  }
  return offsets;
}

inline std::vector<Chunk> chunk(const Example& ex, const Vocab& vocab, std::size_t max_positions, std::size_t stride) {
  if (max_positions < 4 || ex.question.size() >= max_positions - 3) {
    throw DataError("example " + ex.id + ": question of " + std::to_string(ex.question.size()) +
                    " tokens leaves no room for context within " + std::to_string(max_positions) + " positions");
  }
  const std::size_t capacity = max_positions - ex.question.size() - 2;
  const std::vector<std::int32_t> qids = vocab.encode(ex.question);
  const std::vector<std::int32_t> cids = vocab.encode(ex.context);
  std::vector<Chunk> out;
  for (std::size_t off : window_offsets(ex.context.size(), capacity, stride)) {
    Chunk c;
    c.example_id = ex.id;
    c.offset = off;
    c.window_length = std::min(capacity, ex.context.size() - off);
    c.question_length = ex.question.size();
    c.ids.reserve(c.window_length + qids.size() + 2);
    c.ids.push_back(Vocab::kCls);
    c.ids.insert(c.ids.end(), qids.begin(), qids.end());
    c.ids.push_back(Vocab::kSep);
    c.ids.insert(c.ids.end(), cids.begin() + static_cast<std::ptrdiff_t>(off),
                 cids.begin() + static_cast<std::ptrdiff_t>(off + c.window_length));
    c.eligible.assign(c.ids.size(), 0);
    c.eligible[0] = 1;
    for (std::size_t i = c.context_start(); i < c.ids.size(); ++i) c.eligible[i] = 1;
    for (const Span& s : ex.spans) {
      if (s.start >= off && s.end < off + c.window_length) c.spans.push_back({s.start - off, s.end - off});
    }
    c.is_negative = c.spans.empty();
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator.

enum class PositionBias { early, uniform, late };

inline std::string to_string(PositionBias b) {
  switch (b) {
    case PositionBias::early:
      return "early";
    case PositionBias::late:
      return "late";
    default:
      return "uniform";
  }
}

inline PositionBias position_bias_from_string(const std::string& s) {
  if (s == "early") return PositionBias::early;
  if (s == "uniform") return PositionBias::uniform;
  if (s == "late") return PositionBias::late;
  throw ConfigError("unknown position bias '" + s + "'");
}

/// Parameters of one synthetic key-value dataset. A context is a shuffled
/// sequence of units: "key value" pairs, "not key value" distractors that
/// repeat the asked key with a wrong value, an optional "alias key" unit, and
/// filler tokens up to the drawn context length.
struct DatasetSpec {
  std::string name;
  /// Key/value index range [vocab_begin, vocab_end).
  std::size_t vocab_begin = 0;
  std::size_t vocab_end = synthetic::kNumKeys;
  std::size_t min_context = 8;
  std::size_t max_context = 32;
  std::size_t num_pairs = 4;
  PositionBias position_bias = PositionBias::uniform;
  double distractor_rate = 0.0;
  /// 0: the question names the key; 1: the question names an alias of it.
  std::size_t indirection_depth = 0;
  double duplicate_rate = 0.0;
  std::size_t train_size = 2000;
  std::size_t dev_size = 200;

  void validate() const {
    if (name.empty() || name.find('/') != std::string::npos) throw ConfigError("invalid dataset name '" + name + "'");
    auto rate = [&](double r, const char* what) {
      if (!(r >= 0.0 && r <= 1.0)) throw ConfigError(name + ": " + what + " must be in [0, 1]");
    };
    rate(distractor_rate, "distractor_rate");
    rate(duplicate_rate, "duplicate_rate");
    if (train_size < 1 || dev_size < 1) throw ConfigError(name + ": sizes must be >= 1");
    if (num_pairs < 1) throw ConfigError(name + ": num_pairs must be >= 1");
    if (indirection_depth > 1) throw ConfigError(name + ": indirection_depth must be 0 or 1");
    if (min_context > max_context) throw ConfigError(name + ": min_context > max_context");
    if (vocab_end > synthetic::kNumKeys || vocab_begin >= vocab_end) {
      throw ConfigError(name + ": vocab range [" + std::to_string(vocab_begin) + ", " + std::to_string(vocab_end) +
                        ") invalid");
    }
    if (vocab_end - vocab_begin < num_pairs) {
      throw ConfigError(name + ": vocab subset of " + std::to_string(vocab_end - vocab_begin) +
                        " keys is too small for " + std::to_string(num_pairs) + " pairs");
    }
  }

  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

struct DatasetCollection {
  std::vector<DatasetSpec> sources;
  std::vector<DatasetSpec> targets;

  void validate() const {
    std::set<std::string> names;
    for (const auto* list : {&sources, &targets}) {
      for (const auto& s : *list) {
        s.validate();
        if (!names.insert(s.name).second) throw ConfigError("duplicate dataset name '" + s.name + "'");
      }
    }
  }
};

namespace detail {

inline std::vector<std::size_t> sample_distinct(Rng& rng, std::size_t begin, std::size_t end, std::size_t count) {
  std::vector<std::size_t> pool;
  for (std::size_t i = begin; i < end; ++i) pool.push_back(i);
  rng.shuffle(pool.begin(), pool.end());
  pool.resize(count);
  return pool;
}

inline Example generate_one(const DatasetSpec& spec, Rng& rng, std::string id) {
  const auto keys = sample_distinct(rng, spec.vocab_begin, spec.vocab_end, spec.num_pairs);
  const auto values = sample_distinct(rng, spec.vocab_begin, spec.vocab_end, spec.num_pairs);
  const std::string gold_key = synthetic::key(keys[0]);
  const std::string gold_value = synthetic::value(values[0]);

  std::vector<TokenList> others;
  for (std::size_t i = 1; i < spec.num_pairs; ++i) {
    if (rng.uniform01() < spec.distractor_rate) {
      others.push_back({synthetic::kNegation, gold_key, synthetic::value(values[i])});
    } else {
      const bool dup = rng.uniform01() < spec.duplicate_rate;
      others.push_back({synthetic::key(keys[i]), dup ? gold_value : synthetic::value(values[i])});
    }
  }
  rng.shuffle(others.begin(), others.end());

  const std::size_t units = spec.num_pairs;
  const std::size_t third = (units + 2) / 3;
  std::size_t gold_pos = 0;
  switch (spec.position_bias) {
    case PositionBias::early:
      gold_pos = rng.uniform_index(third);
      break;
    case PositionBias::late:
      gold_pos = units - third + rng.uniform_index(third);
      break;
    case PositionBias::uniform:
      gold_pos = rng.uniform_index(units);
      break;
  }
  std::vector<TokenList> seq = others;
  seq.insert(seq.begin() + static_cast<std::ptrdiff_t>(gold_pos), TokenList{gold_key, gold_value});

  TokenList question{gold_key};
  if (spec.indirection_depth == 1) {
    const std::string a = synthetic::alias(rng.uniform_index(synthetic::kNumAliases));
    seq.insert(seq.begin() + static_cast<std::ptrdiff_t>(rng.uniform_index(seq.size() + 1)), TokenList{a, gold_key});
    question = {a};
  }

  std::size_t length = 0;
  for (const auto& u : seq) length += u.size();
  const std::size_t target = spec.min_context + rng.uniform_index(spec.max_context - spec.min_context + 1);
  // Fillers go between units, never inside one.
  std::vector<std::vector<std::string>> filler_tokens(seq.size() + 1);
  while (length < target) {
    const std::size_t slot = rng.uniform_index(seq.size() + 1);
    filler_tokens[slot].push_back(synthetic::filler(rng.uniform_index(synthetic::kNumFillers)));
    ++length;
  }

  Example ex;
  ex.id = std::move(id);
  ex.question = std::move(question);
  for (std::size_t u = 0; u <= seq.size(); ++u) {
    ex.context.insert(ex.context.end(), filler_tokens[u].begin(), filler_tokens[u].end());
    if (u < seq.size()) ex.context.insert(ex.context.end(), seq[u].begin(), seq[u].end());
  }
  ex.answers = {gold_value};
  for (std::size_t i = 0; i < ex.context.size(); ++i)
    if (ex.context[i] == gold_value) ex.spans.push_back({i, i});
  return ex;
}

}  // namespace detail

struct Corpus {
  std::vector<Example> train;
  std::vector<Example> dev;
};

/// train_size + dev_size examples; deterministic in (spec, seed).
inline Corpus generate(const DatasetSpec& spec, std::uint64_t seed) {
  spec.validate();
  Corpus c;
  Rng train_rng(derive_seed(seed, "data:" + spec.name + ":train"));
  Rng dev_rng(derive_seed(seed, "data:" + spec.name + ":dev"));
  for (std::size_t i = 0; i < spec.train_size; ++i)
    c.train.push_back(detail::generate_one(spec, train_rng, spec.name + "-train-" + std::to_string(i)));
  for (std::size_t i = 0; i < spec.dev_size; ++i)
    c.dev.push_back(detail::generate_one(spec, dev_rng, spec.name + "-dev-" + std::to_string(i)));
  return c;
}

// ---------------------------------------------------------------------------
// JSONL (MRQA layout): one context per line with a list of questions.

struct LoadResult {
  std::vector<Example> examples;
  std::size_t skipped = 0;
};

namespace detail {

struct TokenOffsets {
  TokenList tokens;
  std::vector<std::size_t> begin, end;  // char offsets, end inclusive
};

inline TokenOffsets tokenize_with_offsets(const std::string& text) {
  TokenOffsets out;
  std::size_t i = 0;
  const auto is_space = [](char ch) { return ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\f' || ch == '\v'; };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    if (i >= text.size()) break;
    const std::size_t b = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    out.tokens.push_back(text.substr(b, i - b));
    out.begin.push_back(b);
    out.end.push_back(i - 1);
  }
  return out;
}

}  // namespace detail

inline LoadResult parse_jsonl(std::istream& in, const std::string& source = "<stream>") {
  LoadResult result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(source + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    if (!record.is_object()) throw DataError(source + ":" + std::to_string(line_no) + ": expected a JSON object");
    if (record.contains("header")) continue;
    try {
      const auto ctx = detail::tokenize_with_offsets(record.at("context").get<std::string>());
      for (const auto& qa : record.at("qas")) {
        Example ex;
        ex.id = qa.at("qid").get<std::string>();
        ex.question = split_whitespace(qa.at("question").get<std::string>());
        ex.context = ctx.tokens;
        ex.answers = qa.at("answers").get<std::vector<std::string>>();
        bool mappable = qa.contains("detected_answers") && !qa.at("detected_answers").empty();
        std::set<Span> spans;
        if (mappable) {
          for (const auto& det : qa.at("detected_answers")) {
            if (det.contains("char_spans")) {
              for (const auto& cs : det.at("char_spans")) {
                const auto s = cs.at(0).get<std::size_t>(), e = cs.at(1).get<std::size_t>();
                auto b = std::find(ctx.begin.begin(), ctx.begin.end(), s);
                auto f = std::find(ctx.end.begin(), ctx.end.end(), e);
                if (b == ctx.begin.end() || f == ctx.end.end() || f - ctx.end.begin() < b - ctx.begin.begin()) {
                  mappable = false;
                  break;
                }
                spans.insert({static_cast<std::size_t>(b - ctx.begin.begin()),
                              static_cast<std::size_t>(f - ctx.end.begin())});
              }
            } else if (det.contains("token_spans")) {
              for (const auto& ts : det.at("token_spans")) {
                const auto s = ts.at(0).get<std::size_t>(), e = ts.at(1).get<std::size_t>();
                if (s > e || e >= ctx.tokens.size()) {
                  mappable = false;
                  break;
                }
                spans.insert({s, e});
              }
            } else {
              mappable = false;
            }
            if (!mappable) break;
          }
        }
        if (!mappable || ex.answers.empty()) {
          ++result.skipped;
          continue;
        }
        ex.spans.assign(spans.begin(), spans.end());
        result.examples.push_back(std::move(ex));
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return result;
}

inline LoadResult load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return parse_jsonl(in, path);
}

inline nlohmann::json example_to_json(const Example& ex) {
  const std::string context = join_tokens(ex.context);
  std::vector<std::size_t> char_begin;
  std::size_t pos = 0;
  for (const auto& t : ex.context) {
    char_begin.push_back(pos);
    pos += t.size() + 1;
  }
  std::map<std::string, std::vector<Span>> by_text;
  for (const Span& s : ex.spans) by_text[join_tokens(ex.context, s.start, s.end)].push_back(s);
  nlohmann::json detected = nlohmann::json::array();
  for (const auto& [text, spans] : by_text) {
    nlohmann::json d;
    d["text"] = text;
    d["char_spans"] = nlohmann::json::array();
    d["token_spans"] = nlohmann::json::array();
    for (const Span& s : spans) {
      d["char_spans"].push_back({char_begin[s.start], char_begin[s.end] + ex.context[s.end].size() - 1});
      d["token_spans"].push_back({s.start, s.end});
    }
    detected.push_back(d);
  }
  nlohmann::json qa;
  qa["qid"] = ex.id;
  qa["question"] = join_tokens(ex.question);
  qa["answers"] = ex.answers;
  qa["detected_answers"] = detected;
  nlohmann::json rec;
  rec["context"] = context;
  rec["qas"] = nlohmann::json::array({qa});
  return rec;
}

inline void write_jsonl(std::ostream& out, const std::vector<Example>& examples) {
  for (const auto& ex : examples) out << example_to_json(ex).dump() << '\n';
}

inline void save_jsonl(const std::string& path, const std::vector<Example>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  write_jsonl(out, examples);
  if (!out) throw DataError("failed writing " + path);
}

// ---------------------------------------------------------------------------
// Chunked datasets and sampling.

/// A named dataset with every example split into chunks.
struct QADataset {
  std::string name;
  std::vector<Example> examples;
  std::vector<std::vector<Chunk>> chunks;
  /// (example, chunk) pairs; the unit sampled during training.
  std::vector<std::pair<std::size_t, std::size_t>> units;

  std::size_t size() const { return examples.size(); }
  std::size_t size_units() const { return units.size(); }
  const Chunk& unit(std::size_t i) const { return chunks[units[i].first][units[i].second]; }
};

inline QADataset prepare(std::string name, std::vector<Example> examples, const Vocab& vocab,
                         std::size_t max_positions, std::size_t stride) {
  QADataset d;
  d.name = std::move(name);
  d.examples = std::move(examples);
  for (std::size_t e = 0; e < d.examples.size(); ++e) {
    d.chunks.push_back(chunk(d.examples[e], vocab, max_positions, stride));
    for (std::size_t c = 0; c < d.chunks.back().size(); ++c) d.units.emplace_back(e, c);
  }
  return d;
}

struct BatchItem {
  std::size_t dataset = 0;
  std::size_t index = 0;
  friend bool operator==(const BatchItem&, const BatchItem&) = default;
};

/// Each of the B slots independently picks a dataset (uniformly, or from the
/// current weights) and then an item uniformly within it.
class MixedBatchSampler {
 public:
  MixedBatchSampler(std::vector<std::size_t> dataset_sizes, std::size_t batch_size, std::uint64_t seed)
      : sizes_(std::move(dataset_sizes)), batch_(batch_size), rng_(seed) {
    if (sizes_.empty()) throw DataError("mixed batches need at least one dataset");
    if (batch_ == 0) throw ConfigError("batch size must be >= 1");
    for (std::size_t s : sizes_)
      if (s == 0) throw DataError("mixed batches: empty dataset");
  }

  /// Non-uniform dataset distribution; empty restores uniform choice.
  void set_weights(std::vector<double> weights) {
    if (!weights.empty() && weights.size() != sizes_.size()) throw ConfigError("sampling weights length mismatch");
    weights_ = std::move(weights);
  }
  const std::vector<double>& weights() const { return weights_; }

  std::vector<BatchItem> next() {
    std::vector<BatchItem> batch(batch_);
    for (auto& item : batch) {
      item.dataset = weights_.empty() ? rng_.uniform_index(sizes_.size()) : pick_weighted();
      item.index = rng_.uniform_index(sizes_[item.dataset]);
    }
    return batch;
  }

  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }

 private:
  std::size_t pick_weighted() {
    double total = 0.0;
    for (double w : weights_) total += w;
    double u = rng_.uniform01() * total;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      if (u < weights_[i]) return i;
      u -= weights_[i];
    }
    return weights_.size() - 1;
  }

  std::vector<std::size_t> sizes_;
  std::size_t batch_;
  Rng rng_;
  std::vector<double> weights_;
};

/// weight_i ∝ max(best_single_i − current_i, floor).
inline std::vector<double> dynamic_weights(const std::vector<double>& current, const std::vector<double>& best_single,
                                           double floor = 0.1) {
  if (current.size() != best_single.size()) throw ConfigError("dynamic_weights: length mismatch");
  if (current.empty()) throw ConfigError("dynamic_weights: no datasets");
  if (!(floor > 0.0)) throw ConfigError("dynamic_weights: floor must be positive");
  std::vector<double> w(current.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) total += (w[i] = std::max(best_single[i] - current[i], floor));
  for (double& x : w) x /= total;
  return w;
}

}  // namespace made
