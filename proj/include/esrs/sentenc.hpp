#pragma once

#include <algorithm>
#include <mutex>
#include <nlohmann/json.hpp>
#include <numeric>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "esrs/checkpoint.hpp"
#include "esrs/datapipe.hpp"
#include "esrs/encoder.hpp"
#include "esrs/numcore/init.hpp"
#include "esrs/numcore/ops.hpp"

namespace esrs {

struct SentEncConfig {
  std::size_t hidden = 300;
  std::size_t heads = 1;
  std::size_t attention_dim = 0;  // 0: 2 * hidden
  std::size_t mlp_hidden = 0;     // 0: same as hidden
  std::size_t embed_dim = 300;
  bool embeddings_trainable = true;
  double dropout = 0.0;
  SequenceOptions sequence;

  std::size_t attention_width() const { return attention_dim ? attention_dim : 2 * hidden; }
  std::size_t mlp_width() const { return mlp_hidden ? mlp_hidden : hidden; }
  std::size_t sentence_dim() const { return 2 * hidden * heads; }

  void validate() const {
    if (hidden == 0) throw ConfigError("sentenc hidden size must be positive");
    if (heads == 0) throw ConfigError("sentenc needs at least one attention head");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0,1)");
  }
};

template <Scalar T>
struct SentEncParams {
  InputEncoder<T> encoder;
  Linear<T> attn1;  // W1, b1: 2h -> d_a
  Linear<T> attn2;  // W2, b2: d_a -> d_m
  Linear<T> mlp1, mlp2, mlp_out;
  std::size_t heads = 1;

  static SentEncParams init(const SentEncConfig& cfg, const std::vector<float>& table,
                            std::size_t vocab_size, Rng& rng) {
    cfg.validate();
    const std::size_t h = cfg.hidden, mh = cfg.mlp_width();
    const std::size_t in = 4 * cfg.sentence_dim();
    SentEncParams p;
    p.heads = cfg.heads;
    p.encoder = InputEncoder<T>::init(table, vocab_size, h, cfg.embeddings_trainable, rng);
    p.attn1 = Linear<T>::init(2 * h, cfg.attention_width(), rng);
    p.attn2 = Linear<T>::init(cfg.attention_width(), cfg.heads, rng);
    p.mlp1 = Linear<T>::init(in, mh, rng);
    p.mlp2 = Linear<T>::init(in + mh, mh, rng);
    p.mlp_out = Linear<T>::init(in + 2 * mh, 2, rng);
    return p;
  }

  std::size_t sentence_dim() const { return 2 * encoder.hidden() * heads; }

  std::vector<NamedTensor<T>> parameters() const {
    std::vector<NamedTensor<T>> out;
    encoder.append(out, "encode.");
    append_linear(out, "attn.1", attn1);
    append_linear(out, "attn.2", attn2);
    append_linear(out, "mlp.1", mlp1);
    append_linear(out, "mlp.2", mlp2);
    append_linear(out, "mlp.out", mlp_out);
    return out;
  }
};

template <Scalar T>
struct SentenceEncoding {
  Tensor<T> H;  // [B x T x 2h]
  Tensor<T> A;  // [B x T x d_m], each head a distribution over tokens
  Tensor<T> V;  // [B x d_m x 2h]
  Tensor<T> v;  // [B x 2h*d_m]
};

template <Scalar T>
SentenceEncoding<T> encode_sentence(const SentEncParams<T>& p, const PaddedIds& ids,
                                    const Tensor<T>& mask) {
  SentenceEncoding<T> s;
  s.H = p.encoder(ids, mask);
  const auto scores = p.attn2(relu(p.attn1(s.H)));
  s.A = masked_softmax(scores, mask_trailing(mask, p.heads), 1);
  s.V = bmm(transpose(s.A), s.H);
  s.v = reshape(s.V, {ids.rows, p.sentence_dim()});
  return s;
}

/// MLP over [v_c; v_r; |v_c - v_r|; v_c * v_r] with two ReLU layers; each
/// layer's input is concatenated onto its output. Returns [B x 2] logits.
template <Scalar T>
Tensor<T> classify_pair(const SentEncParams<T>& p, const Tensor<T>& vc, const Tensor<T>& vr,
                        double dropout_rate = 0.0, Rng* rng = nullptr) {
  if (vc.shape() != vr.shape() || vc.rank() != 2 || vc.dim(1) != p.sentence_dim()) {
    throw DimensionError("classify_pair: " + shape_str(vc.shape()) + " vs " + shape_str(vr.shape()) +
                         ", sentence dim " + std::to_string(p.sentence_dim()));
  }
  Tensor<T> x = concat<T>({vc, vr, abs(sub(vc, vr)), mul(vc, vr)});
  if (rng && dropout_rate > 0.0) x = dropout(x, dropout_rate, *rng);
  const auto in2 = concat<T>({x, relu(p.mlp1(x))});
  const auto in3 = concat<T>({in2, relu(p.mlp2(in2))});
  return p.mlp_out(in3);
}

/// Sentence vectors keyed by their token sequence. Concurrent readers,
/// exclusive writers.
class EncodingCache {
 public:
  EncodingCache() = default;
  EncodingCache(EncodingCache&& o) noexcept : map_(std::move(o.map_)) {}
  EncodingCache& operator=(EncodingCache&& o) noexcept {
    map_ = std::move(o.map_);
    return *this;
  }

  static std::string key(const Tokens& t) {
    std::string k;
    for (const auto& tok : t) {
      k += tok;
      k += '\x1f';
    }
    return k;
  }

  std::optional<std::vector<float>> get(const Tokens& t) const {
    std::shared_lock lock(mu_);
    const auto it = map_.find(key(t));
    if (it == map_.end()) return std::nullopt;
    return it->second;
  }

  void put(const Tokens& t, std::vector<float> v) {
    std::unique_lock lock(mu_);
    map_.emplace(key(t), std::move(v));
  }

  std::size_t size() const {
    std::shared_lock lock(mu_);
    return map_.size();
  }

  /// Same container as checkpoints; entries sorted by key.
  Checkpoint to_checkpoint() const {
    std::shared_lock lock(mu_);
    std::vector<const std::pair<const std::string, std::vector<float>>*> rows;
    for (const auto& kv : map_) rows.push_back(&kv);
    std::sort(rows.begin(), rows.end(), [](auto* a, auto* b) { return a->first < b->first; });
    Checkpoint c;
    c.model_kind = "encoding_cache";
    for (const auto* kv : rows) c.params.push_back({kv->first, {kv->second.size()}, kv->second});
    return c;
  }

  static EncodingCache from_checkpoint(const Checkpoint& c) {
    if (c.model_kind != "encoding_cache")
      throw FormatError("file holds '" + c.model_kind + "', expected an encoding cache", 0);
    EncodingCache cache;
    for (const auto& p : c.params) cache.map_.emplace(p.name, p.values);
    return cache;
  }

  void save(const std::string& path) const { save_checkpoint(to_checkpoint(), path); }
  static EncodingCache load(const std::string& path) { return from_checkpoint(load_checkpoint(path)); }

 private:
  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, std::vector<float>> map_;
};

struct Retrieved {
  std::size_t index = 0;
  double score = 0.0;

  bool operator==(const Retrieved&) const = default;
};

template <Scalar T>
class SentEncModel {
 public:
  using value_type = T;
  static constexpr const char* kKind = "sentenc";

  SentEncModel(SentEncConfig cfg, Vocabulary vocab, const std::vector<float>& table,
               std::uint64_t seed)
      : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    Rng rng(seed);
    params_ = SentEncParams<T>::init(cfg_, table, vocab_.size(), rng);
    cfg_.embed_dim = params_.encoder.embedding.dim(1);
  }

  const SentEncConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  const SequenceOptions& sequence() const { return cfg_.sequence; }
  const SentEncParams<T>& params() const { return params_; }
  SentEncParams<T>& params() { return params_; }
  std::vector<NamedTensor<T>> parameters() const { return params_.parameters(); }

  Tensor<T> encode(const PaddedIds& ids) const {
    return encode_sentence(params_, ids, ids.template mask_tensor<T>()).v;
  }

  Tensor<T> logits(const Batch& b, Rng* rng = nullptr) const {
    return classify_pair(params_, encode(b.context), encode(b.response), cfg_.dropout, rng);
  }

  /// Response-side vectors [N x D], truncated like training responses.
  Tensor<T> encode_responses(const std::vector<Tokens>& pool, std::size_t chunk = 256,
                             EncodingCache* cache = nullptr) const {
    NoGradGuard no_grad;
    const std::size_t dim = params_.sentence_dim();
    std::vector<T> out(pool.size() * dim);
    for (auto [begin, end] : chunk_ranges(pool.size(), chunk)) {
      std::vector<Tokens> todo;
      std::vector<std::size_t> slots;
      for (std::size_t i = begin; i < end; ++i) {
        auto toks = truncate(pool[i], cfg_.sequence.max_response, Truncation::KeepHead);
        if (cache) {
          if (auto hit = cache->get(toks); hit && hit->size() == dim) {
            std::copy(hit->begin(), hit->end(), out.begin() + static_cast<std::ptrdiff_t>(i * dim));
            continue;
          }
        }
        todo.push_back(std::move(toks));
        slots.push_back(i);
      }
      if (todo.empty()) continue;
      const auto v = encode(pad_sequences(todo, vocab_));
      for (std::size_t r = 0; r < slots.size(); ++r) {
        const auto* src = v.values().data() + r * dim;
        std::copy_n(src, dim, out.data() + slots[r] * dim);
        if (cache) cache->put(todo[r], std::vector<float>(src, src + dim));
      }
    }
    return Tensor<T>::from({pool.size(), dim}, std::move(out));
  }

  Tensor<T> encode_context(const std::vector<Utterance>& context) const {
    NoGradGuard no_grad;
    return encode(pad_sequences({truncate(concat_context(context), cfg_.sequence.max_context,
                                          cfg_.sequence.context_truncation)},
                                vocab_));
  }

  /// Positive-class probability of each encoded response against one
  /// encoded context ([1 x D]).
  std::vector<double> score_encoded(const Tensor<T>& vc, const Tensor<T>& responses,
                                    std::size_t chunk = 256) const {
    NoGradGuard no_grad;
    const std::size_t dim = params_.sentence_dim();
    std::vector<double> out;
    out.reserve(responses.dim(0));
    for (auto [begin, end] : chunk_ranges(responses.dim(0), chunk)) {
      std::vector<T> rows(responses.values().begin() + static_cast<std::ptrdiff_t>(begin * dim),
                          responses.values().begin() + static_cast<std::ptrdiff_t>(end * dim));
      const auto vr = Tensor<T>::from({end - begin, dim}, std::move(rows));
      const auto p = positive_probabilities(classify_pair(params_, repeat_leading(vc, end - begin), vr));
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  std::vector<double> score(const CandidateSet& set, std::size_t chunk = 64) const {
    if (set.candidates.empty()) throw ContractError("score: candidate set '" + set.id + "' is empty");
    return score_encoded(encode_context(set.context), encode_responses(set.candidates, chunk), chunk);
  }

  nlohmann::json config_json() const {
    return {{"hidden", cfg_.hidden},
            {"heads", cfg_.heads},
            {"attention_dim", cfg_.attention_width()},
            {"mlp_hidden", cfg_.mlp_width()},
            {"embed_dim", cfg_.embed_dim},
            {"embeddings_trainable", cfg_.embeddings_trainable},
            {"dropout", cfg_.dropout},
            {"sequence", sequence_json(cfg_.sequence)},
            {"vocab", vocab_.tokens()}};
  }

  Checkpoint to_checkpoint() const {
    Checkpoint c;
    c.model_kind = kKind;
    c.config = config_json();
    for (const auto& p : parameters()) c.params.push_back(to_entry(p));
    return c;
  }

  static SentEncModel from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.model_kind != kKind)
      throw FormatError("checkpoint holds a '" + ckpt.model_kind + "' model, expected sentenc", 0);
    const auto& j = ckpt.config;
    SentEncConfig cfg;
    Vocabulary vocab;
    try {
      cfg.hidden = j.at("hidden").get<std::size_t>();
      cfg.heads = j.at("heads").get<std::size_t>();
      cfg.attention_dim = j.at("attention_dim").get<std::size_t>();
      cfg.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
      cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
      cfg.embeddings_trainable = j.at("embeddings_trainable").get<bool>();
      cfg.dropout = j.at("dropout").get<double>();
      cfg.sequence = sequence_from_json(j.at("sequence"));
      vocab = Vocabulary::from_tokens(j.at("vocab").get<std::vector<std::string>>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("sentenc checkpoint config: ") + e.what(), 0);
    }
    SentEncModel model(cfg, vocab, std::vector<float>(vocab.size() * cfg.embed_dim, 0.0f), 0);
    restore_parameters(ckpt, model.parameters());
    return model;
  }

 private:
  SentEncConfig cfg_;
  Vocabulary vocab_;
  SentEncParams<T> params_;
};

/// Descending score, ties by ascending index; first k.
inline std::vector<Retrieved> top_k(const std::vector<double>& scores, std::size_t k) {
  if (k > scores.size()) {
    throw ContractError("top-k: k = " + std::to_string(k) + " exceeds pool of " +
                        std::to_string(scores.size()));
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<Retrieved> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back({order[i], scores[order[i]]});
  return out;
}

/// Encodes the context once and every pool sentence once (through `cache`
/// when given), scores all pairs and keeps the best k.
template <Scalar T>
std::vector<Retrieved> retrieve_topk(const SentEncModel<T>& model,
                                     const std::vector<Utterance>& context,
                                     const std::vector<Tokens>& pool, std::size_t k,
                                     std::size_t chunk = 256, EncodingCache* cache = nullptr) {
  if (pool.empty()) throw ContractError("retrieve_topk: empty pool");
  if (k > pool.size()) {
    throw ContractError("retrieve_topk: k = " + std::to_string(k) + " exceeds pool of " +
                        std::to_string(pool.size()));
  }
  const auto vc = model.encode_context(context);
  return top_k(model.score_encoded(vc, model.encode_responses(pool, chunk, cache), chunk), k);
}

}  // namespace esrs
