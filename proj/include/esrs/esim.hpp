#pragma once

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "esrs/checkpoint.hpp"
#include "esrs/datapipe.hpp"
#include "esrs/encoder.hpp"
#include "esrs/numcore/init.hpp"
#include "esrs/numcore/lstm.hpp"
#include "esrs/numcore/ops.hpp"

namespace esrs {

enum class EsimVariant { Full, CtxDecOff };

inline std::string to_string(EsimVariant v) { return v == EsimVariant::Full ? "full" : "ctxdec_off"; }

inline EsimVariant esim_variant_from(const std::string& s) {
  if (s == "full") return EsimVariant::Full;
  if (s == "ctxdec_off") return EsimVariant::CtxDecOff;
  throw ConfigError("unknown esim variant '" + s + "' (expected full or ctxdec_off)");
}

struct EsimConfig {
  std::size_t hidden = 300;
  std::size_t mlp_hidden = 0;  // 0: same as hidden
  std::size_t embed_dim = 300;
  EsimVariant variant = EsimVariant::Full;
  bool embeddings_trainable = true;
  double dropout = 0.0;
  SequenceOptions sequence;

  std::size_t mlp_width() const { return mlp_hidden ? mlp_hidden : hidden; }

  void validate() const {
    if (hidden == 0) throw ConfigError("esim hidden size must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0,1)");
  }
};

template <Scalar T>
struct EsimParams {
  InputEncoder<T> encoder;  // BiLSTM1, shared by context and response
  Linear<T> match;          // F: 8h -> h
  LstmCellParams<T> compose_fwd, compose_bwd;  // BiLSTM2
  Linear<T> mlp_hidden;
  Linear<T> mlp_out;
  EsimVariant variant = EsimVariant::Full;

  std::size_t hidden() const { return encoder.hidden(); }

  static EsimParams init(const EsimConfig& cfg, const std::vector<float>& table,
                         std::size_t vocab_size, Rng& rng) {
    cfg.validate();
    const std::size_t h = cfg.hidden;
    EsimParams p;
    p.variant = cfg.variant;
    p.encoder = InputEncoder<T>::init(table, vocab_size, h, cfg.embeddings_trainable, rng);
    p.match = Linear<T>::init(8 * h, h, rng);
    p.compose_fwd = LstmCellParams<T>::init(h, h, rng);
    p.compose_bwd = LstmCellParams<T>::init(h, h, rng);
    const std::size_t pooled = cfg.variant == EsimVariant::Full ? 8 * h : 4 * h;
    p.mlp_hidden = Linear<T>::init(pooled, cfg.mlp_width(), rng);
    p.mlp_out = Linear<T>::init(cfg.mlp_width(), 2, rng);
    return p;
  }

  std::vector<NamedTensor<T>> parameters() const {
    std::vector<NamedTensor<T>> out;
    encoder.append(out, "encode.");
    append_linear(out, "match", match);
    append_lstm(out, "compose.fwd", compose_fwd);
    append_lstm(out, "compose.bwd", compose_bwd);
    append_linear(out, "mlp.hidden", mlp_hidden);
    append_linear(out, "mlp.out", mlp_out);
    return out;
  }
};

/// e[b, i, j] = <c^s_i, r^s_j>.
template <Scalar T>
Tensor<T> attention_scores(const Tensor<T>& cs, const Tensor<T>& rs) {
  if (cs.rank() != 3 || rs.rank() != 3 || cs.dim(0) != rs.dim(0) || cs.dim(2) != rs.dim(2)) {
    throw DimensionError("attention_scores: " + shape_str(cs.shape()) + " vs " + shape_str(rs.shape()));
  }
  return bmm(cs, transpose(rs));
}

template <Scalar T>
struct Alignment {
  Tensor<T> alpha;  // [B x m x n], softmax over j
  Tensor<T> beta;   // [B x m x n], softmax over i
  Tensor<T> cd;     // [B x m x 2h]
  Tensor<T> rd;     // [B x n x 2h]
};

template <Scalar T>
Alignment<T> align_dual(const Tensor<T>& e, const Tensor<T>& cs, const Tensor<T>& rs,
                        const Tensor<T>& cmask, const Tensor<T>& rmask) {
  const std::size_t m = e.dim(1), n = e.dim(2);
  Alignment<T> a;
  a.alpha = masked_softmax(e, mask_middle(rmask, m), 2);
  a.beta = masked_softmax(e, mask_trailing(cmask, n), 1);
  a.cd = bmm(a.alpha, rs);
  a.rd = bmm(transpose(a.beta), cs);
  return a;
}

/// F([a; b; a - b; a * b]) with ReLU, per position.
template <Scalar T>
Tensor<T> local_match(const Tensor<T>& s, const Tensor<T>& d, const Linear<T>& f) {
  if (s.shape() != d.shape()) {
    throw DimensionError("local_match: " + shape_str(s.shape()) + " vs " + shape_str(d.shape()));
  }
  return relu(f(concat<T>({s, d, sub(s, d), mul(s, d)})));
}

template <Scalar T>
struct MatchState {
  Tensor<T> cs, rs;
  Tensor<T> e;
  Alignment<T> align;
  Tensor<T> cl, rl;  // cl undefined under ctxdec_off
  Tensor<T> cv, rv;
  Tensor<T> pooled;  // MLP input
  Tensor<T> logits;  // [B x 2]
};

/// Local matching, composition, pooling and classification from encoded
/// states. Masks are [B x m] and [B x n].
template <Scalar T>
MatchState<T> match_encoded(const EsimParams<T>& p, const Tensor<T>& cs, const Tensor<T>& rs,
                            const Tensor<T>& cmask, const Tensor<T>& rmask, double dropout_rate = 0.0,
                            Rng* rng = nullptr) {
  MatchState<T> st;
  st.cs = cs;
  st.rs = rs;
  st.e = attention_scores(cs, rs);
  st.align = align_dual(st.e, cs, rs, cmask, rmask);
  st.rl = local_match(rs, st.align.rd, p.match);
  st.rv = bilstm(p.compose_fwd, p.compose_bwd, st.rl, rmask);
  std::vector<Tensor<T>> pooled;
  if (p.variant == EsimVariant::Full) {
    st.cl = local_match(cs, st.align.cd, p.match);
    st.cv = bilstm(p.compose_fwd, p.compose_bwd, st.cl, cmask);
    pooled.push_back(masked_pool(st.cv, cmask, PoolKind::Max));
    pooled.push_back(masked_pool(st.cv, cmask, PoolKind::Mean));
  }
  pooled.push_back(masked_pool(st.rv, rmask, PoolKind::Max));
  pooled.push_back(masked_pool(st.rv, rmask, PoolKind::Mean));
  st.pooled = concat<T>(pooled);
  Tensor<T> x = st.pooled;
  if (rng && dropout_rate > 0.0) x = dropout(x, dropout_rate, *rng);
  st.logits = p.mlp_out(tanh(p.mlp_hidden(x)));
  return st;
}

template <Scalar T>
std::pair<Tensor<T>, Tensor<T>> encode_inputs(const EsimParams<T>& p, const PaddedIds& ctx,
                                              const Tensor<T>& cmask, const PaddedIds& rsp,
                                              const Tensor<T>& rmask) {
  if (ctx.rows != rsp.rows) {
    throw DimensionError("encode_inputs: " + std::to_string(ctx.rows) + " contexts vs " +
                         std::to_string(rsp.rows) + " responses");
  }
  return {p.encoder(ctx, cmask), p.encoder(rsp, rmask)};
}

template <Scalar T>
class EsimModel {
 public:
  using value_type = T;
  static constexpr const char* kKind = "esim";

  EsimModel(EsimConfig cfg, Vocabulary vocab, const std::vector<float>& table, std::uint64_t seed)
      : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    Rng rng(seed);
    params_ = EsimParams<T>::init(cfg_, table, vocab_.size(), rng);
    cfg_.embed_dim = params_.encoder.embedding.dim(1);
  }

  const EsimConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  const SequenceOptions& sequence() const { return cfg_.sequence; }
  const EsimParams<T>& params() const { return params_; }
  EsimParams<T>& params() { return params_; }
  std::vector<NamedTensor<T>> parameters() const { return params_.parameters(); }

  MatchState<T> forward_state(const Batch& b, Rng* rng = nullptr) const {
    const auto cmask = b.context.template mask_tensor<T>();
    const auto rmask = b.response.template mask_tensor<T>();
    auto [cs, rs] = encode_inputs(params_, b.context, cmask, b.response, rmask);
    return match_encoded(params_, cs, rs, cmask, rmask, cfg_.dropout, rng);
  }

  /// [B x 2] logits; `rng` enables the dropout hook when configured.
  Tensor<T> logits(const Batch& b, Rng* rng = nullptr) const { return forward_state(b, rng).logits; }

  /// Positive-class probability per candidate. The context is encoded once
  /// and tiled across each chunk of candidates.
  std::vector<double> score(const CandidateSet& set, std::size_t chunk = 64) const {
    if (set.candidates.empty()) throw ContractError("score: candidate set '" + set.id + "' is empty");
    NoGradGuard no_grad;
    const auto ctx = pad_sequences({context_tokens(set, cfg_.sequence)}, vocab_);
    const auto cmask1 = ctx.template mask_tensor<T>();
    const auto cs1 = params_.encoder(ctx, cmask1);
    std::vector<double> out;
    out.reserve(set.candidates.size());
    for (auto [begin, end] : chunk_ranges(set.candidates.size(), chunk)) {
      std::vector<Tokens> rsp;
      for (std::size_t i = begin; i < end; ++i)
        rsp.push_back(truncate(set.candidates[i], cfg_.sequence.max_response, Truncation::KeepHead));
      const auto r = pad_sequences(rsp, vocab_);
      const auto rmask = r.template mask_tensor<T>();
      const auto rs = params_.encoder(r, rmask);
      const auto st = match_encoded(params_, repeat_leading(cs1, r.rows), rs,
                                    repeat_leading(cmask1, r.rows), rmask);
      const auto p = positive_probabilities(st.logits);
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  nlohmann::json config_json() const {
    return {{"hidden", cfg_.hidden},
            {"mlp_hidden", cfg_.mlp_width()},
            {"embed_dim", cfg_.embed_dim},
            {"variant", to_string(cfg_.variant)},
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

  static EsimModel from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.model_kind != kKind)
      throw FormatError("checkpoint holds a '" + ckpt.model_kind + "' model, expected esim", 0);
    const auto& j = ckpt.config;
    EsimConfig cfg;
    Vocabulary vocab;
    try {
      cfg.hidden = j.at("hidden").get<std::size_t>();
      cfg.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
      cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
      cfg.variant = esim_variant_from(j.at("variant").get<std::string>());
      cfg.embeddings_trainable = j.at("embeddings_trainable").get<bool>();
      cfg.dropout = j.at("dropout").get<double>();
      cfg.sequence = sequence_from_json(j.at("sequence"));
      vocab = Vocabulary::from_tokens(j.at("vocab").get<std::vector<std::string>>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("esim checkpoint config: ") + e.what(), 0);
    }
    EsimModel model(cfg, vocab, std::vector<float>(vocab.size() * cfg.embed_dim, 0.0f), 0);
    restore_parameters(ckpt, model.parameters());
    return model;
  }

 private:
  EsimConfig cfg_;
  Vocabulary vocab_;
  EsimParams<T> params_;
};

}  // namespace esrs
