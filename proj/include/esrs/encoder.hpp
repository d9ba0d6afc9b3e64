#pragma once

#include <cmath>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "esrs/checkpoint.hpp"
#include "esrs/datapipe.hpp"
#include "esrs/embeddings.hpp"
#include "esrs/numcore/lstm.hpp"

namespace esrs {

/// Embedding matrix for a vocabulary: concatenated pretrained tables when
/// given, otherwise seeded U(-0.1, 0.1) rows of width `dim`. <pad> is zero.
inline std::vector<float> initial_embeddings(const Vocabulary& vocab, const EmbeddingSet* set,
                                             std::size_t dim, std::uint64_t seed) {
  if (set && !set->tables.empty()) return set->matrix_for(vocab);
  if (dim == 0) throw ConfigError("embed_dim must be positive when no embedding files are given");
  EmbeddingSet rnd;
  rnd.seed = seed;
  std::vector<float> m;
  m.reserve(vocab.size() * dim);
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    if (i == static_cast<std::size_t>(Vocabulary::kPadId)) {
      m.insert(m.end(), dim, 0.0f);
    } else {
      const auto r = rnd.random_row(vocab.token(static_cast<int>(i)), dim);
      m.insert(m.end(), r.begin(), r.end());
    }
  }
  return m;
}

template <Scalar T>
void append_lstm(std::vector<NamedTensor<T>>& out, const std::string& prefix,
                 const LstmCellParams<T>& p) {
  out.push_back({prefix + ".w_in", p.input_weights});
  out.push_back({prefix + ".w_h", p.hidden_weights});
  out.push_back({prefix + ".b", p.bias});
}

template <Scalar T>
void append_linear(std::vector<NamedTensor<T>>& out, const std::string& prefix,
                   const Linear<T>& l) {
  out.push_back({prefix + ".weight", l.weight});
  out.push_back({prefix + ".bias", l.bias});
}

/// Shared input encoding: embedding lookup, ReLU projection to d_h, BiLSTM.
template <Scalar T>
struct InputEncoder {
  Tensor<T> embedding;  // [|V| x d_e]
  Projection<T> projection;
  LstmCellParams<T> forward;
  LstmCellParams<T> backward;

  static InputEncoder init(const std::vector<float>& table, std::size_t vocab_size,
                           std::size_t hidden, bool trainable_embeddings, Rng& rng) {
    if (vocab_size == 0 || table.size() % vocab_size != 0 || table.size() == 0)
      throw DimensionError("embedding matrix does not divide into vocabulary rows");
    const std::size_t de = table.size() / vocab_size;
    InputEncoder e;
    e.embedding = Tensor<T>::from({vocab_size, de}, std::vector<T>(table.begin(), table.end()),
                                  trainable_embeddings);
    e.projection = Projection<T>::init(de, hidden, rng);
    e.forward = LstmCellParams<T>::init(hidden, hidden, rng);
    e.backward = LstmCellParams<T>::init(hidden, hidden, rng);
    return e;
  }

  std::size_t hidden() const { return forward.hidden; }

  Tensor<T> embed(const PaddedIds& ids) const {
    return gather_rows(embedding, ids.ids, {ids.rows, ids.width}, Vocabulary::kPadId);
  }

  /// [B x T] ids -> [B x T x 2h] states; padded positions are zero.
  Tensor<T> operator()(const PaddedIds& ids, const Tensor<T>& mask) const {
    return bilstm(forward, backward, project(projection, embed(ids)), mask);
  }

  void append(std::vector<NamedTensor<T>>& out, const std::string& prefix) const {
    out.push_back({prefix + "embedding", embedding});
    out.push_back({prefix + "proj.weight", projection.layer.weight});
    out.push_back({prefix + "proj.bias", projection.layer.bias});
    append_lstm(out, prefix + "lstm.fwd", forward);
    append_lstm(out, prefix + "lstm.bwd", backward);
  }
};

/// Copies every named parameter out of a checkpoint into `params`.
template <Scalar T>
void restore_parameters(const Checkpoint& ckpt, std::vector<NamedTensor<T>> params) {
  if (ckpt.params.size() != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(ckpt.params.size()) +
                          " parameters, model has " + std::to_string(params.size()),
                      0);
  }
  for (auto& p : params) load_entry(ckpt.param(p.name), p.tensor);
}

/// Broadcasts a [B x T] mask along a new trailing axis of extent k.
template <Scalar T>
Tensor<T> mask_trailing(const Tensor<T>& mask, std::size_t k) {
  std::vector<T> out(mask.size() * k);
  for (std::size_t i = 0; i < mask.size(); ++i) std::fill_n(out.data() + i * k, k, mask[i]);
  Shape s = mask.shape();
  s.push_back(k);
  return Tensor<T>::from(std::move(s), std::move(out));
}

/// Broadcasts a [B x T] mask along a new middle axis of extent k:
/// out[b, i, t] = mask[b, t].
template <Scalar T>
Tensor<T> mask_middle(const Tensor<T>& mask, std::size_t k) {
  const std::size_t batch = mask.dim(0), steps = mask.dim(1);
  std::vector<T> out(batch * k * steps);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < k; ++i)
      std::copy_n(mask.values().data() + b * steps, steps, out.data() + (b * k + i) * steps);
  return Tensor<T>::from({batch, k, steps}, std::move(out));
}

inline nlohmann::json sequence_json(const SequenceOptions& s) {
  return {{"max_context", s.max_context},
          {"max_response", s.max_response},
          {"context_truncation", s.context_truncation == Truncation::KeepTail ? "keep_tail" : "keep_head"}};
}

inline SequenceOptions sequence_from_json(const nlohmann::json& j) {
  SequenceOptions s;
  s.max_context = j.at("max_context").get<std::size_t>();
  s.max_response = j.at("max_response").get<std::size_t>();
  s.context_truncation =
      j.at("context_truncation").get<std::string>() == "keep_head" ? Truncation::KeepHead : Truncation::KeepTail;
  return s;
}

/// Truncated context tokens of a candidate set.
inline Tokens context_tokens(const CandidateSet& set, const SequenceOptions& opts) {
  return truncate(concat_context(set.context), opts.max_context, opts.context_truncation);
}

/// Splits [0, n) into consecutive chunks of at most `chunk` items.
inline std::vector<std::pair<std::size_t, std::size_t>> chunk_ranges(std::size_t n,
                                                                     std::size_t chunk) {
  if (chunk == 0) throw ContractError("chunk size must be at least 1");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t s = 0; s < n; s += chunk) out.emplace_back(s, std::min(n, s + chunk));
  return out;
}

/// Positive-class probability per row of [B x 2] logits.
template <Scalar T>
std::vector<double> positive_probabilities(const Tensor<T>& logits) {
  std::vector<double> out(logits.dim(0));
  for (std::size_t b = 0; b < out.size(); ++b) {
    const double z = static_cast<double>(logits[b * 2]) - static_cast<double>(logits[b * 2 + 1]);
    out[b] = 1.0 / (1.0 + std::exp(z));
  }
  return out;
}

}  // namespace esrs
