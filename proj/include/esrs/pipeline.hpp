#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "esrs/datapipe.hpp"
#include "esrs/esim.hpp"
#include "esrs/parallel.hpp"
#include "esrs/rankeval.hpp"
#include "esrs/sentenc.hpp"
#include "esrs/trainer.hpp"

namespace esrs {

struct PreparedSplit {
  std::vector<Example> examples;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

/// Augments every dialogue, then draws `ratio` negatives per positive from
/// the split's own utterances. Group ids are unique across the split.
inline PreparedSplit prepare_examples(const std::vector<Dialogue>& dialogues, double ratio,
                                      std::uint64_t seed) {
  PreparedSplit out;
  std::vector<Example> positives;
  std::vector<Tokens> pool;
  for (const auto& d : dialogues) {
    auto ex = augment(d, positives.size());
    positives.insert(positives.end(), ex.begin(), ex.end());
    for (const auto& u : d.utterances) pool.push_back(u.tokens);
  }
  out.positives = positives.size();
  auto negatives = ratio > 0.0 ? sample_negatives(positives, pool, ratio, seed) : std::vector<Example>{};
  out.negatives = negatives.size();
  // Each positive followed by its negatives.
  std::size_t n = 0;
  for (const auto& p : positives) {
    out.examples.push_back(p);
    while (n < negatives.size() && negatives[n].group == p.group) out.examples.push_back(negatives[n++]);
  }
  return out;
}

/// Vocabulary over training contexts and responses (special tokens included).
inline Vocabulary build_vocabulary(const std::vector<Example>& examples, std::size_t max_size = 0) {
  std::vector<Tokens> seqs;
  seqs.reserve(examples.size() * 2);
  for (const auto& e : examples) {
    seqs.push_back(e.context);
    seqs.push_back(e.response);
  }
  return Vocabulary::build(seqs, max_size);
}

template <TrainableModel M>
ScoreTable score_table(const M& model, const std::vector<CandidateSet>& sets, std::size_t chunk = 64,
                       std::size_t workers = 1) {
  const auto scores = score_sets(model, sets, chunk, workers);
  ScoreTable t;
  for (std::size_t i = 0; i < sets.size(); ++i) t.add(sets[i].id, scores[i]);
  t.sort();
  return t;
}

/// Stage-1 Siamese retrieval over the whole pool, then ESIM rescoring of
/// the top k. The k candidates are ordered by ESIM score; the rest follow
/// in stage-1 order with their stage-1 scores.
template <Scalar T>
Ranking retrieve_rerank(const SentEncModel<T>& retriever, const EsimModel<T>& reranker,
                        const CandidateSet& set, std::size_t k, std::size_t chunk = 64,
                        const Tensor<T>* pool_encodings = nullptr) {
  if (set.candidates.empty()) throw ContractError("retrieve_rerank: empty pool");
  if (k > set.candidates.size()) {
    throw ContractError("retrieve_rerank: k = " + std::to_string(k) + " exceeds pool of " +
                        std::to_string(set.candidates.size()));
  }
  const auto vc = retriever.encode_context(set.context);
  const auto stage1_scores = pool_encodings ? retriever.score_encoded(vc, *pool_encodings, chunk)
                                            : retriever.score_encoded(vc, retriever.encode_responses(set.candidates, chunk), chunk);
  const auto stage1 = top_k(stage1_scores, set.candidates.size());

  CandidateSet shortlist{set.id, set.context, {}, {}};
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < k; ++i) ids.push_back(stage1[i].index);
  // Keep ascending pool index inside the shortlist so ESIM ties resolve by index.
  std::sort(ids.begin(), ids.end());
  for (auto i : ids) shortlist.candidates.push_back(set.candidates[i]);
  const auto stage2 = rank(set.id, reranker.score(shortlist, chunk));

  Ranking out;
  out.id = set.id;
  for (std::size_t p = 0; p < stage2.order.size(); ++p) {
    out.order.push_back(ids[stage2.order[p]]);
    out.scores.push_back(stage2.scores[p]);
  }
  for (std::size_t i = k; i < stage1.size(); ++i) {
    out.order.push_back(stage1[i].index);
    out.scores.push_back(stage1[i].score);
  }
  return out;
}

}  // namespace esrs
