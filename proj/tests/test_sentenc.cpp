#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "esrs/sentenc.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

namespace esrs {
namespace {

using D = double;

PaddedIds ids_of(const std::vector<Tokens>& rows, const Vocabulary& vocab) { return pad_sequences(rows, vocab); }

TEST(EncodeSentence, SingleTokenGetsAllWeight) {
  const auto model = testing::tiny_sentenc<D>(2, 4, 3);
  const auto ids = ids_of({{"c"}}, model.vocab());
  const auto s = encode_sentence(model.params(), ids, ids.mask_tensor<D>());
  EXPECT_EQ(s.v.shape(), (Shape{1, 24}));
  for (std::size_t h = 0; h < 3; ++h) {
    EXPECT_NEAR(s.A[h], 1.0, 1e-15);
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(s.V[h * 8 + k], s.H[k], 1e-15);
  }
}

TEST(EncodeSentence, MatchesLoopOracle) {
  const auto model = testing::tiny_sentenc<D>(3, 3, 2);
  const auto& p = model.params();
  Rng rng(40);
  const std::vector<Tokens> rows{testing::random_tokens(rng, 5), testing::random_tokens(rng, 2),
                                 testing::random_tokens(rng, 4)};
  const auto ids = ids_of(rows, model.vocab());
  const auto s = encode_sentence(p, ids, ids.mask_tensor<D>());
  const std::size_t T = ids.width, w = 6, da = p.attn1.out_dim(), heads = 2;
  const auto& W1 = p.attn1.weight.vec();
  const auto& b1 = p.attn1.bias.vec();
  const auto& W2 = p.attn2.weight.vec();
  const auto& b2 = p.attn2.bias.vec();
  for (std::size_t b = 0; b < rows.size(); ++b) {
    const std::size_t len = rows[b].size();
    std::vector<std::vector<D>> score(len, std::vector<D>(heads));
    for (std::size_t t = 0; t < len; ++t) {
      const D* Ht = s.H.values().data() + (b * T + t) * w;
      for (std::size_t h = 0; h < heads; ++h) {
        D acc = b2[h];
        for (std::size_t a = 0; a < da; ++a) {
          D u = b1[a];
          for (std::size_t k = 0; k < w; ++k) u += Ht[k] * W1[k * da + a];
          acc += std::max(u, 0.0) * W2[a * heads + h];
        }
        score[t][h] = acc;
      }
    }
    for (std::size_t h = 0; h < heads; ++h) {
      D z = 0;
      for (std::size_t t = 0; t < len; ++t) z += std::exp(score[t][h]);
      D total = 0;
      for (std::size_t t = 0; t < T; ++t) {
        const D a = t < len ? std::exp(score[t][h]) / z : 0.0;
        EXPECT_NEAR(s.A[(b * T + t) * heads + h], a, 1e-12);
        total += s.A[(b * T + t) * heads + h];
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
      for (std::size_t k = 0; k < w; ++k) {
        D v = 0;
        for (std::size_t t = 0; t < len; ++t) v += std::exp(score[t][h]) / z * s.H[(b * T + t) * w + k];
        EXPECT_NEAR(s.v[b * heads * w + h * w + k], v, 1e-10);
      }
    }
  }
}

TEST(EncodeSentence, PaddingInvariantAndDeterministic) {
  const auto model = testing::tiny_sentenc<D>(4);
  const Tokens row{"a", "b", "c"};
  const auto alone = model.encode(ids_of({row}, model.vocab()));
  const auto padded = model.encode(ids_of({row, Tokens(12, "d")}, model.vocab()));
  for (std::size_t k = 0; k < alone.size(); ++k) EXPECT_NEAR(alone[k], padded[k], 1e-6);
  EXPECT_EQ(alone.vec(), model.encode(ids_of({row}, model.vocab())).vec());
}

TEST(ClassifyPair, IdenticalVectorsAndSoftmaxLaw) {
  auto model = testing::tiny_sentenc<D>(5);
  auto& p = model.params();
  Rng rng(6);
  const auto v = testing::random_tensor({3, p.sentence_dim()}, rng);
  // Route only the |vc - vr| block through a zeroed MLP: output logits equal the bias.
  const std::size_t d = p.sentence_dim();
  const auto logits = classify_pair(p, v, v);
  ASSERT_EQ(logits.shape(), (Shape{3, 2}));
  const auto probs = positive_probabilities(logits);
  for (std::size_t b = 0; b < 3; ++b) {
    const D p1 = 1.0 / (1.0 + std::exp(logits[2 * b] - logits[2 * b + 1]));
    const D p0 = 1.0 / (1.0 + std::exp(logits[2 * b + 1] - logits[2 * b]));
    EXPECT_NEAR(p0 + p1, 1.0, 1e-12);
    EXPECT_NEAR(probs[b], p1, 1e-12);
  }
  // Perturbing the weights that read the difference block changes nothing when vc == vr.
  auto w1 = p.mlp1.weight.mutable_values();
  const std::size_t mh = p.mlp1.out_dim();
  for (std::size_t k = 2 * d; k < 3 * d; ++k)
    for (std::size_t j = 0; j < mh; ++j) w1[k * mh + j] += 5.0;
  const auto again = classify_pair(p, v, v);
  for (std::size_t i = 0; i < logits.size(); ++i) EXPECT_EQ(again[i], logits[i]);
  EXPECT_THROW(classify_pair(p, v, testing::random_tensor({2, d}, rng)), DimensionError);
}

TEST(SentEncGradient, WholeModelMatchesFiniteDifferences) {
  auto model = testing::tiny_sentenc<D>(7, 3, 2, 2);
  Rng rng(8);
  const auto b = testing::batch_of({{testing::random_tokens(rng, 4), testing::random_tokens(rng, 3), 1, 0},
                                    {testing::random_tokens(rng, 2), testing::random_tokens(rng, 5), 0, 1},
                                    {testing::random_tokens(rng, 1), testing::random_tokens(rng, 2), 1, 2}},
                                   model.vocab());
  const auto r = testing::grad_check(testing::named_pairs(model.parameters()),
                                     [&] { return softmax_cross_entropy(model.logits(b), b.labels); });
  EXPECT_GT(r.checked, 300u);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  EXPECT_LT(r.skipped * 20, r.checked);
}

TEST(SentEncParams, OneEncoderServesBothSides) {
  const auto model = testing::tiny_sentenc<D>(9);
  std::set<std::string> names;
  for (const auto& p : model.parameters()) {
    EXPECT_TRUE(names.insert(p.name).second) << p.name;
    EXPECT_EQ(p.name.find("context"), std::string::npos);
    EXPECT_EQ(p.name.find("response"), std::string::npos);
  }
  const Tokens same{"a", "b", "c"};
  const auto b = testing::batch_of({{same, same, 1, 0}}, model.vocab());
  EXPECT_EQ(model.encode(b.context).vec(), model.encode(b.response).vec());
  EXPECT_EQ(model.params().sentence_dim(), 2u * 4u * 2u);
  EXPECT_EQ(model.params().mlp1.in_dim(), 4 * model.params().sentence_dim());
}

std::vector<Tokens> random_pool(Rng& rng, std::size_t n) {
  std::vector<Tokens> pool;
  for (std::size_t i = 0; i < n; ++i) pool.push_back(testing::random_tokens(rng, 1 + rng.below(6)));
  return pool;
}

TEST(RetrieveTopK, MatchesBruteForceOnPoolOf200) {
  const auto model = testing::tiny_sentenc<D>(10);
  Rng rng(11);
  const auto set = testing::random_candidate_set(rng, 1);
  const auto pool = random_pool(rng, 200);
  const auto ctx = concat_context(set.context);
  std::vector<double> brute(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i)
    brute[i] = positive_probabilities(model.logits(testing::batch_of({{ctx, pool[i], 1, 0}}, model.vocab())))[0];
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return brute[a] > brute[b]; });

  const auto top = retrieve_topk(model, set.context, pool, 20, 37);
  ASSERT_EQ(top.size(), 20u);
  for (std::size_t r = 0; r < 20; ++r) {
    EXPECT_EQ(top[r].index, order[r]);
    EXPECT_NEAR(top[r].score, brute[order[r]], 1e-12);
  }
}

TEST(RetrieveTopK, FullRankingTiesAndErrors) {
  const auto model = testing::tiny_sentenc<D>(12);
  Rng rng(13);
  const auto set = testing::random_candidate_set(rng, 1);
  auto pool = random_pool(rng, 15);
  pool[9] = pool[4];
  const auto all = retrieve_topk(model, set.context, pool, pool.size());
  ASSERT_EQ(all.size(), pool.size());
  std::set<std::size_t> seen;
  for (std::size_t r = 0; r < all.size(); ++r) {
    seen.insert(all[r].index);
    if (r > 0) {
      EXPECT_GE(all[r - 1].score, all[r].score);
    }
    if (all[r].index == 4) {
      ASSERT_LT(r + 1, all.size());
      EXPECT_EQ(all[r + 1].index, 9u);
      EXPECT_EQ(all[r + 1].score, all[r].score);
    }
  }
  EXPECT_EQ(seen.size(), pool.size());
  EXPECT_THROW(retrieve_topk(model, set.context, pool, pool.size() + 1), ContractError);
  EXPECT_THROW(retrieve_topk(model, set.context, {}, 0), ContractError);
}

TEST(RetrieveTopK, ChunkInvariant) {
  const auto model = testing::tiny_sentenc<float>(14);
  Rng rng(15);
  const auto set = testing::random_candidate_set(rng, 1);
  const auto pool = random_pool(rng, 60);
  const auto ref = retrieve_topk(model, set.context, pool, 10, 256);
  for (std::size_t chunk : {1, 7, 60}) {
    const auto got = retrieve_topk(model, set.context, pool, 10, chunk);
    for (std::size_t r = 0; r < 10; ++r) {
      EXPECT_EQ(got[r].index, ref[r].index);
      EXPECT_NEAR(got[r].score, ref[r].score, 1e-6);
    }
  }
}

TEST(TopK, OrderAndBounds) {
  const auto t = top_k({0.2, 0.9, 0.2, 0.5}, 3);
  EXPECT_EQ(t, (std::vector<Retrieved>{{1, 0.9}, {3, 0.5}, {0, 0.2}}));
  EXPECT_TRUE(top_k({0.1}, 0).empty());
  EXPECT_THROW(top_k({0.1}, 2), ContractError);
}

TEST(EncodingCache, ReusedAcrossContextsAndPersisted) {
  const auto model = testing::tiny_sentenc<float>(16);
  Rng rng(17);
  auto pool = random_pool(rng, 30);
  pool.push_back(pool[0]);
  EncodingCache cache;
  const auto c1 = testing::random_candidate_set(rng, 1), c2 = testing::random_candidate_set(rng, 1);
  const auto a = retrieve_topk(model, c1.context, pool, 5, 8, &cache);
  std::set<Tokens> unique(pool.begin(), pool.end());
  EXPECT_EQ(cache.size(), unique.size());
  EXPECT_EQ(a, retrieve_topk(model, c1.context, pool, 5, 8));
  const auto b = retrieve_topk(model, c2.context, pool, 5, 8, &cache);
  EXPECT_EQ(b, retrieve_topk(model, c2.context, pool, 5, 8));

  testing::TempDir dir;
  cache.save(dir.file("cache.bin"));
  auto loaded = EncodingCache::load(dir.file("cache.bin"));
  EXPECT_EQ(loaded.size(), cache.size());
  EXPECT_EQ(*loaded.get(pool[3]), *cache.get(pool[3]));
  EXPECT_EQ(retrieve_topk(model, c1.context, pool, 5, 8, &loaded), a);
  EXPECT_EQ(testing::slurp(dir.file("cache.bin")), serialize_checkpoint(loaded.to_checkpoint()));
  EXPECT_THROW(EncodingCache::from_checkpoint(model.to_checkpoint()), FormatError);
}

TEST(SentEncCheckpoint, RoundTripPreservesScores) {
  const auto model = testing::tiny_sentenc<D>(18, 4, 3);
  const auto back = SentEncModel<D>::from_checkpoint(deserialize_checkpoint(serialize_checkpoint(model.to_checkpoint())));
  EXPECT_EQ(back.config().heads, 3u);
  Rng rng(19);
  const auto set = testing::random_candidate_set(rng, 7);
  const auto x = model.score(set), y = back.score(set);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x[i], y[i], 1e-6);
}

}  // namespace
}  // namespace esrs
