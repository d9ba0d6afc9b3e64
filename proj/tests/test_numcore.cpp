#include <gtest/gtest.h>

#include <cmath>

#include "esrs/numcore/lstm.hpp"
#include "esrs/numcore/ops.hpp"
#include "support/gradcheck.hpp"

namespace esrs {
namespace {

using D = Tensor<double>;
using F = Tensor<float>;

D random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return D::from(std::move(shape), std::move(v));
}

TEST(Matmul, IdentityAndZeroRow) {
  const auto eye = F::from({2, 2}, {1, 0, 0, 1});
  const auto m = F::from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(matmul(eye, m).vec(), m.vec());

  const auto row = F::from({1, 2}, {1, 0});
  const auto col = F::from({2, 1}, {0, 5});
  const auto r = matmul(row, col);
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_EQ(r.item(), 0.0f);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  const auto a = F::zeros({2, 3});
  const auto b = F::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3] and [2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  const auto r = testing::grad_check({{"a", a}, {"b", b}}, [&] { return sum(matmul(a, b)); });
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Elementwise, Definitions) {
  const auto x = F::from({2}, {-1.0f, 2.5f});
  EXPECT_EQ(relu(x).vec(), (std::vector<float>{0.0f, 2.5f}));
  EXPECT_EQ(tanh(F::scalar(0.0f)).item(), 0.0f);
  EXPECT_THROW(add(F::zeros({2}), F::zeros({3})), DimensionError);
  EXPECT_THROW(mul(F::zeros({2, 1}), F::zeros({1, 2})), DimensionError);
}

TEST(Elementwise, MulGradientAtTwoThree) {
  auto a = D::scalar(2.0);
  auto b = D::scalar(3.0);
  const auto r = testing::grad_check({{"a", a}, {"b", b}}, [&] { return mul(a, b); });
  EXPECT_LT(r.max_rel_error, 1e-8);
  a.clear_grad();
  a.set_requires_grad(true);
  backward(mul(a, b));
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
}

TEST(Elementwise, DispatchMatchesDirectCalls) {
  const auto a = F::from({3}, {-1, 0.5f, 2});
  const auto b = F::from({3}, {4, -2, 1});
  EXPECT_EQ(elementwise(ElementwiseOp::Sub, a, &b).vec(), sub(a, b).vec());
  EXPECT_EQ(elementwise(ElementwiseOp::Relu, a).vec(), relu(a).vec());
  EXPECT_THROW(elementwise(ElementwiseOp::Add, a), ContractError);
}

TEST(MaskedSoftmax, Examples) {
  const auto uniform = masked_softmax(D::from({2}, {0, 0}), D::from({2}, {1, 1}), 0);
  EXPECT_EQ(uniform.vec(), (std::vector<double>{0.5, 0.5}));

  const auto single = masked_softmax(F::from({2}, {5, 100}), F::from({2}, {1, 0}), 0);
  EXPECT_EQ(single.vec(), (std::vector<float>{1.0f, 0.0f}));

  const auto s = masked_softmax(D::from({3}, {1, 2, 3}), D::from({3}, {1, 1, 1}), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(s[i], std::exp(i + 1.0) / z, 1e-12);
}

TEST(MaskedSoftmax, AllMaskedSliceIsDegenerate) {
  EXPECT_THROW(masked_softmax(F::from({2, 2}, {1, 2, 3, 4}), F::from({2, 2}, {1, 1, 0, 0}), 1),
               DegenerateMaskError);
}

TEST(MaskedSoftmax, InvariantToMaskedScores) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    auto scores = random_tensor({3, 5}, rng, -5, 5);
    std::vector<double> m(15);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 5; ++c) m[r * 5 + c] = (c == 0 || rng.bernoulli(0.5)) ? 1 : 0;
    const auto mask = D::from({3, 5}, m);
    const auto base = masked_softmax(scores, mask, 1);
    auto perturbed = scores.vec();
    for (std::size_t i = 0; i < 15; ++i)
      if (m[i] == 0) perturbed[i] = rng.uniform(-1e6, 1e6);
    const auto other = masked_softmax(D::from({3, 5}, perturbed), mask, 1);
    EXPECT_EQ(base.vec(), other.vec());
  }
}

TEST(MaskedPool, Examples) {
  const auto one = masked_pool(D::from({2, 2}, {4, -1, 9, 9}), D::from({2}, {1, 0}), PoolKind::Max);
  EXPECT_EQ(one.vec(), (std::vector<double>{4, -1}));
  const auto one_mean =
      masked_pool(D::from({2, 2}, {4, -1, 9, 9}), D::from({2}, {1, 0}), PoolKind::Mean);
  EXPECT_EQ(one_mean.vec(), (std::vector<double>{4, -1}));

  const auto h = D::from({2, 1}, {1, 3});
  const auto all = D::from({2}, {1, 1});
  EXPECT_EQ(masked_pool(h, all, PoolKind::Max).item(), 3.0);
  EXPECT_EQ(masked_pool(h, all, PoolKind::Mean).item(), 2.0);

  const auto padded = D::from({3, 1}, {1, 3, 1e6});
  const auto pmask = D::from({3}, {1, 1, 0});
  EXPECT_EQ(masked_pool(padded, pmask, PoolKind::Max).item(), 3.0);
  EXPECT_EQ(masked_pool(padded, pmask, PoolKind::Mean).item(), 2.0);

  EXPECT_THROW(masked_pool(h, D::from({2}, {0, 0}), PoolKind::Mean), DegenerateMaskError);
}

TEST(Backward, LinearAndQuadratic) {
  auto x = D::from({3}, {1, -2, 0.5}, true);
  backward(sum(x));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()),
            (std::vector<double>{1, 1, 1}));
  x.clear_grad();
  backward(sum(mul(x, x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()),
            (std::vector<double>{2, -4, 1}));
}

TEST(Backward, NonScalarIsContractError) {
  auto x = D::from({3}, {1, 2, 3}, true);
  EXPECT_THROW(backward(relu(x)), ContractError);
}

TEST(Backward, GradientsAccumulateAcrossConsumers) {
  auto x = D::from({2}, {1, 2}, true);
  const auto y = add(scale(x, 3.0), mul(x, x));
  backward(sum(y));
  EXPECT_DOUBLE_EQ(x.grad()[0], 3 + 2 * 1);
  EXPECT_DOUBLE_EQ(x.grad()[1], 3 + 2 * 2);
}

TEST(Tape, VisitsEveryOperationExactlyOnce) {
  auto x = D::from({2}, {1, 2}, true);
  const auto shared = tanh(x);
  const auto loss = sum(add(mul(shared, shared), shared));
  const auto tape = Tape<double>::record(loss);
  std::unordered_map<const void*, int> visits;
  tape.replay([&](detail::Node<double>& n) { ++visits[&n]; });
  EXPECT_EQ(tape.operation_count(), 4u);  // tanh, mul, add, sum
  EXPECT_EQ(visits.size(), 4u);
  for (const auto& [node, count] : visits) EXPECT_EQ(count, 1);
}

TEST(NoGrad, RecordsNothing) {
  auto x = D::from({2}, {1, 2}, true);
  NoGradGuard guard;
  const auto y = sum(mul(x, x));
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->inputs.empty());
}

// Every differentiable primitive against central differences, 100 seeded trials.
TEST(GradientProperty, PrimitivesMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(1000 + seed);
    const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(4), n = 1 + rng.below(4);
    auto a = random_tensor({m, k}, rng);
    auto b = random_tensor({k, n}, rng);
    auto c = random_tensor({m, n}, rng);
    auto bias = random_tensor({n}, rng);
    auto batched = random_tensor({2, m, k}, rng);
    auto batched2 = random_tensor({2, k, n}, rng);
    std::vector<double> mv(m * n);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < n; ++j) mv[r * n + j] = (j == 0 || rng.bernoulli(0.6)) ? 1 : 0;
    const auto mask = D::from({m, n}, mv);
    std::vector<double> pm(m, 1.0);
    for (std::size_t r = 1; r < m; ++r) pm[r] = rng.bernoulli(0.7) ? 1 : 0;
    const auto pool_mask = D::from({m}, pm);
    auto weights = random_tensor({m, n}, rng);  // fixed projection of outputs

    const auto loss = [&] {
      const auto ab = add_bias(matmul(a, b), bias);
      const auto mixed = add(sub(mul(tanh(ab), sigmoid(c)), relu(c)), abs(ab));
      const auto attn = masked_softmax(add(mixed, c), mask, 1);
      const auto pooled = concat<double>({masked_pool(mul(attn, weights), pool_mask, PoolKind::Max),
                                          masked_pool(mixed, pool_mask, PoolKind::Mean)});
      const auto bm = bmm(batched, batched2);
      return add(sum(mul(pooled, pooled)), sum(tanh(transpose(bm))));
    };
    const auto r = testing::grad_check(
        {{"a", a}, {"b", b}, {"c", c}, {"bias", bias}, {"batched", batched}, {"batched2", batched2}},
        loss);
    ASSERT_LT(r.max_rel_error, 1e-4) << "seed " << seed << ": " << r.worst;
  }
}

TEST(Lstm, ZeroParamsGiveZeroState) {
  LstmCellParams<double> p;
  p.hidden = 3;
  p.input_weights = D::zeros({2, 12});
  p.hidden_weights = D::zeros({3, 12});
  p.bias = D::zeros({12});
  const auto [h, c] = lstm_cell(p, D::zeros({2}), D::zeros({3}), D::zeros({3}));
  for (double v : h.values()) EXPECT_EQ(v, 0.0);
}

TEST(Lstm, ShapeMismatchIsDimensionError) {
  Rng rng(1);
  const auto p = LstmCellParams<double>::init(2, 3, rng);
  EXPECT_THROW(lstm_cell(p, D::zeros({4}), D::zeros({3}), D::zeros({3})), DimensionError);
  EXPECT_THROW(lstm_cell(p, D::zeros({2}), D::zeros({2}), D::zeros({2})), DimensionError);
}

TEST(Lstm, LargeForgetBiasKeepsCell) {
  Rng rng(2);
  auto p = LstmCellParams<double>::init(2, 3, rng, false);
  auto b = p.bias.mutable_values();
  std::fill(b.begin(), b.end(), 0.0);
  std::fill(b.begin() + 3, b.begin() + 6, 50.0);  // forget gate
  std::fill(b.begin(), b.begin() + 3, -50.0);     // input gate closed
  const auto c_prev = D::from({3}, {0.3, -0.7, 1.2});
  const auto [h, c] = lstm_cell(p, random_tensor({2}, rng), random_tensor({3}, rng), c_prev);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(c[j], c_prev[j], 1e-12);
}

TEST(Lstm, CellGradientsMatchFiniteDifferences) {
  Rng rng(3);
  auto p = LstmCellParams<double>::init(2, 3, rng);
  auto x = random_tensor({2}, rng);
  auto h0 = random_tensor({3}, rng);
  auto c0 = random_tensor({3}, rng);
  const auto r = testing::grad_check(
      {{"W_in", p.input_weights}, {"W_h", p.hidden_weights}, {"b", p.bias}, {"x", x}},
      [&] { return sum(lstm_cell(p, x, h0, c0).first); });
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
}

// The fused BPTT sequence op against a step-by-step unroll of the composed
// cell, forward values and all gradients.
TEST(Lstm, FusedSequenceMatchesComposedUnroll) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(40 + seed);
    const std::size_t d = 1 + rng.below(3), h = 1 + rng.below(3), steps = 1 + rng.below(5);
    const bool reverse = seed % 2 == 1;
    auto p = LstmCellParams<double>::init(d, h, rng);
    auto x = random_tensor({1, steps, d}, rng);
    x.set_requires_grad(true);
    const std::size_t len = 1 + rng.below(steps);
    std::vector<double> mv(steps, 0.0);
    std::fill(mv.begin(), mv.begin() + static_cast<long>(len), 1.0);
    const auto mask = D::from({1, steps}, mv);
    auto weights = random_tensor({1, steps, h}, rng);

    const auto fused = lstm_sequence(p, x, mask, reverse);
    backward(sum(mul(fused, weights)));
    const std::vector<double> g_fused(p.hidden_weights.grad().begin(), p.hidden_weights.grad().end());
    const std::vector<double> gx_fused(x.grad().begin(), x.grad().end());
    for (auto* t : {&p.input_weights, &p.hidden_weights, &p.bias, &x}) t->clear_grad();

    // Composed reference.
    auto hs = D::zeros({h});
    auto cs = D::zeros({h});
    D total = D::scalar(0.0);
    std::vector<double> unrolled(steps * h, 0.0);
    for (std::size_t s = 0; s < len; ++s) {
      const std::size_t t = reverse ? len - 1 - s : s;
      const auto row = reshape(slice_last(reshape(x, {1, steps * d}), t * d, d), {d});
      std::tie(hs, cs) = lstm_cell(p, row, hs, cs);
      for (std::size_t j = 0; j < h; ++j) unrolled[t * h + j] = hs[j];
      const auto w = reshape(slice_last(reshape(weights, {1, steps * h}), t * h, h), {h});
      total = add(total, sum(mul(hs, w)));
    }
    for (std::size_t i = 0; i < unrolled.size(); ++i) EXPECT_NEAR(fused[i], unrolled[i], 1e-12);
    backward(total);
    for (std::size_t i = 0; i < g_fused.size(); ++i)
      EXPECT_NEAR(g_fused[i], p.hidden_weights.grad()[i], 1e-10);
    for (std::size_t i = 0; i < gx_fused.size(); ++i) EXPECT_NEAR(gx_fused[i], x.grad()[i], 1e-10);
  }
}

TEST(BiLstm, SingletonAndShapes) {
  Rng rng(4);
  const auto fwd = LstmCellParams<double>::init(3, 2, rng);
  const auto bwd = LstmCellParams<double>::init(3, 2, rng);
  const auto x1 = random_tensor({1, 3}, rng);
  const auto out1 = bilstm(fwd, bwd, x1, D::from({1}, {1}));
  const auto row = reshape(x1, {3});
  const auto hf = lstm_cell(fwd, row, D::zeros({2}), D::zeros({2})).first;
  const auto hb = lstm_cell(bwd, row, D::zeros({2}), D::zeros({2})).first;
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_NEAR(out1[j], hf[j], 1e-14);
    EXPECT_NEAR(out1[2 + j], hb[j], 1e-14);
  }

  const auto f4 = LstmCellParams<double>::init(3, 4, rng);
  const auto b4 = LstmCellParams<double>::init(3, 4, rng);
  const auto out = bilstm(f4, b4, random_tensor({5, 3}, rng), D::full({5}, 1.0));
  EXPECT_EQ(out.shape(), (Shape{5, 8}));
}

TEST(BiLstm, PaddingInvariance) {
  Rng rng(6);
  const auto fwd = LstmCellParams<float>::init(3, 4, rng);
  const auto bwd = LstmCellParams<float>::init(3, 4, rng);
  std::vector<float> xs(4 * 3);
  for (auto& v : xs) v = static_cast<float>(rng.uniform(-1, 1));
  const auto plain = bilstm(fwd, bwd, F::from({4, 3}, xs), F::full({4}, 1.0f));
  auto padded_x = xs;
  for (int i = 0; i < 6; ++i) padded_x.push_back(123.0f);
  const auto padded =
      bilstm(fwd, bwd, F::from({6, 3}, padded_x), F::from({6}, {1, 1, 1, 1, 0, 0}));
  for (std::size_t i = 0; i < plain.size(); ++i) EXPECT_NEAR(plain[i], padded[i], 1e-6);
  for (std::size_t i = plain.size(); i < padded.size(); ++i) EXPECT_EQ(padded[i], 0.0f);
}

TEST(Determinism, IdenticalInputsGiveIdenticalOutputs) {
  auto run = [] {
    Rng rng(77);
    const auto fwd = LstmCellParams<float>::init(3, 4, rng);
    const auto bwd = LstmCellParams<float>::init(3, 4, rng);
    std::vector<float> xs(2 * 5 * 3);
    for (auto& v : xs) v = static_cast<float>(rng.uniform(-1, 1));
    return bilstm(fwd, bwd, F::from({2, 5, 3}, xs), F::full({2, 5}, 1.0f)).vec();
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace esrs
