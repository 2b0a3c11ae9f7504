#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "grad_cases.hpp"
#include "oracles.hpp"
#include "pvit/errors.hpp"
#include "pvit/tensor.hpp"

using namespace pvit;

namespace {

constexpr double kTol = 1e-6;

}  // namespace

TEST(Tensor, ConstructorValidatesSize) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t(1, 2), 1.5);
}

TEST(Tensor, MatmulMatchesTripleLoop) {
  CounterRng rng(1, 0);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {3, 5, 2}, {7, 4, 9}, {16, 16, 16}}) {
    Tensor a = oracle::random_tensor({std::size_t(m), std::size_t(k)}, rng);
    Tensor b = oracle::random_tensor({std::size_t(k), std::size_t(n)}, rng);
    Tape tape;
    Tensor got = matmul(tape.constant(a), tape.constant(b)).value();
    Tensor want = oracle::matmul(a, b);
    ASSERT_EQ(got.shape, want.shape);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got.data[i], want.data[i], 1e-12);
  }
}

TEST(Tensor, MatmulRejectsMismatch) {
  Tape tape;
  EXPECT_THROW(matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({2, 3}))), ShapeError);
}

TEST(Tensor, SoftmaxRowsSumToOneAndSurviveLargeLogits) {
  Tape tape;
  Var z = tape.constant(Tensor::from_rows({{1000, 0, -1000}, {1, 2, 3}}));
  Tensor p = softmax(z).value();
  EXPECT_NEAR(p(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(p(1, 0) + p(1, 1) + p(1, 2), 1.0, 1e-15);
  for (double v : p.data) EXPECT_TRUE(std::isfinite(v));
}

TEST(Tensor, LogsumexpMatchesExtendedPrecision) {
  CounterRng rng(3, 0);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor z = oracle::random_tensor({1, 7}, rng, -20, 20);
    Tape tape;
    const double got = logsumexp(tape.constant(z), 1).value().item();
    EXPECT_NEAR(got, static_cast<double>(oracle::lse(z.data)), 1e-12);
  }
}

TEST(Tensor, LayerNormNormalizesRows) {
  CounterRng rng(4, 0);
  Tape tape;
  Tensor x = oracle::random_tensor({3, 8}, rng, -5, 5);
  Var y = layer_norm(tape.constant(x), tape.constant(Tensor({8}, 1.0)), tape.constant(Tensor({8}, 0.0)));
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 8; ++c) mean += y.value()(r, c) / 8;
    for (std::size_t c = 0; c < 8; ++c) var += std::pow(y.value()(r, c) - mean, 2) / 8;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-3);  // eps in the denominator
  }
}

TEST(Tensor, GeluKnownValues) {
  Tape tape;
  Tensor y = gelu(tape.constant(Tensor({3}, std::vector<double>{0.0, 1.0, -1.0}))).value();
  EXPECT_EQ(y.data[0], 0.0);
  EXPECT_NEAR(y.data[1], 0.8413447460685429, 1e-15);
  EXPECT_NEAR(y.data[2], -0.15865525393145707, 1e-15);
}

TEST(Tensor, CrossEntropyUniformLogits) {
  Tape tape;
  const std::size_t targets[] = {0, 2};
  const double loss = cross_entropy(tape.constant(Tensor({2, 4}, 0.0)), targets).value().item();
  EXPECT_NEAR(loss, std::log(4.0), 1e-15);
  const std::size_t bad[] = {0, 4};
  EXPECT_THROW(cross_entropy(tape.constant(Tensor({2, 4}, 0.0)), bad), ShapeError);
}

// ---------------------------------------------------------------------------
// Gradients of every differentiable op against central differences.

class OpGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGradients, MatchFiniteDifferences) {
  const std::uint64_t seed = GetParam();
  for (const auto& c : grad_cases::op_cases(seed)) {
    const auto res = oracle::check_gradients(c.f, c.inputs);
    EXPECT_LT(res.worst, kTol) << c.name << " seed " << seed << ": " << res.where;
    EXPECT_GT(res.checked, 0u);
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradients, ::testing::Range<std::uint64_t>(0, 5));

// ---------------------------------------------------------------------------
// Tape semantics

TEST(Tape, GradientsAccumulateAcrossReuse) {
  Tape tape;
  Var x = tape.variable(Tensor({1}, 3.0));
  Var y = add(mul(x, x), x);  // x^2 + x
  tape.backward(sum(y));
  EXPECT_DOUBLE_EQ(tape.gradient(x)[0], 7.0);
}

TEST(Tape, BackwardTwiceNeedsReset) {
  Tape tape;
  Var x = tape.variable(Tensor({1}, 2.0));
  Var y = sum(mul(x, x));
  tape.backward(y);
  EXPECT_THROW(tape.backward(y), TapeError);
  tape.reset();
  Var x2 = tape.variable(Tensor({1}, 2.0));
  tape.backward(sum(mul(x2, x2)));
  EXPECT_DOUBLE_EQ(tape.gradient(x2)[0], 4.0);
}

TEST(Tape, RejectsNonScalarAndDetachedRoots) {
  Tape tape;
  Var x = tape.variable(Tensor({2}, 1.0));
  EXPECT_THROW(tape.backward(scale(x, 2.0)), TapeError);
  Tape other;
  Var c = other.constant(Tensor({1}, 1.0));
  EXPECT_THROW(other.backward(sum(c)), TapeError);
  EXPECT_THROW(tape.backward(sum(c)), TapeError);
}

TEST(Tape, UnreachedLeafHasZeroGradient) {
  Tape tape;
  Var x = tape.variable(Tensor({2}, 1.0));
  Var unused = tape.variable(Tensor({3}, 1.0));
  tape.backward(sum(x));
  EXPECT_EQ(tape.gradient(unused), std::vector<double>(3, 0.0));
}

TEST(Tape, ParamAccumulatesIntoBoundTensor) {
  Tensor w({2}, std::vector<double>{1.0, -2.0});
  w.requires_grad = true;
  for (int i = 0; i < 2; ++i) {
    Tape tape;
    Var p = tape.param(w);
    tape.backward(sum(mul(p, p)));
  }
  ASSERT_TRUE(w.grad.has_value());
  EXPECT_EQ(*w.grad, (std::vector<double>{4.0, -8.0}));
}

TEST(Tape, InferenceModeRecordsNoGradients) {
  Tensor w({2}, 1.0);
  w.requires_grad = true;
  Tape tape(Tape::Mode::inference);
  Var y = sum(mul(tape.param(w), tape.variable(Tensor({2}, 1.0))));
  EXPECT_FALSE(y.value().requires_grad);
  EXPECT_THROW(tape.backward(y), TapeError);
}

TEST(Tape, CrossTapeOperandsRejected) {
  Tape a, b;
  EXPECT_THROW(add(a.constant(Tensor({1})), b.constant(Tensor({1}))), TapeError);
}
