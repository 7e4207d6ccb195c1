#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "grad_suite.hpp"
#include "gsae/autograd.hpp"
#include "test_util.hpp"

namespace gsae::ag {
namespace {

using Td = Tensor<double>;
using Tf = Tensor<float>;

TEST(AutogradOps, ReluForward) {
  auto y = relu(Td::vector({-1.0, 0.0, 2.0}));
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()),
            (std::vector<double>{0.0, 0.0, 2.0}));
}

TEST(AutogradOps, SoftmaxOfEqualLogitsIsUniform) {
  auto p = softmax(Td::matrix(1, 2, {0.0, 0.0}));
  EXPECT_DOUBLE_EQ(p.at(0), 0.5);
  EXPECT_DOUBLE_EQ(p.at(1), 0.5);
}

TEST(AutogradOps, IdentityMatmul) {
  std::mt19937_64 rng(3);
  auto a = test::random_tensor<double>({3, 5}, rng);
  auto eye = Td::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto c = matmul(eye, a);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(c.at(i), a.at(i));
}

TEST(AutogradOps, ShapeMismatchNamesOpAndShapes) {
  auto a = Td({2, 3}), b = Td({4, 2});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("[4, 2]"), std::string::npos);
  }
  EXPECT_THROW(add(Td({2, 3}), Td({3, 2})), ShapeError);
  EXPECT_THROW(layer_norm(Td({2, 3}), Td({2}), Td({3})), ShapeError);
}

TEST(AutogradOps, DataLengthMatchesShape) {
  std::mt19937_64 rng(1);
  auto a = test::random_tensor<double>({4, 3}, rng);
  auto b = concat<double>({a, a}, 0);
  EXPECT_EQ(b.size(), numel(b.shape()));
  EXPECT_EQ(b.shape(), (Shape{8, 3}));
  EXPECT_THROW(Td({2, 2}, std::vector<double>(3)), std::invalid_argument);
}

TEST(AutogradBackward, SquareAtThree) {
  auto x = Td::scalar(3.0, true);
  mul(x, x).backward();
  ASSERT_TRUE(x.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(AutogradBackward, ReluSubgradient) {
  auto x = Td::vector({-1.0, 2.0}, true);
  sum(relu(x)).backward();
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
  auto z = Td::vector({0.0}, true);
  sum(relu(z)).backward();
  EXPECT_EQ(z.grad()[0], 0.0);
}

TEST(AutogradBackward, NonScalarRejected) {
  auto x = Td::vector({1.0, 2.0}, true);
  EXPECT_THROW(scale(x, 2.0).backward(), ShapeError);
}

TEST(AutogradBackward, GradHasDataShape) {
  std::mt19937_64 rng(2);
  auto x = test::random_tensor<double>({3, 4}, rng, -1, 1, true);
  sum(gelu(x)).backward();
  EXPECT_EQ(x.grad().size(), x.size());
}

TEST(AutogradBackward, SharedSubexpressionMatchesExpandedGraph) {
  std::mt19937_64 rng(5);
  const auto init = test::uniform_values<double>(6, rng);
  const auto wv = test::uniform_values<double>(6, rng);

  auto xs = Td({2, 3}, init, true);
  auto w = Td({2, 3}, wv);
  auto shared = gelu(mul(xs, w));
  sum(mul(add(shared, shared), shared)).backward();

  auto xe = Td({2, 3}, init, true);
  auto e1 = gelu(mul(xe, w));
  auto e2 = gelu(mul(xe, w));
  auto e3 = gelu(mul(xe, w));
  sum(mul(add(e1, e2), e3)).backward();

  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(xs.grad()[i], xe.grad()[i], 1e-14);
}

TEST(AutogradBackward, ZeroSeedGivesZeroGradients) {
  std::mt19937_64 rng(9);
  auto a = test::random_tensor<double>({3, 4}, rng, -1, 1, true);
  auto b = test::random_tensor<double>({4, 2}, rng, -1, 1, true);
  auto loss = mean(softmax(gelu(matmul(a, b))));
  loss.backward(0.0);
  for (double g : a.grad()) EXPECT_EQ(g, 0.0);
  for (double g : b.grad()) EXPECT_EQ(g, 0.0);
}

TEST(AutogradBackward, GradientsAccumulateAcrossCalls) {
  auto x = Td::scalar(2.0, true);
  mul(x, x).backward();
  mul(x, x).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
  x.zero_grad();
  scale(x, 3.0).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
}

TEST(AutogradBackward, DetachedTensorsCarryNoGraph) {
  auto x = Td::vector({1.0, 2.0}, true);
  auto y = scale(x, 2.0);
  EXPECT_TRUE(y.has_graph());
  auto d = y.detach();
  EXPECT_FALSE(d.has_graph());
  EXPECT_FALSE(d.requires_grad());
  EXPECT_THROW(sum(d).backward(), std::logic_error);
}

TEST(GradCheck, LinearFunctionIsExact) {
  std::mt19937_64 rng(4);
  const Td w = test::random_tensor<double>({1, 6}, rng);
  const auto r = grad_check<double>(
      [&](const Td& x) { return sum(mul(w, x)); }, test::random_tensor<double>({1, 6}, rng));
  EXPECT_TRUE(r.finite);
  EXPECT_LT(r.max_relative_error, 1e-8);
}

TEST(GradCheck, CrossEntropyOfLogits) {
  std::mt19937_64 rng(8);
  const std::vector<int> targets{1, 0, 3};
  const auto r = grad_check<double>(
      [&](const Td& x) { return cross_entropy(x, std::span<const int>(targets)); },
      test::random_tensor<double>({3, 4}, rng, -2, 2));
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(GradCheck, ReportsNonFiniteCoordinate) {
  const auto r = grad_check<double>(
      [](const Td& x) { return sum(log_softmax(scale(x, 1e308))); },
      Td::matrix(1, 3, {1.0, -1.0, 2.0}));
  EXPECT_FALSE(r.finite);
  ASSERT_TRUE(r.non_finite_index.has_value());
  EXPECT_LT(*r.non_finite_index, 3u);
}

TEST(GradCheck, EveryOpOverManySeeds) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    for (const auto& c : test::op_gradient_suite(seed)) {
      EXPECT_TRUE(c.finite) << c.name << " seed " << seed;
      EXPECT_LT(c.max_relative_error, 1e-4) << c.name << " seed " << seed;
    }
  }
}

TEST(GradCheck, RandomFiveOpGraph) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Td w = test::random_tensor<double>({4, 3}, rng);
    const Td b = test::random_tensor<double>({3}, rng);
    const Td v = test::random_tensor<double>({2, 3}, rng, 0.5, 1.5);
    const auto r = grad_check<double>(
        [&](const Td& x) { return mean(mul(softmax(add(gelu(matmul(x, w)), b)), v)); },
        test::random_tensor<double>({2, 4}, rng));
    EXPECT_LT(r.max_relative_error, 1e-4);
  }
}

TEST(AutogradFloat, MatchesDoubleForward) {
  std::mt19937_64 rng(12);
  const auto av = test::uniform_values<double>(12, rng);
  std::vector<float> af(av.begin(), av.end());
  auto d = layer_norm(gelu(Td({3, 4}, av)), Td({4}, {1, 1, 1, 1}), Td({4}));
  auto f = layer_norm(gelu(Tf({3, 4}, af)), Tf({4}, {1, 1, 1, 1}), Tf({4}));
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(f.at(i), d.at(i), 1e-5);
}

}  // namespace
}  // namespace gsae::ag
