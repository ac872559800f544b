#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "shapo/autodiff.hpp"
#include "shapo/finite_difference.hpp"
#include "test_util.hpp"

using namespace shapo;
using shapo::testing::random_tensor;

namespace {

using Builder = std::function<ad::Var(const std::vector<ad::Var>&)>;

/// Contracts op(inputs) with fixed random weights to get a scalar, then
/// compares the reverse-mode gradient against central differences.
double op_gradient_error(const std::vector<Tensor>& inputs, const Builder& op, std::uint64_t seed = 1) {
  ParameterStore p;
  for (std::size_t i = 0; i < inputs.size(); ++i) p.add("in" + std::to_string(i), inputs[i]);
  Tensor weights;
  {
    ad::Graph g;
    std::vector<ad::Var> vs;
    for (std::size_t i = 0; i < p.size(); ++i) vs.push_back(g.frozen(p, i));
    Rng rng(seed);
    weights = random_tensor(op(vs).value().shape(), rng);
  }
  auto build = [&](ad::Graph& g, std::vector<ad::Var> vs) { return ad::sum(ad::mul(op(vs), g.constant(weights))); };

  p.zero_grad();
  {
    ad::Graph g;
    std::vector<ad::Var> vs;
    for (std::size_t i = 0; i < p.size(); ++i) vs.push_back(g.parameter(p, i));
    g.backward(build(g, vs));
  }
  const auto analytic = p.flat_grad();
  ScalarLoss loss = [&](const ParameterStore& s) {
    ad::Graph g;
    std::vector<ad::Var> vs;
    for (std::size_t i = 0; i < s.size(); ++i) vs.push_back(g.frozen(s, i));
    return build(g, vs).item();
  };
  const auto numeric = finite_difference_gradient(loss, p, 1e-5);
  return max_relative_error(analytic, numeric, 1e-6);
}

class OpGradient : public ::testing::Test {
 protected:
  Rng rng{2024};
  Tensor m(std::size_t r, std::size_t c, double s = 1.0) { return random_tensor({r, c}, rng, s); }
  Tensor v(std::size_t n, double s = 1.0) { return random_tensor({n}, rng, s); }
};

constexpr double kOpTol = 1e-6;

}  // namespace

TEST(Autodiff, SigmoidAtZeroIsHalf) {
  ad::Graph g;
  EXPECT_EQ(ad::sigmoid(g.constant(Tensor::scalar(0.0))).item(), 0.5);
}

TEST(Autodiff, LogSigmoidAtZeroIsMinusLn2) {
  ad::Graph g;
  EXPECT_NEAR(ad::log_sigmoid(g.constant(Tensor::scalar(0.0))).item(), -std::numbers::ln2, 1e-15);
}

TEST(Autodiff, IdentityMatmul) {
  Rng rng(3);
  ad::Graph g;
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye(i, i) = 1.0;
  const Tensor a = random_tensor({3, 5}, rng);
  EXPECT_EQ(ad::matmul(g.constant(eye), g.constant(a)).value(), a);
}

TEST(Autodiff, ShapeMismatchNamesShapes) {
  ad::Graph g;
  auto a = g.constant(Tensor({2, 3}));
  auto b = g.constant(Tensor({2, 3}));
  try {
    ad::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
  EXPECT_THROW(ad::add(g.constant(Tensor({2, 3})), g.constant(Tensor({2}))), ShapeError);
}

TEST(Autodiff, LogRejectsNonPositive) {
  ad::Graph g;
  EXPECT_THROW(ad::log(g.constant(Tensor::vector({1.0, 0.0}))), NumericError);
}

TEST(Autodiff, NonScalarRootRejected) {
  ParameterStore p;
  p.add("w", Tensor::vector({1.0, 2.0}));
  ad::Graph g;
  auto w = g.parameter(p, 0);
  EXPECT_THROW(g.backward(w), ShapeError);
}

TEST(Autodiff, SumGradientIsOnes) {
  ParameterStore p;
  Rng rng(5);
  p.add("theta", random_tensor({4, 3}, rng));
  ad::Graph g;
  g.backward(ad::sum(g.parameter(p, 0)));
  for (double v : p.grad(0).values()) EXPECT_EQ(v, 1.0);
}

TEST(Autodiff, HalfSquaredNormGradientIsTheta) {
  ParameterStore p;
  Rng rng(6);
  p.add("theta", random_tensor({7}, rng));
  ad::Graph g;
  auto t = g.parameter(p, 0);
  g.backward(ad::scale(ad::sum(ad::mul(t, t)), 0.5));
  for (std::size_t i = 0; i < 7; ++i) EXPECT_DOUBLE_EQ(p.grad(0)[i], p.value(0)[i]);
}

TEST(Autodiff, FanOutAccumulatesAndStoreIsNotCleared) {
  ParameterStore p;
  p.add("x", Tensor::vector({2.0}));
  {
    ad::Graph g;
    auto x = g.parameter(p, 0);
    g.backward(ad::sum(ad::add(ad::mul(x, x), x)));  // d/dx (x^2 + x) = 2x + 1
  }
  EXPECT_DOUBLE_EQ(p.grad(0)[0], 5.0);
  {
    ad::Graph g;
    g.backward(ad::sum(g.parameter(p, 0)));
  }
  EXPECT_DOUBLE_EQ(p.grad(0)[0], 6.0);
  p.zero_grad();
  EXPECT_EQ(p.grad(0)[0], 0.0);
}

TEST(Autodiff, DetachedParameterGetsZeroGradient) {
  ParameterStore p;
  p.add("used", Tensor::vector({1.0, 2.0}));
  p.add("unused", Tensor::vector({3.0}));
  ad::Graph g;
  auto used = g.parameter(p, 0);
  g.parameter(p, 1);
  g.backward(ad::sum(used));
  EXPECT_EQ(p.grad(1)[0], 0.0);
}

TEST(Autodiff, LinearityOfBackward) {
  Rng rng(11);
  ParameterStore p;
  p.add("a", random_tensor({3, 4}, rng));
  p.add("b", random_tensor({4, 2}, rng));
  auto l1 = [](ad::Graph& g, ParameterStore& s) {
    return ad::sum(ad::tanh(ad::matmul(g.parameter(s, 0), g.parameter(s, 1))));
  };
  auto l2 = [](ad::Graph& g, ParameterStore& s) {
    auto a = g.parameter(s, 0);
    return ad::mean(ad::log_sigmoid(ad::mul(a, a)));
  };
  const double ca = 0.7, cb = -2.5;
  auto g1 = shapo::testing::analytic_gradient(p, [&](ad::Graph& g) { return l1(g, p); });
  auto g2 = shapo::testing::analytic_gradient(p, [&](ad::Graph& g) { return l2(g, p); });
  auto gc = shapo::testing::analytic_gradient(
      p, [&](ad::Graph& g) { return ad::add(ad::scale(l1(g, p), ca), ad::scale(l2(g, p), cb)); });
  for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], ca * g1[i] + cb * g2[i], 1e-12);
}

TEST(Autodiff, DeterministicValues) {
  Rng rng(12);
  const Tensor a = random_tensor({5, 6}, rng);
  auto run = [&] {
    ad::Graph g;
    auto x = g.constant(a);
    return ad::sum(ad::row_log_softmax(ad::matmul_bt(x, x))).item();
  };
  const double first = run();
  EXPECT_EQ(std::bit_cast<std::uint64_t>(first), std::bit_cast<std::uint64_t>(run()));
}

TEST_F(OpGradient, Matmul) {
  EXPECT_LT(op_gradient_error({m(3, 4), m(4, 5)}, [](auto& x) { return ad::matmul(x[0], x[1]); }), kOpTol);
}
TEST_F(OpGradient, MatmulTransposed) {
  EXPECT_LT(op_gradient_error({m(3, 4), m(5, 4)}, [](auto& x) { return ad::matmul_bt(x[0], x[1]); }), kOpTol);
}
TEST_F(OpGradient, AddSubMulWithBroadcast) {
  EXPECT_LT(op_gradient_error({m(3, 4), m(3, 4)}, [](auto& x) { return ad::add(x[0], x[1]); }), kOpTol);
  EXPECT_LT(op_gradient_error({m(3, 4), v(4)}, [](auto& x) { return ad::add(x[0], x[1]); }), kOpTol);
  EXPECT_LT(op_gradient_error({m(3, 4), v(1)}, [](auto& x) { return ad::sub(x[0], x[1]); }), kOpTol);
  EXPECT_LT(op_gradient_error({m(3, 4), m(3, 4)}, [](auto& x) { return ad::sub(x[0], x[1]); }), kOpTol);
  EXPECT_LT(op_gradient_error({m(3, 4), v(4)}, [](auto& x) { return ad::mul(x[0], x[1]); }), kOpTol);
  EXPECT_LT(op_gradient_error({m(3, 4), m(3, 4)}, [](auto& x) { return ad::mul(x[0], x[1]); }), kOpTol);
}
TEST_F(OpGradient, Scale) {
  EXPECT_LT(op_gradient_error({m(2, 3)}, [](auto& x) { return ad::scale(x[0], -1.7); }), kOpTol);
}
TEST_F(OpGradient, Softmaxes) {
  EXPECT_LT(op_gradient_error({m(3, 5)}, [](auto& x) { return ad::row_softmax(x[0]); }), kOpTol);
  EXPECT_LT(op_gradient_error({m(3, 5)}, [](auto& x) { return ad::row_log_softmax(x[0]); }), kOpTol);
}
TEST_F(OpGradient, PointwiseNonlinearities) {
  EXPECT_LT(op_gradient_error({m(3, 4, 2.0)}, [](auto& x) { return ad::sigmoid(x[0]); }), kOpTol);
  EXPECT_LT(op_gradient_error({m(3, 4, 2.0)}, [](auto& x) { return ad::log_sigmoid(x[0]); }), kOpTol);
  EXPECT_LT(op_gradient_error({m(3, 4)}, [](auto& x) { return ad::tanh(x[0]); }), kOpTol);
  EXPECT_LT(op_gradient_error({m(3, 4, 2.0)}, [](auto& x) { return ad::gelu(x[0]); }), kOpTol);
  EXPECT_LT(op_gradient_error({m(3, 4, 0.5)}, [](auto& x) { return ad::exp(x[0]); }), kOpTol);
  EXPECT_LT(op_gradient_error({m(3, 4, 0.5)}, [](auto& x) { return ad::log(ad::exp(x[0])); }), kOpTol);
}
TEST_F(OpGradient, ClampInteriorAndSaturated) {
  Tensor t = Tensor::vector({-2.0, -0.3, 0.1, 0.4, 3.0});
  EXPECT_LT(op_gradient_error({t}, [](auto& x) { return ad::clamp(x[0], -1.0, 1.0); }), kOpTol);
}
TEST_F(OpGradient, RmsNormalize) {
  EXPECT_LT(op_gradient_error({m(4, 6), v(6)}, [](auto& x) { return ad::rms_normalize(x[0], x[1]); }), kOpTol);
}
TEST_F(OpGradient, EmbeddingAndGather) {
  const std::vector<int> ids{3, 0, 3, 1};
  EXPECT_LT(op_gradient_error({m(5, 4)}, [&](auto& x) { return ad::embedding(x[0], ids); }), kOpTol);
  const std::vector<std::size_t> rows{0, 1, 2, 2}, cols{4, 0, 1, 1};
  EXPECT_LT(op_gradient_error({m(3, 5)}, [&](auto& x) { return ad::gather(ad::row_log_softmax(x[0]), rows, cols); }),
            kOpTol);
}
TEST_F(OpGradient, Reductions) {
  EXPECT_LT(op_gradient_error({m(3, 4)}, [](auto& x) { return ad::sum(ad::tanh(x[0])); }), kOpTol);
  EXPECT_LT(op_gradient_error({m(3, 4)}, [](auto& x) { return ad::mean(ad::tanh(x[0])); }), kOpTol);
  EXPECT_LT(op_gradient_error({v(6, 3.0)}, [](auto& x) { return ad::log_mean_exp(x[0]); }), kOpTol);
}
TEST_F(OpGradient, ConcatAndSlices) {
  EXPECT_LT(op_gradient_error({m(3, 2), m(3, 4)}, [](auto& x) { return ad::concat_cols({x[0], x[1]}); }), kOpTol);
  EXPECT_LT(op_gradient_error({v(1), v(3)}, [](auto& x) { return ad::concat({x[0], x[1]}); }), kOpTol);
  EXPECT_LT(op_gradient_error({m(3, 6)}, [](auto& x) { return ad::slice_cols(x[0], 2, 5); }), kOpTol);
  EXPECT_LT(op_gradient_error({m(5, 3)}, [](auto& x) { return ad::slice_rows(x[0], 1, 4); }), kOpTol);
}
TEST_F(OpGradient, CausalMaskThroughSoftmax) {
  EXPECT_LT(op_gradient_error({m(4, 4)}, [](auto& x) { return ad::row_softmax(ad::causal_mask_add(x[0])); }), kOpTol);
}

TEST(FiniteDifference, QuadraticAndSine) {
  ParameterStore p;
  p.add("theta", Tensor::scalar(3.0));
  auto g = finite_difference_gradient([](const ParameterStore& s) { return 0.5 * s.coordinate(0) * s.coordinate(0); },
                                      p, 1e-5);
  EXPECT_NEAR(g[0], 3.0, 1e-8);
  p.set_coordinate(0, 0.0);
  const double h = 1e-3;
  g = finite_difference_gradient([](const ParameterStore& s) { return std::sin(s.coordinate(0)); }, p, h);
  EXPECT_NEAR(g[0], 1.0, h * h);
}

TEST(FiniteDifference, RejectsNondeterministicLoss) {
  ParameterStore p;
  p.add("theta", Tensor::scalar(1.0));
  int calls = 0;
  EXPECT_THROW(finite_difference_gradient([&](const ParameterStore&) { return static_cast<double>(++calls); }, p, 1e-5),
               NumericError);
  EXPECT_THROW(finite_difference_gradient([](const ParameterStore&) { return 0.0; }, p, 0.0), ConfigError);
}

TEST(FiniteDifference, RestoresParametersExactly) {
  ParameterStore p;
  Rng rng(9);
  p.add("theta", random_tensor({10}, rng));
  const auto before = p.checksum();
  finite_difference_gradient([](const ParameterStore& s) { return std::cos(s.coordinate(3)) * s.coordinate(4); }, p,
                             1e-4);
  EXPECT_EQ(before, p.checksum());
}
