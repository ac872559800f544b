#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "shapo/geometry.hpp"
#include "test_util.hpp"

using namespace shapo;
using shapo::testing::Quadratic;

namespace {

SubspaceMask coords_mask(std::vector<std::size_t> c) {
  SubspaceMask m;
  m.mode = MaskMode::selective;
  m.coordinate_ids = std::move(c);
  return m;
}

SubspaceMask all_mask(std::size_t n) {
  std::vector<std::size_t> c(n);
  std::iota(c.begin(), c.end(), 0);
  return coords_mask(std::move(c));
}

double dense_lambda_max(const Quadratic& q, const std::vector<std::size_t>& coords) {
  const auto n = static_cast<Eigen::Index>(coords.size());
  Eigen::MatrixXd A(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) A(i, j) = q.A[coords[i]][coords[j]];
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
  return es.eigenvalues().maxCoeff();
}

/// Quadratic whose gradient at the stored point is c * (top eigenvector).
struct AlignedQuadratic {
  Quadratic q;
  std::vector<double> theta;
  double lambda = 0.0, gnorm = 0.0;
};

AlignedQuadratic aligned(std::size_t n, std::uint64_t seed, double c) {
  Rng rng(seed);
  AlignedQuadratic a;
  a.q = Quadratic::random_psd(n, rng, 0.0);
  Eigen::MatrixXd A(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) A(i, j) = a.q.A[i][j];
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
  const Eigen::Index top = static_cast<Eigen::Index>(n) - 1;
  a.lambda = es.eigenvalues()(top);
  a.theta.resize(n);
  for (double& x : a.theta) x = rng.normal();
  // b = c u - A theta so that grad = A theta + b = c u.
  const auto Ath = a.q.gradient(a.theta);
  for (std::size_t i = 0; i < n; ++i) a.q.b[i] = c * es.eigenvectors()(static_cast<Eigen::Index>(i), top) - Ath[i];
  a.gnorm = std::abs(c);
  return a;
}

}  // namespace

TEST(WorstCase, ZeroRadiusIsZero) {
  const Quadratic q = Quadratic::diagonal({1, 2}, {1, 1});
  ParameterStore p = q.store({0.3, 0.4});
  EXPECT_EQ(worst_case_loss_increase(q.loss(), p, all_mask(2), 0.0).increase, 0.0);
  EXPECT_THROW(worst_case_loss_increase(q.loss(), p, all_mask(2), -1.0), ConfigError);
}

TEST(WorstCase, AlignedQuadraticMatchesExpansion) {
  for (std::size_t n : {2u, 5u, 16u, 64u}) {
    const auto a = aligned(n, n, 0.7);
    ParameterStore p = a.q.store(a.theta);
    for (double rho : {1e-3, 0.05, 0.3}) {
      const double expect = rho * a.gnorm + 0.5 * rho * rho * a.lambda;
      EXPECT_NEAR(worst_case_loss_increase(a.q.loss(), p, all_mask(n), rho).increase, expect, 1e-6) << n;
    }
  }
}

TEST(WorstCase, AscentDominatesSingleStepAndRespectsBound) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Quadratic q = Quadratic::random_psd(8, rng);
    std::vector<double> x(8);
    for (double& v : x) v = rng.normal();
    ParameterStore p = q.store(x);
    const auto mask = coords_mask({0, 2, 3, 6});
    const double rho = 0.2;
    const double one = worst_case_loss_increase(q.loss(), p, mask, rho, WorstCaseMethod::sam()).increase;
    const double many = worst_case_loss_increase(q.loss(), p, mask, rho, WorstCaseMethod::ascent_steps(10)).increase;
    EXPECT_GE(many, one);
    const auto g = q.gradient(x);
    const double gs = std::sqrt(g[0] * g[0] + g[2] * g[2] + g[3] * g[3] + g[6] * g[6]);
    EXPECT_LE(many, rho * gs + 0.5 * rho * rho * dense_lambda_max(q, mask.coordinate_ids) + 1e-12);
  }
}

TEST(WorstCase, RestoresThetaAndFlagsNonFinite) {
  const Quadratic q = Quadratic::diagonal({1, 3}, {0.5, -0.2});
  ParameterStore p = q.store({0.1, 0.2});
  const auto before = p.checksum();
  worst_case_loss_increase(q.loss(), p, all_mask(2), 0.5);
  EXPECT_EQ(p.checksum(), before);
  LossFn cliff = [&](ParameterStore& s, bool g) {
    const double v = q.loss()(s, g);
    return s.coordinate(0) > 0.3 ? std::numeric_limits<double>::infinity() : v;
  };
  const auto w = worst_case_loss_increase(cliff, p, all_mask(2), 0.5);
  EXPECT_TRUE(w.nonfinite);
  EXPECT_TRUE(std::isfinite(w.increase));
  EXPECT_EQ(p.checksum(), before);
}

TEST(Hvp, DiagonalExample) {
  const Quadratic q = Quadratic::diagonal({1, 4});
  ParameterStore p = q.store({0.3, -0.7});
  const auto hv = hvp(q.loss(), p, all_mask(2), std::vector<double>{0, 1});
  EXPECT_NEAR(hv[0], 0.0, 1e-9);
  EXPECT_NEAR(hv[1], 4.0, 1e-9);
}

TEST(Hvp, MatchesDenseProductAndIsLinear) {
  Rng rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const Quadratic q = Quadratic::random_psd(5, rng);
    std::vector<double> x(5), v(5), w(5);
    for (double& t : x) t = rng.normal();
    for (double& t : v) t = rng.normal();
    for (double& t : w) t = rng.normal();
    const double vn = norm2(v);
    for (double& t : v) t /= vn;
    ParameterStore p = q.store(x);
    const auto before = p.checksum();
    const auto hv = hvp(q.loss(), p, all_mask(5), v, 1e-4);
    EXPECT_EQ(p.checksum(), before);
    std::vector<double> exact(5, 0.0);
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) exact[i] += q.A[i][j] * v[j];
    EXPECT_LT(max_relative_error(hv, exact, 1e-8), 1e-6);

    std::vector<double> comb(5);
    for (int i = 0; i < 5; ++i) comb[i] = 2.0 * v[i] - 0.5 * w[i];
    const auto hw = hvp(q.loss(), p, all_mask(5), w);
    const auto hc = hvp(q.loss(), p, all_mask(5), comb);
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(hc[i], 2.0 * hv[i] - 0.5 * hw[i], 1e-6);
  }
}

TEST(Hvp, RejectsBadInput) {
  const Quadratic q = Quadratic::diagonal({1, 4});
  ParameterStore p = q.store({0, 0});
  EXPECT_THROW(hvp(q.loss(), p, all_mask(2), std::vector<double>{1}), ShapeError);
  EXPECT_THROW(hvp(q.loss(), p, coords_mask({}), std::vector<double>{}), ConfigError);
  EXPECT_THROW(hvp(q.loss(), p, all_mask(2), std::vector<double>{1, 0}, 0.0), ConfigError);
  LossFn nan_grad = [](ParameterStore& s, bool g) {
    if (g) s.grad(0)[0] += std::nan("");
    return 0.0;
  };
  EXPECT_THROW(hvp(nan_grad, p, all_mask(2), std::vector<double>{1, 0}), NumericError);
}

TEST(LambdaMax, DiagonalAndRestriction) {
  const Quadratic q = Quadratic::diagonal({1, 4});
  ParameterStore p = q.store({0.2, 0.1});
  EXPECT_NEAR(lambda_max_subspace(q.loss(), p, all_mask(2)).value, 4.0, 1e-6);
  EXPECT_NEAR(lambda_max_subspace(q.loss(), p, coords_mask({0})).value, 1.0, 1e-6);
  const auto est = lambda_max_subspace(q.loss(), p, all_mask(2));
  EXPECT_TRUE(est.converged);
  EXPECT_LE(est.residual, 1e-4);
}

TEST(LambdaMax, RecoversNegativeSign) {
  const Quadratic q = Quadratic::diagonal({-3, 1});
  ParameterStore p = q.store({0.0, 0.0});
  EXPECT_NEAR(lambda_max_subspace(q.loss(), p, all_mask(2), {.iters = 500, .tol = 1e-12}).value, -3.0, 1e-6);
}

TEST(LambdaMax, MatchesDenseEigensolver) {
  Rng rng(21);
  for (std::size_t n : {2u, 3u, 8u, 16u, 32u, 64u}) {
    const Quadratic q = Quadratic::random_psd(n, rng);
    std::vector<double> x(n);
    for (double& t : x) t = rng.normal();
    ParameterStore p = q.store(x);
    const auto est = lambda_max_subspace(q.loss(), p, all_mask(n), {.iters = 20000, .tol = 1e-14, .seed = n});
    const double truth = dense_lambda_max(q, all_mask(n).coordinate_ids);
    EXPECT_LT(std::abs(est.value - truth) / truth, 1e-6) << "n=" << n;
  }
}

TEST(LambdaMax, RestrictionMonotonicity) {
  Rng rng(4);
  const Quadratic q = Quadratic::random_psd(10, rng);
  ParameterStore p = q.store(std::vector<double>(10, 0.1));
  const EigenOptions opt{.iters = 5000, .tol = 1e-13};
  const double sub = lambda_max_subspace(q.loss(), p, coords_mask({1, 4, 7}), opt).value;
  const double mid = lambda_max_subspace(q.loss(), p, coords_mask({1, 2, 4, 7, 9}), opt).value;
  const double all = lambda_max_subspace(q.loss(), p, all_mask(10), opt).value;
  EXPECT_LE(sub, mid + 1e-6);
  EXPECT_LE(mid, all + 1e-6);
}

TEST(Bypass, FormulaExamples) {
  EXPECT_EQ(predicted_bypass_delta(0.7, 0.7, 3.0), 0.0);
  EXPECT_DOUBLE_EQ(predicted_bypass_delta(1.0, 2.0, 2.0), 1.0);
  EXPECT_NEAR(predicted_bypass_delta(1.0, 2.0, 1.0) / predicted_bypass_delta(1.0, 2.0, 2.0), std::sqrt(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(predicted_bypass_delta(0.0, 1.0, 0.0), std::sqrt(2.0 / 1e-8));
  EXPECT_THROW(predicted_bypass_delta(1.0, 0.5, 1.0), ConfigError);
}

TEST(Bypass, QuadraticEmpiricalWithinFactorTwo) {
  const Quadratic q = Quadratic::diagonal({4, 1, 0.5});
  ParameterStore p = q.store({0, 0, 0});
  const auto mask = all_mask(3);
  const double tau = 0.5;
  const auto pred = bypass_boundary(q.loss(), p, mask, tau, {.iters = 1000, .tol = 1e-12});
  EXPECT_NEAR(pred.delta, 0.5, 1e-6);
  const auto grid = geometric_grid(1e-3, 1e2, 400);
  const auto emp = empirical_bypass_radius(q.loss(), p, mask, tau, 16, grid, 1);
  ASSERT_TRUE(emp.radius.has_value());
  EXPECT_GE(*emp.radius, pred.delta / 2);
  EXPECT_LE(*emp.radius, pred.delta * 2);
}

TEST(Bypass, EmpiricalMonotoneInThresholdAndNoExceedance) {
  Rng rng(6);
  const Quadratic q = Quadratic::random_psd(6, rng);
  ParameterStore p = q.store(std::vector<double>(6, 0.2));
  const auto mask = coords_mask({0, 1, 3, 5});
  const auto grid = geometric_grid(1e-3, 10, 80);
  const double L = q.loss()(p, false);
  std::optional<double> prev;
  for (double gap : {0.01, 0.1, 0.5, 2.0}) {
    const auto e = empirical_bypass_radius(q.loss(), p, mask, L + gap, 16, grid, 2);
    ASSERT_TRUE(e.radius.has_value());
    if (prev) {
      EXPECT_GE(*e.radius, *prev);
    }
    prev = e.radius;
    EXPECT_EQ(e.directions, 17);
  }
  const auto before = p.checksum();
  EXPECT_FALSE(empirical_bypass_radius(q.loss(), p, mask, 1e30, 16, grid, 2).radius.has_value());
  EXPECT_EQ(p.checksum(), before);
  EXPECT_THROW(empirical_bypass_radius(q.loss(), p, mask, L + 1, 8, grid, 2), ConfigError);
  EXPECT_THROW(empirical_bypass_radius(q.loss(), p, mask, L + 1, 16, {1.0, 0.5}, 2), ConfigError);
}

TEST(Concentration, NormalizationAndShape) {
  // 20 neurons of 2 coordinates; neurons 0-3 carry most of the curvature.
  std::vector<double> diag(40, 0.05);
  for (std::size_t c = 0; c < 8; ++c) diag[c] = 5.0;
  const Quadratic q = Quadratic::diagonal(diag, std::vector<double>(40, 0.01));
  ParameterStore p = q.store(std::vector<double>(40, 0.0));
  ValueVectorIndex idx;
  idx.length = 2;
  idx.store_coordinates = 40;
  ScoreTable scores;
  for (std::size_t j = 0; j < 20; ++j) {
    idx.entries.push_back({j, 0, 0, j, 2 * j});
    scores.scores.push_back(j < 4 ? 10.0 - j : 0.1);
  }
  const auto grid = k_grid_from_fractions({0.0, 0.05, 0.1, 0.2, 0.5, 1.0}, 20);
  EXPECT_EQ(grid, (std::vector<std::size_t>{0, 1, 2, 4, 10, 20}));
  const auto before = p.checksum();
  const auto c = concentration_curve(q.loss(), p, scores, idx, 0.5, grid, 5);
  EXPECT_EQ(p.checksum(), before);
  EXPECT_EQ(c.top_fraction.front(), 0.0);
  EXPECT_EQ(c.random_mean.front(), 0.0);
  EXPECT_EQ(c.top_fraction.back(), 1.0);
  EXPECT_EQ(c.random_mean.back(), 1.0);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    EXPECT_GE(c.top_fraction[i], c.random_mean[i]);
    EXPECT_GE(c.top_fraction[i], 0.0);
    EXPECT_LE(c.top_fraction[i], 1.0);
    if (i) {
      EXPECT_GE(c.top_fraction[i], c.top_fraction[i - 1]);
    }
  }
  EXPECT_GT(c.top_fraction[3], 0.8);
  // One high-curvature neuron already holds the top eigendirection.
  EXPECT_NEAR(*c.crossing(0.8), 0.05, 1e-12);
  EXPECT_NE(c.to_table().find("K,k_fraction,top_fraction"), std::string::npos);
}

TEST(Concentration, RejectsFlatLoss) {
  const Quadratic q = Quadratic::diagonal({0, 0});
  ParameterStore p = q.store({0, 0});
  ValueVectorIndex idx;
  idx.length = 1;
  idx.store_coordinates = 2;
  idx.entries = {{0, 0, 0, 0, 0}, {1, 0, 0, 1, 1}};
  ScoreTable s;
  s.scores = {1, 2};
  EXPECT_THROW(concentration_curve(q.loss(), p, s, idx, 0.1, {1, 2}, 2), NumericError);
}

TEST(Spearman, Examples) {
  const std::vector<double> a{1, 2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(spearman(a, std::vector<double>{2, 4, 6, 8, 100}), 1.0);
  EXPECT_DOUBLE_EQ(spearman(a, std::vector<double>{5, 4, 3, 2, 1}), -1.0);
  // d = (0, 0, 1, -1, 0): 1 - 6*2 / (5*24) = 0.9
  EXPECT_NEAR(spearman(a, std::vector<double>{1, 2, 4, 3, 5}), 0.9, 1e-15);
  EXPECT_NEAR(spearman(std::vector<double>{1, 2, 2, 3}, std::vector<double>{1, 2, 3, 4}), 0.9486832980505138, 1e-12);
  EXPECT_THROW(spearman(std::vector<double>{1}, std::vector<double>{1}), ShapeError);
}

TEST(Diagnose, ReportIsValidAndThetaUnchanged) {
  const ModelConfig cfg = shapo::testing::tiny_config();
  auto model = init_params(cfg);
  shapo::testing::randomize(model.params, 2, 0.2);
  const auto task = SafetyTaskSpec::make(16, 1, 0.1, 2, 4);
  const auto data = generate_preference_dataset(task, 3);
  ParameterStore ref = model.params;
  shapo::testing::randomize(ref, 3, 0.2);
  std::vector<std::size_t> idx{0, 1, 2};
  const auto batch = make_batch(data, idx, cfg, ref);
  const LossFn fn = make_loss_fn(cfg, batch, {});
  ScoreTable scores;
  for (std::size_t j = 0; j < model.values.size(); ++j) scores.scores.push_back(static_cast<double>(j % 5));
  const auto mask = select_topk(scores, 0.1, MaskMode::selective, 0, model.values);
  const auto before = model.params.checksum();
  DiagnoseOptions opt;
  opt.eigen.iters = 30;
  opt.radius_grid = geometric_grid(1e-2, 1e2, 40);
  const auto r = diagnose(fn, model.params, mask, opt);
  EXPECT_EQ(model.params.checksum(), before);
  for (const auto& [rho, inc] : r.worst_case) EXPECT_GE(inc, 0.0);
  EXPECT_GE(r.sharpness, 0.0);
  EXPECT_GE(r.predicted_delta, 0.0);
  EXPECT_TRUE(std::isfinite(r.predicted_delta));
  EXPECT_NEAR(r.tau_risk, r.loss + std::log(2.0), 1e-15);
  const auto j = r.to_json();
  EXPECT_EQ(j["version"], 1);
  EXPECT_EQ(j["checkpoint_hash"], hex64(before));
  EXPECT_TRUE(j.contains("empirical_bypass_delta"));
}
