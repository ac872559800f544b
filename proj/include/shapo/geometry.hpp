#pragma once

// Loss-landscape diagnostics restricted to a coordinate mask: worst-case
// increase on a rho-ball, finite-difference Hessian-vector products, the top
// subspace eigenvalue, bypass-radius estimates and the concentration curve.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "shapo/error.hpp"
#include "shapo/losses.hpp"
#include "shapo/probe.hpp"
#include "shapo/random.hpp"
#include "shapo/sam.hpp"

namespace shapo {

namespace detail {

/// Restores the mask coordinates of theta on scope exit.
class MaskRestore {
 public:
  MaskRestore(ParameterStore& theta, std::span<const std::size_t> coords)
      : theta_(theta), coords_(coords), saved_(theta.gather(coords)) {}
  ~MaskRestore() { theta_.scatter(coords_, saved_); }
  MaskRestore(const MaskRestore&) = delete;
  MaskRestore& operator=(const MaskRestore&) = delete;

  const std::vector<double>& saved() const { return saved_; }

  /// theta_S = saved + offset.
  void shift(std::span<const double> offset) {
    std::vector<double> v(saved_.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = saved_[i] + offset[i];
    theta_.scatter(coords_, v);
  }

 private:
  ParameterStore& theta_;
  std::span<const std::size_t> coords_;
  std::vector<double> saved_;
};

inline std::vector<double> mask_gradient(const LossFn& loss, ParameterStore& theta, const SubspaceMask& mask,
                                         double* value = nullptr) {
  theta.zero_grad();
  const double v = loss(theta, true);
  if (value) *value = v;
  return theta.gather_grad(mask.coordinate_ids);
}

inline void require_mask(const SubspaceMask& mask, const char* what) {
  detail::require<ConfigError>(!mask.empty(), what, ": mask is empty");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Worst-case increase.

struct WorstCaseMethod {
  enum Kind { single_sam_step, ascent } kind = ascent;
  int steps = 10;

  static WorstCaseMethod sam() { return {single_sam_step, 1}; }
  static WorstCaseMethod ascent_steps(int k) { return {ascent, k}; }
  std::string describe() const {
    return kind == single_sam_step ? "single_sam_step" : "ascent(" + std::to_string(steps) + ")";
  }
};

struct WorstCase {
  double increase = 0.0;
  /// A non-finite loss was met; `increase` is the best finite value seen.
  bool nonfinite = false;
};

/// Estimates max_{||eps|| <= rho, supp(eps) in mask} L(theta + eps) - L(theta).
/// Ascent takes normalized gradient steps of length rho, projects back onto
/// the ball, and returns the best visited value; its first iterate is the
/// single SAM step.
inline WorstCase worst_case_loss_increase(const LossFn& loss, ParameterStore& theta, const SubspaceMask& mask,
                                          double rho, WorstCaseMethod method = {}) {
  detail::require<ConfigError>(rho >= 0.0, "worst-case increase: rho must be >= 0, got ", rho);
  detail::require<ConfigError>(method.steps >= 1, "worst-case increase: ascent needs >= 1 step");
  WorstCase out;
  if (rho == 0.0 || mask.empty()) return out;
  detail::MaskRestore restore(theta, mask.coordinate_ids);
  double base;
  std::vector<double> g = detail::mask_gradient(loss, theta, mask, &base);
  detail::require<NumericError>(std::isfinite(base), "worst-case increase: non-finite loss at theta");
  std::vector<double> eps(g.size(), 0.0);
  const int steps = method.kind == WorstCaseMethod::single_sam_step ? 1 : method.steps;
  for (int k = 0; k < steps; ++k) {
    if (k == 0) {
      eps = sam_perturbation(g, rho);
    } else {
      const double gn = norm2(g);
      if (!(gn > 0.0) || !std::isfinite(gn)) break;
      for (std::size_t i = 0; i < eps.size(); ++i) eps[i] += rho * g[i] / gn;
      const double en = norm2(eps);
      if (en > rho)
        for (double& e : eps) e *= rho / en;
    }
    restore.shift(eps);
    double value;
    if (k + 1 < steps) {
      g = detail::mask_gradient(loss, theta, mask, &value);
    } else {
      value = loss(theta, false);
    }
    if (!std::isfinite(value)) {
      out.nonfinite = true;
      break;
    }
    out.increase = std::max(out.increase, value - base);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Curvature.

/// Default finite-difference step 1e-4 * (1 + ||theta_S||_inf).
inline double default_fd_step(const ParameterStore& theta, const SubspaceMask& mask) {
  double m = 0.0;
  for (double x : theta.gather(mask.coordinate_ids)) m = std::max(m, std::abs(x));
  return 1e-4 * (1.0 + m);
}

/// H_S v by central differences of the subspace gradient along v/||v||,
/// rescaled by ||v|| (so the result is linear in v).
inline std::vector<double> hvp(const LossFn& loss, ParameterStore& theta, const SubspaceMask& mask,
                               std::span<const double> v, std::optional<double> h_fd = std::nullopt) {
  detail::require_mask(mask, "hvp");
  detail::require<ShapeError>(v.size() == mask.size(), "hvp: direction has ", v.size(), " entries, mask has ",
                              mask.size());
  const double h = h_fd ? *h_fd : default_fd_step(theta, mask);
  detail::require<ConfigError>(h > 0.0, "hvp: h_fd must be > 0");
  const double vn = norm2(v);
  std::vector<double> out(v.size(), 0.0);
  if (vn == 0.0) return out;
  detail::MaskRestore restore(theta, mask.coordinate_ids);
  std::vector<double> step(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) step[i] = h * v[i] / vn;
  restore.shift(step);
  const auto gp = detail::mask_gradient(loss, theta, mask);
  for (double& s : step) s = -s;
  restore.shift(step);
  const auto gm = detail::mask_gradient(loss, theta, mask);
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = vn * (gp[i] - gm[i]) / (2.0 * h);
    detail::require<NumericError>(std::isfinite(out[i]), "hvp: non-finite gradient");
  }
  return out;
}

struct EigenOptions {
  int iters = 100;
  double tol = 1e-6;
  /// Convergence also requires ||H v - lambda v|| <= residual_tol.
  double residual_tol = 1e-4;
  std::uint64_t seed = 0;
  std::optional<double> h_fd;
};

struct EigenEstimate {
  double value = 0.0;
  /// ||H v - lambda v|| at the final unit v.
  double residual = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> vector;
};

/// Power iteration on H_S: converges to the eigenvalue of largest magnitude;
/// the reported value is the Rayleigh quotient, so its sign is kept. Stops
/// once the relative change of the quotient is below tol and the residual
/// is below residual_tol, or at the iteration cap (converged = false).
inline EigenEstimate lambda_max_subspace(const LossFn& loss, ParameterStore& theta, const SubspaceMask& mask,
                                         const EigenOptions& opt = {}) {
  detail::require_mask(mask, "lambda_max_subspace");
  detail::require<ConfigError>(opt.iters >= 1 && opt.tol > 0.0, "lambda_max_subspace: bad iteration options");
  const std::size_t n = mask.size();
  Rng rng(opt.seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  double vn = norm2(v);
  for (double& x : v) x /= vn;

  EigenEstimate out;
  std::vector<double> hv = hvp(loss, theta, mask, v, opt.h_fd);
  double lambda = dot(v, hv);
  for (int it = 1; it <= opt.iters; ++it) {
    out.iterations = it;
    const double hn = norm2(hv);
    if (hn == 0.0) {
      lambda = 0.0;
      out.converged = true;
      break;
    }
    for (std::size_t i = 0; i < n; ++i) v[i] = hv[i] / hn;
    hv = hvp(loss, theta, mask, v, opt.h_fd);
    const double next = dot(v, hv);
    double r2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) r2 += (hv[i] - next * v[i]) * (hv[i] - next * v[i]);
    const bool done = std::abs(next - lambda) <= opt.tol * std::max(std::abs(next), 1e-300) &&
                      std::sqrt(r2) <= opt.residual_tol;
    lambda = next;
    if (done) {
      out.converged = true;
      break;
    }
  }
  out.value = lambda;
  double r2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) r2 += (hv[i] - lambda * v[i]) * (hv[i] - lambda * v[i]);
  out.residual = std::sqrt(r2);
  out.vector = std::move(v);
  return out;
}

// ---------------------------------------------------------------------------
// Bypass radius.

constexpr double kLambdaFloor = 1e-8;

/// delta = sqrt(2 (tau_risk - L) / max(lambda, 1e-8)).
inline double predicted_bypass_delta(double loss, double tau_risk, double lambda_max) {
  detail::require<ConfigError>(tau_risk >= loss, "bypass boundary: tau_risk ", tau_risk,
                               " is below the current loss ", loss);
  return std::sqrt(2.0 * (tau_risk - loss) / std::max(lambda_max, kLambdaFloor));
}

struct BypassPrediction {
  double loss = 0.0;
  double tau_risk = 0.0;
  EigenEstimate lambda;
  double delta = 0.0;
};

inline BypassPrediction bypass_boundary(const LossFn& loss, ParameterStore& theta, const SubspaceMask& mask,
                                        double tau_risk, const EigenOptions& opt = {}) {
  BypassPrediction p;
  p.loss = loss(theta, false);
  p.tau_risk = tau_risk;
  detail::require<ConfigError>(tau_risk >= p.loss, "bypass boundary: tau_risk ", tau_risk,
                               " is below the current loss ", p.loss);
  p.lambda = lambda_max_subspace(loss, theta, mask, opt);
  p.delta = predicted_bypass_delta(p.loss, tau_risk, p.lambda.value);
  return p;
}

struct EmpiricalBypass {
  /// Smallest grid radius at which some probed direction exceeds tau_risk.
  std::optional<double> radius;
  int directions = 0;
};

/// Probes n random unit directions on the mask plus the normalized gradient
/// direction along an increasing radius grid.
inline EmpiricalBypass empirical_bypass_radius(const LossFn& loss, ParameterStore& theta, const SubspaceMask& mask,
                                               double tau_risk, int n_directions,
                                               const std::vector<double>& radius_grid, std::uint64_t seed = 0) {
  detail::require_mask(mask, "empirical_bypass_radius");
  detail::require<ConfigError>(n_directions >= 16, "empirical_bypass_radius: needs >= 16 directions, got ",
                               n_directions);
  detail::require<ConfigError>(!radius_grid.empty(), "empirical_bypass_radius: empty radius grid");
  for (std::size_t i = 1; i < radius_grid.size(); ++i)
    detail::require<ConfigError>(radius_grid[i] > radius_grid[i - 1], "empirical_bypass_radius: grid must increase");

  const std::size_t n = mask.size();
  std::vector<std::vector<double>> dirs;
  Rng rng(seed);
  for (int d = 0; d < n_directions; ++d) {
    std::vector<double> u(n);
    for (double& x : u) x = rng.normal();
    const double un = norm2(u);
    for (double& x : u) x /= un;
    dirs.push_back(std::move(u));
  }
  {
    std::vector<double> g = detail::mask_gradient(loss, theta, mask);
    const double gn = norm2(g);
    if (gn > 0.0 && std::isfinite(gn)) {
      for (double& x : g) x /= gn;
      dirs.push_back(std::move(g));
    }
  }

  EmpiricalBypass out;
  out.directions = static_cast<int>(dirs.size());
  detail::MaskRestore restore(theta, mask.coordinate_ids);
  std::size_t limit = radius_grid.size();  // first grid index known to exceed
  std::vector<double> step(n);
  for (const auto& u : dirs) {
    for (std::size_t r = 0; r < limit; ++r) {
      for (std::size_t i = 0; i < n; ++i) step[i] = radius_grid[r] * u[i];
      restore.shift(step);
      const double value = loss(theta, false);
      if (!(value <= tau_risk)) {
        limit = r;
        break;
      }
    }
  }
  if (limit < radius_grid.size()) out.radius = radius_grid[limit];
  return out;
}

/// n points spaced geometrically on [lo, hi].
inline std::vector<double> geometric_grid(double lo, double hi, std::size_t n) {
  detail::require<ConfigError>(lo > 0.0 && hi > lo && n >= 2, "geometric grid needs 0 < lo < hi and n >= 2");
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i)
    g[i] = lo * std::pow(hi / lo, static_cast<double>(i) / static_cast<double>(n - 1));
  return g;
}

// ---------------------------------------------------------------------------
// Concentration curve.

struct ConcentrationCurve {
  std::vector<std::size_t> k;
  std::vector<double> top_fraction;
  std::vector<double> random_mean;
  std::vector<double> random_sd;
  /// Unclamped per-K ratios before the running maximum.
  std::vector<double> top_raw;
  std::vector<double> random_raw_mean;
  double total = 0.0;
  std::size_t neurons = 0;
  double rho = 0.0;
  std::string methodology;

  /// Smallest grid K whose Top-K fraction reaches `level`, as a fraction of
  /// all neurons; nullopt if never reached.
  std::optional<double> crossing(double level) const {
    for (std::size_t i = 0; i < k.size(); ++i)
      if (top_fraction[i] >= level) return static_cast<double>(k[i]) / static_cast<double>(neurons);
    return std::nullopt;
  }

  std::string to_table() const {
    std::ostringstream os;
    os.precision(10);
    os << "K,k_fraction,top_fraction,random_mean,random_sd\n";
    for (std::size_t i = 0; i < k.size(); ++i)
      os << k[i] << ',' << static_cast<double>(k[i]) / static_cast<double>(neurons) << ',' << top_fraction[i] << ','
         << random_mean[i] << ',' << random_sd[i] << '\n';
    return os.str();
  }
};

/// Converts neuron fractions to counts with ceil rounding, keeping 0 as 0.
inline std::vector<std::size_t> k_grid_from_fractions(const std::vector<double>& fractions, std::size_t neurons) {
  std::vector<std::size_t> out;
  for (double f : fractions) out.push_back(f <= 0.0 ? 0 : topk_count(f, neurons));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// Fraction of the all-neuron worst-case increase captured by perturbing
/// only the Top-K (or a random K) neurons jointly. Fractions are clamped to
/// [0, 1] and made nondecreasing in K by a running maximum.
inline ConcentrationCurve concentration_curve(const LossFn& loss, ParameterStore& theta, const ScoreTable& scores,
                                              const ValueVectorIndex& index, double rho,
                                              const std::vector<std::size_t>& k_grid, int n_random_seeds,
                                              WorstCaseMethod method = WorstCaseMethod::ascent_steps(10),
                                              std::uint64_t seed = 0) {
  detail::require<ShapeError>(scores.size() == index.size(), "concentration curve: ", scores.size(),
                              " scores for ", index.size(), " neurons");
  detail::require<ConfigError>(n_random_seeds >= 1, "concentration curve: needs >= 1 random seed");
  ConcentrationCurve c;
  c.neurons = index.size();
  c.rho = rho;
  c.methodology = "joint mask per K; worst case = " + method.describe() + " at fixed rho; normalized by all neurons";
  std::vector<std::size_t> everyone(index.size());
  std::iota(everyone.begin(), everyone.end(), 0);
  c.total = worst_case_loss_increase(loss, theta, mask_from_neurons(index, everyone), rho, method).increase;
  detail::require<NumericError>(c.total > 1e-12, "concentration curve: all-neuron worst-case increase ", c.total,
                                " is below the numerical floor (no measurable sharpness)");
  const auto ranked = rank_neurons(scores);
  double top_run = 0.0, rand_run = 0.0;
  for (std::size_t K : k_grid) {
    detail::require<ConfigError>(K <= index.size(), "concentration curve: K=", K, " exceeds ", index.size(),
                                 " neurons");
    double top = 0.0, mean = 0.0, sd = 0.0;
    if (K == index.size()) {
      top = mean = 1.0;
    } else if (K > 0) {
      const std::vector<std::size_t> best(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(K));
      top = worst_case_loss_increase(loss, theta, mask_from_neurons(index, best), rho, method).increase / c.total;
      std::vector<double> r;
      for (int s = 0; s < n_random_seeds; ++s) {
        std::vector<std::size_t> ids = everyone;
        Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(s) * 1000003u + K));
        rng.shuffle(ids);
        ids.resize(K);
        std::sort(ids.begin(), ids.end());
        r.push_back(worst_case_loss_increase(loss, theta, mask_from_neurons(index, ids), rho, method).increase /
                    c.total);
      }
      for (double x : r) mean += x;
      mean /= static_cast<double>(r.size());
      for (double x : r) sd += (x - mean) * (x - mean);
      sd = r.size() > 1 ? std::sqrt(sd / static_cast<double>(r.size() - 1)) : 0.0;
    }
    c.k.push_back(K);
    c.top_raw.push_back(top);
    c.random_raw_mean.push_back(mean);
    top_run = std::max(top_run, std::clamp(top, 0.0, 1.0));
    rand_run = std::max(rand_run, std::clamp(mean, 0.0, 1.0));
    c.top_fraction.push_back(top_run);
    c.random_mean.push_back(rand_run);
    c.random_sd.push_back(sd);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Report.

struct GeometryReport {
  std::string checkpoint_hash;
  std::string mask_descriptor;
  std::vector<std::pair<double, double>> worst_case;  // (rho, increase)
  std::string worst_case_method;
  double rho = 0.0;
  EigenEstimate lambda;
  double sharpness = 0.0;
  double loss = 0.0;
  double tau_risk = 0.0;
  double predicted_delta = 0.0;
  std::optional<double> empirical_delta;
  int empirical_directions = 0;

  nlohmann::json to_json() const {
    nlohmann::json wc = nlohmann::json::array();
    for (const auto& [r, d] : worst_case) wc.push_back({{"rho", r}, {"increase", d}});
    return {{"version", 1},
            {"checkpoint_hash", checkpoint_hash},
            {"mask", mask_descriptor},
            {"worst_case_method", worst_case_method},
            {"worst_case_increase", wc},
            {"lambda_max_s",
             {{"value", lambda.value},
              {"residual", lambda.residual},
              {"iterations", lambda.iterations},
              {"converged", lambda.converged}}},
            {"rho", rho},
            {"sharpness", sharpness},
            {"loss", loss},
            {"tau_risk", tau_risk},
            {"predicted_bypass_delta", predicted_delta},
            {"empirical_bypass_delta", empirical_delta ? nlohmann::json(*empirical_delta) : nlohmann::json(nullptr)},
            {"empirical_directions", empirical_directions}};
  }
};

struct DiagnoseOptions {
  std::vector<double> rho_grid{0.01, 0.05, 0.1};
  double rho = 0.05;  // radius used for sharpness
  WorstCaseMethod method = WorstCaseMethod::ascent_steps(10);
  EigenOptions eigen;
  std::optional<double> tau_risk;  // default L + risk_margin
  double risk_margin = std::numbers::ln2;
  int n_directions = 16;
  std::vector<double> radius_grid = geometric_grid(1e-3, 1e3, 121);
  std::uint64_t seed = 0;
};

inline GeometryReport diagnose(const LossFn& loss, ParameterStore& theta, const SubspaceMask& mask,
                               const DiagnoseOptions& opt = {}) {
  GeometryReport r;
  r.checkpoint_hash = hex64(theta.checksum());
  r.mask_descriptor = std::string(to_string(mask.mode)) + " r=" + std::to_string(mask.fraction) + " coords=" +
                      std::to_string(mask.size());
  r.worst_case_method = opt.method.describe();
  for (double rho : opt.rho_grid) r.worst_case.emplace_back(rho, worst_case_loss_increase(loss, theta, mask, rho, opt.method).increase);
  const double L = loss(theta, false);
  r.loss = L;
  r.tau_risk = opt.tau_risk ? *opt.tau_risk : L + opt.risk_margin;
  const BypassPrediction p = bypass_boundary(loss, theta, mask, r.tau_risk, opt.eigen);
  r.lambda = p.lambda;
  r.rho = opt.rho;
  r.sharpness = std::max(0.0, 0.5 * opt.rho * opt.rho * p.lambda.value);
  r.predicted_delta = p.delta;
  const auto e = empirical_bypass_radius(loss, theta, mask, r.tau_risk, opt.n_directions, opt.radius_grid, opt.seed);
  r.empirical_delta = e.radius;
  r.empirical_directions = e.directions;
  return r;
}

// ---------------------------------------------------------------------------

/// Spearman rank correlation with average ranks for ties.
inline double spearman(std::span<const double> x, std::span<const double> y) {
  detail::require<ShapeError>(x.size() == y.size() && x.size() >= 2, "spearman: need two equal-length series");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = (n + 1) / 2;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - mx);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - mx) * (ry[i] - mx);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace shapo
