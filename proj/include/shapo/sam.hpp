#pragma once

// Two-pass sharpness-aware updates with the perturbation restricted to a
// subspace mask, fired every tau_sam steps.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "shapo/error.hpp"
#include "shapo/losses.hpp"
#include "shapo/parameter_store.hpp"
#include "shapo/probe.hpp"

namespace shapo {

enum class BaseUpdate { sgd, adam };

inline const char* to_string(BaseUpdate b) { return b == BaseUpdate::sgd ? "sgd" : "adam"; }

inline BaseUpdate parse_base_update(const std::string& s) {
  if (s == "sgd") return BaseUpdate::sgd;
  if (s == "adam") return BaseUpdate::adam;
  detail::fail<ConfigError>("unknown base_update '", s, "' (expected sgd or adam)");
}

struct ShapoConfig {
  /// Perturbation radius; unset means 0.05 * sqrt(|mask coordinates|).
  std::optional<double> rho;
  int tau_sam = 5;
  double lr = 3e-4;
  int total_steps = 2000;
  int batch_size = 32;
  MaskMode mask_mode = MaskMode::selective;
  double eps_num = 1e-12;
  BaseUpdate base_update = BaseUpdate::sgd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    detail::require<ConfigError>(tau_sam >= 1, "shapo: tau_sam must be >= 1, got ", tau_sam);
    detail::require<ConfigError>(lr > 0.0, "shapo: lr must be > 0, got ", lr);
    detail::require<ConfigError>(total_steps >= 0, "shapo: total_steps must be >= 0");
    detail::require<ConfigError>(batch_size >= 1, "shapo: batch_size must be >= 1");
    detail::require<ConfigError>(eps_num > 0.0, "shapo: eps_num must be > 0");
    if (rho && mask_mode != MaskMode::none)
      detail::require<ConfigError>(*rho > 0.0, "shapo: rho must be > 0 when mask_mode is ", to_string(mask_mode));
  }

  double resolve_rho(const SubspaceMask& mask) const {
    return rho ? *rho : 0.05 * std::sqrt(static_cast<double>(mask.size()));
  }

  friend bool operator==(const ShapoConfig&, const ShapoConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ShapoConfig& c) {
  j = {{"rho", c.rho ? nlohmann::json(*c.rho) : nlohmann::json(nullptr)},
       {"tau_sam", c.tau_sam},
       {"lr", c.lr},
       {"total_steps", c.total_steps},
       {"batch_size", c.batch_size},
       {"mask_mode", to_string(c.mask_mode)},
       {"eps_num", c.eps_num},
       {"base_update", to_string(c.base_update)},
       {"adam_beta1", c.adam_beta1},
       {"adam_beta2", c.adam_beta2},
       {"adam_eps", c.adam_eps}};
}

inline void from_json(const nlohmann::json& j, ShapoConfig& c) {
  c = ShapoConfig{};
  if (j.contains("rho") && !j.at("rho").is_null()) c.rho = j.at("rho").get<double>();
  c.tau_sam = j.value("tau_sam", c.tau_sam);
  c.lr = j.value("lr", c.lr);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.mask_mode = parse_mask_mode(j.value("mask_mode", std::string(to_string(c.mask_mode))));
  c.eps_num = j.value("eps_num", c.eps_num);
  c.base_update = parse_base_update(j.value("base_update", std::string("sgd")));
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
}

struct OptimizerState {
  std::uint64_t t = 0;
  std::vector<double> m, v;  // adam moments
  std::uint64_t sam_fired = 0;
};

struct StepMetrics {
  std::uint64_t step = 0;
  double loss = 0.0;
  bool sam_fired = false;
  double eps_norm = 0.0;
  double grad_norm = 0.0;
  /// L(theta + eps_S) when SAM fired, NaN otherwise.
  double perturbed_loss = std::nan("");
};

/// Gradient entries at the mask coordinates, in mask order.
inline std::vector<double> subspace_gradient(const LossFn& loss, ParameterStore& theta, const SubspaceMask& mask,
                                             double* loss_out = nullptr) {
  detail::require<ConfigError>(mask.mode == MaskMode::none || !mask.empty(), "subspace gradient: empty ",
                               to_string(mask.mode), " mask");
  theta.zero_grad();
  const double v = loss(theta, true);
  if (loss_out) *loss_out = v;
  return theta.gather_grad(mask.coordinate_ids);
}

/// eps_S = rho * g_S / (||g_S|| + eps_num).
inline std::vector<double> sam_perturbation(std::span<const double> g, double rho, double eps_num = 1e-12) {
  detail::require<ConfigError>(rho > 0.0, "sam perturbation: rho must be > 0, got ", rho);
  const double scale = rho / (norm2(g) + eps_num);
  std::vector<double> e(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) e[i] = scale * g[i];
  return e;
}

inline SubspaceMask build_mask_for_mode(const ScoreTable& scores, MaskMode mode, double r, std::uint64_t seed,
                                        const ValueVectorIndex& index) {
  return select_topk(scores, r, mode, seed, index);
}

namespace detail {

inline void apply_base_update(ParameterStore& theta, std::span<const double> grad, OptimizerState& state,
                              const ShapoConfig& cfg, std::uint64_t t) {
  std::vector<double> values = theta.flat_values();
  if (cfg.base_update == BaseUpdate::sgd) {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] -= cfg.lr * grad[i];
  } else {
    if (state.m.size() != values.size()) {
      state.m.assign(values.size(), 0.0);
      state.v.assign(values.size(), 0.0);
    }
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < values.size(); ++i) {
      state.m[i] = cfg.adam_beta1 * state.m[i] + (1.0 - cfg.adam_beta1) * grad[i];
      state.v[i] = cfg.adam_beta2 * state.v[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
      values[i] -= cfg.lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + cfg.adam_eps);
    }
  }
  theta.set_flat_values(values);
}

}  // namespace detail

/// One optimizer step. When t is a multiple of tau_sam and the mask is
/// active, the update uses the full gradient at theta + eps_S, where eps_S
/// lives on the mask coordinates only; theta is restored before the update.
inline StepMetrics shapo_step(const LossFn& loss, ParameterStore& theta, OptimizerState& state,
                              const SubspaceMask& mask, const ShapoConfig& cfg) {
  cfg.validate();
  const std::uint64_t t = state.t + 1;
  const bool fire = cfg.mask_mode != MaskMode::none && t % static_cast<std::uint64_t>(cfg.tau_sam) == 0;
  StepMetrics out;
  out.step = t;

  theta.zero_grad();
  out.loss = loss(theta, true);
  std::vector<double> grad;
  if (fire) {
    detail::require<ConfigError>(!mask.empty(), "shapo step: empty ", to_string(mask.mode), " mask");
    const std::vector<double> g_s = theta.gather_grad(mask.coordinate_ids);
    const std::vector<double> eps = sam_perturbation(g_s, cfg.resolve_rho(mask), cfg.eps_num);
    const std::vector<double> saved = theta.gather(mask.coordinate_ids);
    std::vector<double> shifted(saved.size());
    for (std::size_t i = 0; i < saved.size(); ++i) shifted[i] = saved[i] + eps[i];
    theta.scatter(mask.coordinate_ids, shifted);
    theta.zero_grad();
    try {
      out.perturbed_loss = loss(theta, true);
    } catch (...) {
      theta.scatter(mask.coordinate_ids, saved);
      throw;
    }
    grad = theta.flat_grad();
    theta.scatter(mask.coordinate_ids, saved);
    out.sam_fired = true;
    out.eps_norm = norm2(eps);
  } else {
    grad = theta.flat_grad();
  }
  out.grad_norm = norm2(grad);
  detail::require<NumericError>(std::isfinite(out.grad_norm) && std::isfinite(out.loss),
                                "shapo step ", t, ": non-finite loss or gradient; step aborted");
  detail::apply_base_update(theta, grad, state, cfg, t);
  state.t = t;
  state.sam_fired += out.sam_fired;
  return out;
}

}  // namespace shapo
