#pragma once

// Preference objectives: DPO and its data-robust variants, plus the
// reward-consistency BCE objective.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "shapo/autodiff.hpp"
#include "shapo/data.hpp"
#include "shapo/error.hpp"
#include "shapo/model.hpp"

namespace shapo {

enum class LossKind { dpo, ipo, cdpo, rdpo, drdpo, reward_bce };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::dpo: return "dpo";
    case LossKind::ipo: return "ipo";
    case LossKind::cdpo: return "cdpo";
    case LossKind::rdpo: return "rdpo";
    case LossKind::drdpo: return "drdpo";
    case LossKind::reward_bce: return "reward_bce";
  }
  return "?";
}

inline LossKind parse_loss_kind(const std::string& s) {
  for (LossKind k : {LossKind::dpo, LossKind::ipo, LossKind::cdpo, LossKind::rdpo, LossKind::drdpo,
                     LossKind::reward_bce})
    if (s == to_string(k)) return k;
  detail::fail<ConfigError>("unknown loss kind '", s, "'");
}

struct LossSpec {
  LossKind kind = LossKind::dpo;
  double beta = 0.1;
  double label_eps = 0.1;   // cdpo, rdpo
  double beta_prime = 1.0;  // drdpo
  double beta_r = 10.0;     // reward_bce
  /// reward_bce: use the per-token mean log-probability as the policy score.
  bool length_normalized = false;

  void validate() const {
    detail::require<ConfigError>(beta > 0.0, "loss: beta must be > 0, got ", beta);
    if (kind == LossKind::cdpo || kind == LossKind::rdpo)
      detail::require<ConfigError>(label_eps >= 0.0 && label_eps < 0.5, "loss: label_eps must lie in [0, 0.5), got ",
                                   label_eps);
    if (kind == LossKind::drdpo)
      detail::require<ConfigError>(beta_prime > 0.0, "loss: beta_prime must be > 0, got ", beta_prime);
    if (kind == LossKind::reward_bce)
      detail::require<ConfigError>(beta_r > 0.0, "loss: beta_r must be > 0, got ", beta_r);
  }

  friend bool operator==(const LossSpec&, const LossSpec&) = default;
};

inline void to_json(nlohmann::json& j, const LossSpec& s) {
  j = {{"kind", to_string(s.kind)}, {"beta", s.beta},     {"label_eps", s.label_eps},
       {"beta_prime", s.beta_prime}, {"beta_r", s.beta_r}, {"length_normalized", s.length_normalized}};
}

inline void from_json(const nlohmann::json& j, LossSpec& s) {
  s = LossSpec{};
  s.kind = parse_loss_kind(j.value("kind", std::string("dpo")));
  s.beta = j.value("beta", s.beta);
  s.label_eps = j.value("label_eps", s.label_eps);
  s.beta_prime = j.value("beta_prime", s.beta_prime);
  s.beta_r = j.value("beta_r", s.beta_r);
  s.length_normalized = j.value("length_normalized", s.length_normalized);
}

// ---------------------------------------------------------------------------
// Reward model.

/// R(y | x): higher is safer.
struct RewardModel {
  std::string name;
  std::function<double(std::span<const int> prompt, std::span<const int> response)> score;
};

/// R(y | x) = 1 - (unsafe tokens in y) / |y|; an empty response scores 1.
inline RewardModel programmatic_reward(const SafetyTaskSpec& spec) {
  return {"programmatic", [spec](std::span<const int>, std::span<const int> y) {
            if (y.empty()) return 1.0;
            std::size_t bad = 0;
            for (int t : y) bad += spec.is_unsafe(t);
            return 1.0 - static_cast<double>(bad) / static_cast<double>(y.size());
          }};
}

/// t = sigma(beta_r * (R(y^w|x) - R(y^l|x))).
inline double reward_soft_target(const RewardModel& R, std::span<const int> x, std::span<const int> yw,
                                 std::span<const int> yl, double beta_r) {
  return ad::sigmoid(beta_r * (R.score(x, yw) - R.score(x, yl)));
}

// ---------------------------------------------------------------------------
// Batches.

/// Preference pairs with frozen reference log-probabilities and (for
/// reward_bce) soft targets.
struct PreferenceBatch {
  std::vector<const PreferenceTriple*> pairs;
  std::vector<double> ref_chosen, ref_rejected;
  std::vector<double> targets;

  std::size_t size() const noexcept { return pairs.size(); }
};

inline PreferenceBatch make_batch(const std::vector<PreferenceTriple>& data, std::span<const std::size_t> indices,
                                  const ModelConfig& cfg, const ParameterStore& reference,
                                  const RewardModel* reward = nullptr, double beta_r = 10.0) {
  PreferenceBatch b;
  for (std::size_t i : indices) {
    const PreferenceTriple& t = data.at(i);
    b.pairs.push_back(&t);
    b.ref_chosen.push_back(sequence_logprob(cfg, reference, t.chosen_sequence()));
    b.ref_rejected.push_back(sequence_logprob(cfg, reference, t.rejected_sequence()));
    if (reward) b.targets.push_back(reward_soft_target(*reward, t.prompt, t.chosen, t.rejected, beta_r));
  }
  return b;
}

/// Same as make_batch but takes reference log-probs from a precomputed table.
inline PreferenceBatch make_batch(const std::vector<PreferenceTriple>& data, std::span<const std::size_t> indices,
                                  const std::vector<double>& ref_chosen, const std::vector<double>& ref_rejected,
                                  const std::vector<double>& targets = {}) {
  PreferenceBatch b;
  for (std::size_t i : indices) {
    b.pairs.push_back(&data.at(i));
    b.ref_chosen.push_back(ref_chosen.at(i));
    b.ref_rejected.push_back(ref_rejected.at(i));
    if (!targets.empty()) b.targets.push_back(targets.at(i));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Losses on a vector of margins (graph form).

namespace losses {

/// log-ratio gap g_i = (log pi(y^w) - log pi_ref(y^w)) - (log pi(y^l) - log pi_ref(y^l)).
inline ad::Var log_ratio_gaps(ModelGraph& m, const PreferenceBatch& b) {
  detail::require<ConfigError>(b.size() > 0, "loss: empty batch");
  ad::Graph& g = m.graph();
  std::vector<ad::Var> lw, lr;
  for (const auto* t : b.pairs) {
    lw.push_back(m.sequence_logprob(t->chosen_sequence()));
    lr.push_back(m.sequence_logprob(t->rejected_sequence()));
  }
  const ad::Var ref_w = g.constant(Tensor::vector(b.ref_chosen));
  const ad::Var ref_l = g.constant(Tensor::vector(b.ref_rejected));
  return ad::sub(ad::sub(ad::concat(lw), ref_w), ad::sub(ad::concat(lr), ref_l));
}

inline ad::Var dpo(ad::Var margins) { return ad::mean(ad::neg(ad::log_sigmoid(margins))); }

inline ad::Var ipo(ad::Var gaps, double beta) {
  const ad::Var off = gaps.graph->constant(Tensor::scalar(-1.0 / (2.0 * beta)));
  const ad::Var d = ad::add(gaps, off);
  return ad::mean(ad::mul(d, d));
}

inline ad::Var cdpo(ad::Var m, double eps) {
  const ad::Var pos = ad::neg(ad::log_sigmoid(m));
  const ad::Var negl = ad::neg(ad::log_sigmoid(ad::neg(m)));
  return ad::mean(ad::add(ad::scale(pos, 1.0 - eps), ad::scale(negl, eps)));
}

inline ad::Var rdpo(ad::Var m, double eps) {
  const ad::Var pos = ad::neg(ad::log_sigmoid(m));
  const ad::Var negl = ad::neg(ad::log_sigmoid(ad::neg(m)));
  return ad::mean(ad::scale(ad::sub(ad::scale(pos, 1.0 - eps), ad::scale(negl, eps)), 1.0 / (1.0 - 2.0 * eps)));
}

inline ad::Var drdpo(ad::Var m, double beta_prime) {
  return ad::scale(ad::log_mean_exp(ad::scale(ad::log_sigmoid(m), 1.0 / beta_prime)), -beta_prime);
}

/// Binary cross-entropy between soft targets t and sigma(score gap), with
/// the probability clamped to [1e-12, 1 - 1e-12].
inline ad::Var reward_bce(ad::Var score_gaps, const std::vector<double>& targets) {
  ad::Graph& g = *score_gaps.graph;
  detail::require<ShapeError>(targets.size() == score_gaps.value().size(), "reward_bce: ", targets.size(),
                              " targets for ", score_gaps.value().size(), " pairs");
  std::vector<double> one_minus(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) one_minus[i] = 1.0 - targets[i];
  const ad::Var p = ad::clamp(ad::sigmoid(score_gaps), 1e-12, 1.0 - 1e-12);
  const ad::Var q = ad::add(ad::neg(p), g.constant(Tensor::scalar(1.0)));
  const ad::Var ll = ad::add(ad::mul(g.constant(Tensor::vector(targets)), ad::log(p)),
                             ad::mul(g.constant(Tensor::vector(one_minus)), ad::log(q)));
  return ad::neg(ad::mean(ll));
}

}  // namespace losses

/// Builds the configured objective on a trainable model graph. When
/// `margins_out` is given it receives the per-pair margins beta * g_i.
inline ad::Var alignment_loss(ModelGraph& m, const PreferenceBatch& b, const LossSpec& spec,
                              std::vector<double>* margins_out = nullptr) {
  spec.validate();
  detail::require<ConfigError>(b.size() > 0, "loss: empty batch");
  if (spec.kind == LossKind::reward_bce) {
    detail::require<ConfigError>(b.targets.size() == b.size(), "reward_bce needs a soft target per pair");
    std::vector<ad::Var> gaps;
    if (margins_out) margins_out->clear();
    for (std::size_t i = 0; i < b.size(); ++i) {
      const auto* t = b.pairs[i];
      const ad::Var lw = m.sequence_logprob(t->chosen_sequence(), spec.length_normalized);
      const ad::Var ll = m.sequence_logprob(t->rejected_sequence(), spec.length_normalized);
      gaps.push_back(ad::sub(lw, ll));
      if (margins_out) {
        const double sw = spec.length_normalized ? static_cast<double>(t->chosen.size()) : 1.0;
        const double sl = spec.length_normalized ? static_cast<double>(t->rejected.size()) : 1.0;
        margins_out->push_back(spec.beta * ((lw.item() * sw - b.ref_chosen[i]) - (ll.item() * sl - b.ref_rejected[i])));
      }
    }
    return losses::reward_bce(ad::concat(gaps), b.targets);
  }
  const ad::Var gaps = losses::log_ratio_gaps(m, b);
  const ad::Var margins = ad::scale(gaps, spec.beta);
  if (margins_out) margins_out->assign(margins.value().values().begin(), margins.value().values().end());
  switch (spec.kind) {
    case LossKind::dpo: return losses::dpo(margins);
    case LossKind::ipo: return losses::ipo(gaps, spec.beta);
    case LossKind::cdpo: return losses::cdpo(margins, spec.label_eps);
    case LossKind::rdpo: return losses::rdpo(margins, spec.label_eps);
    case LossKind::drdpo: return losses::drdpo(margins, spec.beta_prime);
    case LossKind::reward_bce: break;
  }
  detail::fail<ConfigError>("unhandled loss kind");
}

/// Loss value and (when `want_grad`) gradient accumulated into theta's
/// gradient buffers. Callers zero gradients themselves.
using LossFn = std::function<double(ParameterStore& theta, bool want_grad)>;

/// `margins_out`, when given, is refreshed with the per-pair margins on every call.
inline LossFn make_loss_fn(const ModelConfig& cfg, const PreferenceBatch& batch, const LossSpec& spec,
                           std::vector<double>* margins_out = nullptr) {
  return [cfg, batch, spec, margins_out](ParameterStore& theta, bool want_grad) {
    ad::Graph g;
    double value;
    if (want_grad) {
      ModelGraph m(g, cfg, theta);
      const ad::Var loss = alignment_loss(m, batch, spec, margins_out);
      value = loss.item();
      g.backward(loss);
    } else {
      ModelGraph m(g, cfg, static_cast<const ParameterStore&>(theta), ModelGraph::frozen);
      value = alignment_loss(m, batch, spec, margins_out).item();
    }
    return value;
  };
}

/// Per-pair implicit-reward margins beta * g_i (no gradient).
inline std::vector<double> pair_margins(const ModelConfig& cfg, const ParameterStore& theta, const PreferenceBatch& b,
                                        double beta) {
  detail::require<ConfigError>(b.size() > 0, "margin: empty batch");
  std::vector<double> out;
  out.reserve(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double lw = sequence_logprob(cfg, theta, b.pairs[i]->chosen_sequence());
    const double ll = sequence_logprob(cfg, theta, b.pairs[i]->rejected_sequence());
    out.push_back(beta * ((lw - b.ref_chosen[i]) - (ll - b.ref_rejected[i])));
  }
  return out;
}

inline double batch_margin(const ModelConfig& cfg, const ParameterStore& theta, const PreferenceBatch& b,
                           double beta) {
  const auto m = pair_margins(cfg, theta, b, beta);
  double s = 0.0;
  for (double x : m) s += x;
  return s / static_cast<double>(m.size());
}

}  // namespace shapo
