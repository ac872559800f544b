#pragma once

// Linear safety probe, neuron scoring and Top-K subspace masks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "shapo/data.hpp"
#include "shapo/error.hpp"
#include "shapo/model.hpp"
#include "shapo/random.hpp"
#include "shapo/tensor.hpp"

namespace shapo {

struct ProbeOptions {
  int epochs = 2000;
  double lr = 0.5;
  double heldout_fraction = 0.2;
  /// Stop once the gradient norm (in normalized feature space) drops below this.
  double tol = 1e-6;
  std::uint64_t seed = 0;
};

/// Tracks a loss sequence and fails after `patience` consecutive increases.
class DivergenceGuard {
 public:
  explicit DivergenceGuard(int patience = 10) : patience_(patience) {}

  void observe(double loss, const char* what = "loss") {
    detail::require<NumericError>(std::isfinite(loss), what, " became non-finite after ", count_, " updates");
    if (count_ > 0) increases_ = loss > prev_ ? increases_ + 1 : 0;
    detail::require<NumericError>(increases_ < patience_, what, " increased for ", patience_,
                                  " consecutive updates (now ", loss, "); lower the learning rate");
    prev_ = loss;
    ++count_;
  }

 private:
  int patience_;
  int increases_ = 0;
  int count_ = 0;
  double prev_ = 0.0;
};

struct ProbeDirection {
  Tensor w1, w0;  // class weights (safe, unsafe)
  double b1 = 0.0, b0 = 0.0;
  Tensor p;  // w1 - w0
  double bias = 0.0;
  double heldout_accuracy = 0.0;
  double train_accuracy = 0.0;
  int epochs_run = 0;
  std::uint64_t seed = 0;

  double logit(std::span<const double> h) const {
    detail::require<ShapeError>(h.size() == p.size(), "probe expects d_model=", p.size(), ", got ", h.size());
    double s = bias;
    for (std::size_t i = 0; i < h.size(); ++i) s += p[i] * h[i];
    return s;
  }
  int predict(std::span<const double> h) const { return logit(h) > 0.0 ? 1 : -1; }
};

/// Trains a 2-class softmax classifier on (h, y) by full-batch gradient
/// descent. Features are standardized per dimension for conditioning; the
/// returned weights are expressed in the original feature space.
inline ProbeDirection train_probe(const std::vector<Tensor>& reps, const std::vector<int>& labels,
                                  const ProbeOptions& opt = {}) {
  detail::require<ConfigError>(reps.size() == labels.size(), "probe: ", reps.size(), " representations but ",
                               labels.size(), " labels");
  detail::require<ConfigError>(!reps.empty(), "probe: no examples");
  detail::require<ConfigError>(opt.epochs >= 1 && opt.lr > 0.0, "probe: epochs and lr must be positive");
  detail::require<ConfigError>(opt.heldout_fraction >= 0.0 && opt.heldout_fraction < 1.0,
                               "probe: heldout_fraction must lie in [0, 1)");
  const std::size_t d = reps.front().size();
  for (std::size_t i = 0; i < reps.size(); ++i) {
    detail::require<ShapeError>(reps[i].size() == d, "probe: representation ", i, " has ", reps[i].size(),
                                " features, expected ", d);
    detail::require<ConfigError>(labels[i] == 1 || labels[i] == -1, "probe: labels must be +1 or -1");
  }
  const bool has_pos = std::count(labels.begin(), labels.end(), 1) > 0;
  const bool has_neg = std::count(labels.begin(), labels.end(), -1) > 0;
  detail::require<ConfigError>(has_pos && has_neg, "probe: training data contains a single class");

  std::vector<std::size_t> order(reps.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(opt.seed);
  rng.shuffle(order);
  std::size_t n_held = static_cast<std::size_t>(std::floor(opt.heldout_fraction * static_cast<double>(reps.size())));
  if (opt.heldout_fraction > 0.0 && n_held == 0 && reps.size() > 1) n_held = 1;
  const std::vector<std::size_t> held(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_held));
  const std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_held), order.end());

  // Per-feature standardization on the training split.
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (std::size_t i : train)
    for (std::size_t k = 0; k < d; ++k) mu[k] += reps[i][k];
  for (double& m : mu) m /= static_cast<double>(train.size());
  for (std::size_t i : train)
    for (std::size_t k = 0; k < d; ++k) sd[k] += (reps[i][k] - mu[k]) * (reps[i][k] - mu[k]);
  for (double& v : sd) v = std::sqrt(v / static_cast<double>(train.size())) + 1e-12;
  std::vector<Tensor> zs(reps.size(), Tensor({d}));
  for (std::size_t i = 0; i < reps.size(); ++i)
    for (std::size_t k = 0; k < d; ++k) zs[i][k] = (reps[i][k] - mu[k]) / sd[k];

  // Two-class softmax: class 1 = safe, class 0 = unsafe. The gradient of the
  // cross-entropy w.r.t. (w1, w0) is (+g, -g) with g = (sigma(z) - t) h.
  std::vector<double> w1(d, 0.0), w0(d, 0.0);
  double b1 = 0.0, b0 = 0.0;
  auto mean_loss = [&](std::vector<double>* gw, double* gb) {
    double loss = 0.0;
    if (gw) std::fill(gw->begin(), gw->end(), 0.0);
    if (gb) *gb = 0.0;
    for (std::size_t i : train) {
      double z = b1 - b0;
      for (std::size_t k = 0; k < d; ++k) z += (w1[k] - w0[k]) * zs[i][k];
      const double y = labels[i];
      loss -= ad::log_sigmoid(y * z);
      if (gw) {
        const double coeff = ad::sigmoid(z) - (y > 0 ? 1.0 : 0.0);
        for (std::size_t k = 0; k < d; ++k) (*gw)[k] += coeff * zs[i][k];
        *gb += coeff;
      }
    }
    const double inv = 1.0 / static_cast<double>(train.size());
    if (gw) {
      for (double& g : *gw) g *= inv;
      *gb *= inv;
    }
    return loss * inv;
  };

  std::vector<double> gw(d);
  double gb = 0.0;
  DivergenceGuard guard;
  guard.observe(mean_loss(nullptr, nullptr), "probe loss");
  int epoch = 0;
  for (; epoch < opt.epochs; ++epoch) {
    mean_loss(&gw, &gb);
    double gnorm = gb * gb;
    for (double g : gw) gnorm += g * g;
    if (std::sqrt(gnorm) < opt.tol) break;
    // Each class weight receives half of the logit gradient.
    for (std::size_t k = 0; k < d; ++k) {
      w1[k] -= opt.lr * 0.5 * gw[k];
      w0[k] += opt.lr * 0.5 * gw[k];
    }
    b1 -= opt.lr * 0.5 * gb;
    b0 += opt.lr * 0.5 * gb;
    guard.observe(mean_loss(nullptr, nullptr), "probe loss");
  }

  ProbeDirection out;
  out.w1 = Tensor({d});
  out.w0 = Tensor({d});
  out.p = Tensor({d});
  // Map back to raw features; the offset -<w, mu/sd> is split evenly
  // between the class biases.
  double shift = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    out.w1[k] = w1[k] / sd[k];
    out.w0[k] = w0[k] / sd[k];
    out.p[k] = out.w1[k] - out.w0[k];
    shift += out.p[k] * mu[k];
  }
  out.b1 = b1 - 0.5 * shift;
  out.b0 = b0 + 0.5 * shift;
  out.bias = out.b1 - out.b0;
  out.epochs_run = epoch;
  out.seed = opt.seed;
  auto accuracy = [&](const std::vector<std::size_t>& idx) {
    if (idx.empty()) return 0.0;
    std::size_t ok = 0;
    for (std::size_t i : idx) ok += out.predict(reps[i].values()) == labels[i];
    return static_cast<double>(ok) / static_cast<double>(idx.size());
  };
  out.train_accuracy = accuracy(train);
  out.heldout_accuracy = held.empty() ? out.train_accuracy : accuracy(held);
  return out;
}

/// Probe on residual representations of a frozen model.
inline ProbeDirection train_probe(const ModelConfig& cfg, const ParameterStore& theta,
                                  const std::vector<ProbeExample>& examples, Pooling pooling,
                                  const ProbeOptions& opt = {}) {
  std::vector<Tensor> reps;
  std::vector<int> labels;
  reps.reserve(examples.size());
  for (const auto& ex : examples) {
    reps.push_back(residual_stream_final(cfg, theta, ex.tokens, pooling));
    labels.push_back(ex.label);
  }
  return train_probe(reps, labels, opt);
}

// ---------------------------------------------------------------------------

enum class ScoreMetric { abs_inner, abs_cosine };

inline const char* to_string(ScoreMetric m) { return m == ScoreMetric::abs_inner ? "abs_inner" : "abs_cosine"; }

inline ScoreMetric parse_score_metric(const std::string& s) {
  if (s == "abs_inner") return ScoreMetric::abs_inner;
  if (s == "abs_cosine") return ScoreMetric::abs_cosine;
  detail::fail<ConfigError>("unknown score metric '", s, "' (expected abs_inner or abs_cosine)");
}

struct ScoreTable {
  ScoreMetric metric = ScoreMetric::abs_inner;
  std::vector<double> scores;
  std::vector<std::size_t> layer;  // per neuron

  std::size_t size() const noexcept { return scores.size(); }
};

inline ScoreTable similarity_scores(std::span<const double> p, const std::vector<Tensor>& vecs,
                                    ScoreMetric metric = ScoreMetric::abs_inner) {
  ScoreTable t;
  t.metric = metric;
  t.scores.reserve(vecs.size());
  const double pn = std::sqrt(std::inner_product(p.begin(), p.end(), p.begin(), 0.0));
  for (std::size_t j = 0; j < vecs.size(); ++j) {
    const auto v = vecs[j].values();
    detail::require<ShapeError>(v.size() == p.size(), "value vector ", j, " has length ", v.size(), ", probe has ",
                                p.size());
    const double inner = std::inner_product(v.begin(), v.end(), p.begin(), 0.0);
    double s = std::abs(inner);
    if (metric == ScoreMetric::abs_cosine) {
      const double vn = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
      s = vn == 0.0 || pn == 0.0 ? 0.0 : std::min(1.0, s / (vn * pn));
    }
    t.scores.push_back(s);
  }
  return t;
}

/// Scores every value vector of `theta` against the probe.
inline ScoreTable similarity_scores(const ProbeDirection& probe, const ParameterStore& theta,
                                    const ValueVectorIndex& index, ScoreMetric metric = ScoreMetric::abs_inner) {
  ScoreTable t = similarity_scores(probe.p.values(), value_vectors(theta, index), metric);
  for (const auto& e : index.entries) t.layer.push_back(e.layer);
  return t;
}

// ---------------------------------------------------------------------------

enum class MaskMode { none, random, uniform, selective };

inline const char* to_string(MaskMode m) {
  switch (m) {
    case MaskMode::none: return "none";
    case MaskMode::random: return "random";
    case MaskMode::uniform: return "uniform";
    case MaskMode::selective: return "selective";
  }
  return "?";
}

inline MaskMode parse_mask_mode(const std::string& s) {
  for (MaskMode m : {MaskMode::none, MaskMode::random, MaskMode::uniform, MaskMode::selective})
    if (s == to_string(m)) return m;
  detail::fail<ConfigError>("unknown mask mode '", s, "' (expected none, random, uniform or selective)");
}

struct SubspaceMask {
  MaskMode mode = MaskMode::none;
  double fraction = 0.0;
  ScoreMetric metric = ScoreMetric::abs_inner;
  std::vector<std::size_t> selected_neurons;
  /// Sorted, duplicate-free global coordinate ids.
  std::vector<std::size_t> coordinate_ids;
  std::string source_hash;

  bool empty() const noexcept { return coordinate_ids.empty(); }
  std::size_t size() const noexcept { return coordinate_ids.size(); }

  friend bool operator==(const SubspaceMask&, const SubspaceMask&) = default;
};

/// Number of neurons kept for a fraction r: ceil(r * n), at least 1.
inline std::size_t topk_count(double r, std::size_t n) {
  const auto k = static_cast<std::size_t>(std::ceil(r * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

/// Neuron ids ordered by descending score, ties to the smaller id.
inline std::vector<std::size_t> rank_neurons(const ScoreTable& scores) {
  std::vector<std::size_t> ids(scores.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(),
                   [&](std::size_t a, std::size_t b) { return scores.scores[a] > scores.scores[b]; });
  return ids;
}

inline std::vector<std::size_t> neuron_coordinates(const ValueVectorIndex& index,
                                                   const std::vector<std::size_t>& neurons) {
  std::vector<std::size_t> coords;
  coords.reserve(neurons.size() * index.length);
  for (std::size_t j : neurons) {
    const auto c = index.coordinates(j);
    coords.insert(coords.end(), c.begin(), c.end());
  }
  std::sort(coords.begin(), coords.end());
  coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
  return coords;
}

/// Mask over an explicit neuron set.
inline SubspaceMask mask_from_neurons(const ValueVectorIndex& index, std::vector<std::size_t> neurons,
                                      MaskMode mode = MaskMode::selective) {
  SubspaceMask m;
  m.mode = mode;
  m.fraction = index.size() ? static_cast<double>(neurons.size()) / static_cast<double>(index.size()) : 0.0;
  m.coordinate_ids = neuron_coordinates(index, neurons);
  m.selected_neurons = std::move(neurons);
  return m;
}

/// Builds the mask for a geometry-control mode. Selective keeps the
/// ceil(r * N) best-scoring neurons across all blocks; random draws the same
/// number of neurons uniformly; uniform covers every model coordinate; none
/// is empty.
inline SubspaceMask select_topk(const ScoreTable& scores, double r, MaskMode mode, std::uint64_t seed,
                                const ValueVectorIndex& index) {
  detail::require<ConfigError>(scores.size() > 0, "select_topk: empty score table");
  detail::require<ShapeError>(scores.size() == index.size(), "select_topk: ", scores.size(), " scores for ",
                              index.size(), " neurons");
  SubspaceMask m;
  m.mode = mode;
  m.metric = scores.metric;
  switch (mode) {
    case MaskMode::none:
      return m;
    case MaskMode::uniform:
      m.fraction = 1.0;
      m.coordinate_ids.resize(index.store_coordinates);
      std::iota(m.coordinate_ids.begin(), m.coordinate_ids.end(), 0);
      return m;
    case MaskMode::selective:
    case MaskMode::random:
      break;
  }
  detail::require<ConfigError>(r > 0.0 && r <= 1.0, "mask fraction must lie in (0, 1], got ", r);
  const std::size_t k = topk_count(r, scores.size());
  std::vector<std::size_t> chosen;
  if (mode == MaskMode::selective) {
    chosen = rank_neurons(scores);
    chosen.resize(k);
  } else {
    std::vector<std::size_t> ids(scores.size());
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(seed);
    rng.shuffle(ids);
    chosen.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(chosen.begin(), chosen.end());
  }
  m.fraction = r;
  m.coordinate_ids = neuron_coordinates(index, chosen);
  m.selected_neurons = std::move(chosen);
  return m;
}

/// Top-k vocabulary ids by <unembed_row, p>, descending, ties to the smaller id.
inline std::vector<int> probe_to_tokens(std::span<const double> p, const Tensor& unembedding, std::size_t k) {
  detail::require<ShapeError>(unembedding.rank() == 2 && unembedding.cols() == p.size(),
                              "probe_to_tokens: unembedding ", shape_string(unembedding.shape()),
                              " does not match probe length ", p.size());
  detail::require<ConfigError>(k <= unembedding.rows(), "probe_to_tokens: k=", k, " exceeds vocabulary size ",
                               unembedding.rows());
  ScoreTable t;
  for (std::size_t v = 0; v < unembedding.rows(); ++v) {
    const auto row = unembedding.row(v);
    t.scores.push_back(std::inner_product(row.begin(), row.end(), p.begin(), 0.0));
  }
  const auto ranked = rank_neurons(t);
  return std::vector<int>(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k));
}

// ---------------------------------------------------------------------------
// Mask manifest.

inline std::string serialize_mask(const SubspaceMask& m) {
  std::ostringstream os;
  os.precision(17);
  os << "shapo-mask\nversion 1\nmode " << to_string(m.mode) << "\nfraction " << m.fraction << "\nmetric "
     << to_string(m.metric) << "\nsource " << (m.source_hash.empty() ? "-" : m.source_hash) << "\nneurons";
  for (std::size_t j : m.selected_neurons) os << ' ' << j;
  os << "\nranges";
  for (std::size_t i = 0; i < m.coordinate_ids.size();) {
    std::size_t e = i;
    while (e + 1 < m.coordinate_ids.size() && m.coordinate_ids[e + 1] == m.coordinate_ids[e] + 1) ++e;
    os << ' ' << m.coordinate_ids[i] << '-' << m.coordinate_ids[e];
    i = e + 1;
  }
  os << "\nend\n";
  return os.str();
}

inline SubspaceMask parse_mask(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  auto next = [&](const std::string& key) {
    detail::require<FormatError>(static_cast<bool>(std::getline(is, line)), "mask file truncated before '", key, "'");
    detail::require<FormatError>(line.rfind(key, 0) == 0, "mask file: expected '", key, "', found '", line, "'");
    return line.size() > key.size() ? line.substr(key.size() + 1) : std::string();
  };
  detail::require<FormatError>(std::getline(is, line) && line == "shapo-mask", "not a mask file");
  detail::require<FormatError>(next("version") == "1", "unsupported mask file version");
  SubspaceMask m;
  try {
    m.mode = parse_mask_mode(next("mode"));
    m.fraction = std::stod(next("fraction"));
    m.metric = parse_score_metric(next("metric"));
  } catch (const ConfigError& e) {
    detail::fail<FormatError>("mask file: ", e.what());
  } catch (const std::exception&) {
    detail::fail<FormatError>("mask file: bad fraction");
  }
  m.source_hash = next("source");
  if (m.source_hash == "-") m.source_hash.clear();
  {
    std::istringstream ns(next("neurons"));
    std::size_t j;
    while (ns >> j) m.selected_neurons.push_back(j);
  }
  {
    std::istringstream rs(next("ranges"));
    std::string range;
    while (rs >> range) {
      const auto dash = range.find('-');
      detail::require<FormatError>(dash != std::string::npos, "mask file: bad range '", range, "'");
      const std::size_t a = std::stoull(range.substr(0, dash));
      const std::size_t b = std::stoull(range.substr(dash + 1));
      detail::require<FormatError>(a <= b && (m.coordinate_ids.empty() || a > m.coordinate_ids.back()),
                                   "mask file: ranges must be increasing and disjoint");
      for (std::size_t c = a; c <= b; ++c) m.coordinate_ids.push_back(c);
    }
  }
  next("end");
  return m;
}

}  // namespace shapo
