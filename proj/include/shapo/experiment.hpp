#pragma once

// Config-driven pipeline: data, reference (SFT) training, probe, aligned
// training under any loss x geometry-control mode, evaluation and the
// experiment grids built on top of them.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "shapo/checkpoint.hpp"
#include "shapo/data.hpp"
#include "shapo/geometry.hpp"
#include "shapo/hash.hpp"
#include "shapo/losses.hpp"
#include "shapo/model.hpp"
#include "shapo/probe.hpp"
#include "shapo/sam.hpp"

namespace shapo {

// ---------------------------------------------------------------------------
// Configuration.

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_layers", c.n_layers},
       {"n_heads", c.n_heads},       {"mlp_hidden", c.mlp_hidden},   {"max_seq_len", c.max_seq_len},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.seed = j.value("seed", c.seed);
}

struct TaskSettings {
  double unsafe_fraction = 0.1;
  int response_min = 3;
  int response_max = 6;
  int n_train = 4000;
  int n_heldout = 200;
  int n_probe_per_class = 200;
  friend bool operator==(const TaskSettings&, const TaskSettings&) = default;
};

struct SftSettings {
  int steps = 1500;
  double lr = 3e-3;
  int batch_size = 32;
  /// Fraction of SFT examples trained on the unsafe (rejected) response, so
  /// that the reference model has unsafe behavior left for alignment to remove.
  double unsafe_mix = 0.0;
  friend bool operator==(const SftSettings&, const SftSettings&) = default;
};

struct ProbeSettings {
  ScoreMetric metric = ScoreMetric::abs_inner;
  double r = 0.01;
  Pooling pooling = Pooling::mean_response;
  int epochs = 2000;
  double lr = 0.5;
  friend bool operator==(const ProbeSettings&, const ProbeSettings&) = default;
};

struct EvalSettings {
  int n_prompts = 128;
  /// Periodic metrics cadence in steps (0 disables).
  int eval_every = 0;
  int lambda_every = 0;
  int lambda_iters = 20;
  /// Fixed batch of clean training pairs used by geometry diagnostics.
  int diag_batch = 32;
  /// Bypass diagnostics use tau_risk = L + risk_margin.
  double risk_margin = std::numbers::ln2;
  friend bool operator==(const EvalSettings&, const EvalSettings&) = default;
};

struct SweepSettings {
  std::vector<double> flip_rates{0.0, 0.1, 0.2, 0.4};
  std::vector<LossKind> kinds{LossKind::dpo, LossKind::reward_bce};
  std::vector<MaskMode> modes{MaskMode::none, MaskMode::selective};
  friend bool operator==(const SweepSettings&, const SweepSettings&) = default;
};

struct Figure1Settings {
  std::vector<double> fractions{0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0};
  int n_random = 5;
  double rho = 0.05;
  int ascent_steps = 10;
  friend bool operator==(const Figure1Settings&, const Figure1Settings&) = default;
};

struct ExperimentConfig {
  static constexpr int kVersion = 1;
  ModelConfig model;
  TaskSettings task;
  LossSpec loss;
  ShapoConfig shapo;
  ProbeSettings probe;
  SftSettings sft;
  double flip_rate = 0.0;
  EvalSettings eval;
  SweepSettings sweep;
  Figure1Settings figure1;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "runs";

  void validate() const {
    model.validate();
    loss.validate();
    shapo.validate();
    detail::require<ConfigError>(!seeds.empty(), "config: seeds must be nonempty");
    detail::require<ConfigError>(flip_rate >= 0.0 && flip_rate <= 1.0, "config: flip_rate must lie in [0, 1]");
    detail::require<ConfigError>(task.n_train >= 1 && task.n_heldout >= 1 && task.n_probe_per_class >= 1,
                                 "config: task sizes must be >= 1");
    detail::require<ConfigError>(sft.steps >= 0 && sft.lr > 0.0 && sft.batch_size >= 1 &&
                                     sft.unsafe_mix >= 0.0 && sft.unsafe_mix <= 1.0,
                                 "config: bad sft settings");
    detail::require<ConfigError>(probe.r > 0.0 && probe.r <= 1.0, "config: probe.r must lie in (0, 1]");
    detail::require<ConfigError>(eval.n_prompts >= 1 && eval.diag_batch >= 1 && eval.risk_margin >= 0.0,
                                 "config: bad eval settings");
    detail::require<ConfigError>(!sweep.flip_rates.empty() && !sweep.kinds.empty() && !sweep.modes.empty(),
                                 "config: sweep lists must be nonempty");
    for (double r : sweep.flip_rates)
      detail::require<ConfigError>(r >= 0.0 && r <= 1.0, "config: sweep flip rate ", r, " outside [0, 1]");
    detail::require<ConfigError>(!figure1.fractions.empty() && figure1.n_random >= 1 && figure1.rho > 0.0 &&
                                     figure1.ascent_steps >= 1,
                                 "config: bad figure1 settings");
    detail::require<ConfigError>(3 + 2 * task.response_max <= model.max_seq_len, "config: max_seq_len ",
                                 model.max_seq_len, " cannot hold prompt+response of length ",
                                 3 + 2 * task.response_max);
    task_spec(seeds.front()).validate();
  }

  SafetyTaskSpec task_spec(std::uint64_t seed) const {
    return SafetyTaskSpec::make(model.vocab_size, seed, task.unsafe_fraction, task.response_min, task.response_max);
  }

  nlohmann::json to_json() const {
    return {{"version", kVersion},
            {"model", model},
            {"task",
             {{"unsafe_fraction", task.unsafe_fraction},
              {"response_min", task.response_min},
              {"response_max", task.response_max},
              {"n_train", task.n_train},
              {"n_heldout", task.n_heldout},
              {"n_probe_per_class", task.n_probe_per_class}}},
            {"loss", loss},
            {"shapo", shapo},
            {"probe",
             {{"metric", to_string(probe.metric)},
              {"r", probe.r},
              {"pooling", to_string(probe.pooling)},
              {"epochs", probe.epochs},
              {"lr", probe.lr}}},
            {"sft",
             {{"steps", sft.steps},
              {"lr", sft.lr},
              {"batch_size", sft.batch_size},
              {"unsafe_mix", sft.unsafe_mix}}},
            {"flip_rate", flip_rate},
            {"eval",
             {{"n_prompts", eval.n_prompts},
              {"eval_every", eval.eval_every},
              {"lambda_every", eval.lambda_every},
              {"lambda_iters", eval.lambda_iters},
              {"diag_batch", eval.diag_batch},
              {"risk_margin", eval.risk_margin}}},
            {"sweep", sweep_json()},
            {"figure1",
             {{"fractions", figure1.fractions},
              {"n_random", figure1.n_random},
              {"rho", figure1.rho},
              {"ascent_steps", figure1.ascent_steps}}},
            {"seeds", seeds},
            {"output_dir", output_dir}};
  }

  nlohmann::json sweep_json() const {
    std::vector<std::string> k, m;
    for (auto x : sweep.kinds) k.push_back(to_string(x));
    for (auto x : sweep.modes) m.push_back(to_string(x));
    return {{"flip_rates", sweep.flip_rates}, {"kinds", k}, {"modes", m}};
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    try {
      detail::require<ConfigError>(j.value("version", 0) == kVersion, "config: unsupported version ",
                                   j.value("version", 0), " (expected ", kVersion, ")");
      if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
      if (j.contains("task")) {
        const auto& t = j.at("task");
        c.task.unsafe_fraction = t.value("unsafe_fraction", c.task.unsafe_fraction);
        c.task.response_min = t.value("response_min", c.task.response_min);
        c.task.response_max = t.value("response_max", c.task.response_max);
        c.task.n_train = t.value("n_train", c.task.n_train);
        c.task.n_heldout = t.value("n_heldout", c.task.n_heldout);
        c.task.n_probe_per_class = t.value("n_probe_per_class", c.task.n_probe_per_class);
      }
      if (j.contains("loss")) c.loss = j.at("loss").get<LossSpec>();
      if (j.contains("shapo")) c.shapo = j.at("shapo").get<ShapoConfig>();
      if (j.contains("probe")) {
        const auto& p = j.at("probe");
        c.probe.metric = parse_score_metric(p.value("metric", std::string("abs_inner")));
        c.probe.r = p.value("r", c.probe.r);
        const std::string pool = p.value("pooling", std::string(to_string(c.probe.pooling)));
        detail::require<ConfigError>(pool == "last_token" || pool == "mean_response", "config: unknown pooling '",
                                     pool, "'");
        c.probe.pooling = pool == "last_token" ? Pooling::last_token : Pooling::mean_response;
        c.probe.epochs = p.value("epochs", c.probe.epochs);
        c.probe.lr = p.value("lr", c.probe.lr);
      }
      if (j.contains("sft")) {
        const auto& s = j.at("sft");
        c.sft.steps = s.value("steps", c.sft.steps);
        c.sft.lr = s.value("lr", c.sft.lr);
        c.sft.batch_size = s.value("batch_size", c.sft.batch_size);
        c.sft.unsafe_mix = s.value("unsafe_mix", c.sft.unsafe_mix);
      }
      c.flip_rate = j.value("flip_rate", c.flip_rate);
      if (j.contains("eval")) {
        const auto& e = j.at("eval");
        c.eval.n_prompts = e.value("n_prompts", c.eval.n_prompts);
        c.eval.eval_every = e.value("eval_every", c.eval.eval_every);
        c.eval.lambda_every = e.value("lambda_every", c.eval.lambda_every);
        c.eval.lambda_iters = e.value("lambda_iters", c.eval.lambda_iters);
        c.eval.diag_batch = e.value("diag_batch", c.eval.diag_batch);
        c.eval.risk_margin = e.value("risk_margin", c.eval.risk_margin);
      }
      if (j.contains("sweep")) {
        const auto& w = j.at("sweep");
        c.sweep.flip_rates = w.value("flip_rates", c.sweep.flip_rates);
        if (w.contains("kinds")) {
          c.sweep.kinds.clear();
          for (const auto& k : w.at("kinds")) c.sweep.kinds.push_back(parse_loss_kind(k.get<std::string>()));
        }
        if (w.contains("modes")) {
          c.sweep.modes.clear();
          for (const auto& m : w.at("modes")) c.sweep.modes.push_back(parse_mask_mode(m.get<std::string>()));
        }
      }
      if (j.contains("figure1")) {
        const auto& f = j.at("figure1");
        c.figure1.fractions = f.value("fractions", c.figure1.fractions);
        c.figure1.n_random = f.value("n_random", c.figure1.n_random);
        c.figure1.rho = f.value("rho", c.figure1.rho);
        c.figure1.ascent_steps = f.value("ascent_steps", c.figure1.ascent_steps);
      }
      if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
      c.output_dir = j.value("output_dir", c.output_dir);
    } catch (const nlohmann::json::exception& e) {
      detail::fail<ConfigError>("config: ", e.what());
    }
    c.validate();
    return c;
  }

  /// Hash of everything that affects results (the output directory excluded).
  std::uint64_t hash() const {
    nlohmann::json j = to_json();
    j.erase("output_dir");
    return fnv1a(j.dump());
  }
};

inline ExperimentConfig load_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    detail::fail<ConfigError>("config ", path, ": ", e.what());
  }
  return ExperimentConfig::from_json(j);
}

/// Sub-seeds for the independent random streams of one experiment seed.
struct SeedStreams {
  static std::uint64_t model(std::uint64_t s) { return Rng::derive(s, 1); }
  static std::uint64_t sft(std::uint64_t s) { return Rng::derive(s, 2); }
  static std::uint64_t probe(std::uint64_t s) { return Rng::derive(s, 3); }
  static std::uint64_t random_mask(std::uint64_t s) { return Rng::derive(s, 4); }
  static std::uint64_t batches(std::uint64_t s) { return Rng::derive(s, 5); }
  static std::uint64_t flips(std::uint64_t s) { return Rng::derive(s, 6); }
  static std::uint64_t geometry(std::uint64_t s) { return Rng::derive(s, 7); }
};

// ---------------------------------------------------------------------------
// Data.

struct TaskData {
  SafetyTaskSpec spec;
  std::vector<PreferenceTriple> train;  // clean
  std::vector<PreferenceTriple> heldout;
  std::vector<ProbeExample> probe;
  std::vector<std::vector<int>> eval_in, eval_ood;
};

inline TaskData generate_task_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  TaskData d;
  d.spec = cfg.task_spec(seed);
  d.train = generate_preference_dataset(d.spec, static_cast<std::size_t>(cfg.task.n_train));
  d.heldout = generate_heldout_pairs(d.spec, static_cast<std::size_t>(cfg.task.n_heldout));
  d.probe = build_probe_set(d.spec, static_cast<std::size_t>(cfg.task.n_probe_per_class),
                            static_cast<std::size_t>(cfg.task.n_probe_per_class));
  d.eval_in = eval_prompt_suite(d.spec, static_cast<std::size_t>(cfg.eval.n_prompts), PromptFamily::in_dist);
  d.eval_ood = eval_prompt_suite(d.spec, static_cast<std::size_t>(cfg.eval.n_prompts), PromptFamily::ood_proxy);
  return d;
}

inline std::vector<PreferenceTriple> noisy_train(const ExperimentConfig& cfg, const TaskData& d, std::uint64_t seed,
                                                 std::optional<double> rate = std::nullopt) {
  return flip_labels(d.train, rate ? *rate : cfg.flip_rate, SeedStreams::flips(seed));
}

// ---------------------------------------------------------------------------
// Reference model.

/// Uniform minibatch order: consecutive shuffled passes over [0, n).
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed) : n_(n), batch_(std::min(batch, n)), rng_(seed) {
    detail::require<ConfigError>(n > 0, "batch sampler: empty dataset");
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    out.reserve(batch_);
    while (out.size() < batch_) {
      if (pos_ == order_.size()) {
        order_.resize(n_);
        std::iota(order_.begin(), order_.end(), 0);
        rng_.shuffle(order_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::size_t n_, batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

struct SftResult {
  ParameterStore params;
  ValueVectorIndex index;
  std::vector<double> losses;  // per-token NLL per step
};

/// SFT targets: the chosen response, or the rejected one for a seeded
/// unsafe_mix fraction of the training prompts.
inline std::vector<TokenSequence> sft_sequences(const ExperimentConfig& cfg, const TaskData& data, std::uint64_t seed) {
  Rng rng(Rng::derive(SeedStreams::sft(seed), 0x5f7));
  std::vector<TokenSequence> out;
  out.reserve(data.train.size());
  for (const auto& t : data.train)
    out.push_back(rng.uniform() < cfg.sft.unsafe_mix ? t.rejected_sequence() : t.chosen_sequence());
  return out;
}

/// Next-token likelihood on the SFT targets with Adam.
inline SftResult run_sft(const ExperimentConfig& cfg, const TaskData& data, std::uint64_t seed) {
  ModelConfig mc = cfg.model;
  mc.seed = SeedStreams::model(seed);
  InitializedModel init = init_params(mc);
  SftResult out{std::move(init.params), std::move(init.values), {}};
  ShapoConfig opt;
  opt.lr = cfg.sft.lr;
  opt.mask_mode = MaskMode::none;
  opt.base_update = BaseUpdate::adam;
  OptimizerState state;
  BatchSampler sampler(data.train.size(), static_cast<std::size_t>(cfg.sft.batch_size), SeedStreams::sft(seed));
  const SubspaceMask none;
  const auto seqs = sft_sequences(cfg, data, seed);
  for (int step = 0; step < cfg.sft.steps; ++step) {
    const auto idx = sampler.next();
    LossFn nll = [&](ParameterStore& theta, bool want_grad) {
      ad::Graph g;
      ModelGraph m(g, cfg.model, theta);
      std::vector<ad::Var> parts;
      std::size_t tokens = 0;
      for (std::size_t i : idx) {
        parts.push_back(m.sequence_logprob(seqs[i]));
        tokens += seqs[i].response_length();
      }
      const ad::Var loss = ad::scale(ad::sum(ad::concat(parts)), -1.0 / static_cast<double>(tokens));
      if (want_grad) g.backward(loss);
      return loss.item();
    };
    const StepMetrics m = shapo_step(nll, out.params, state, none, opt);
    out.losses.push_back(m.loss);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Probe and masks.

struct ProbeResult {
  ProbeDirection probe;
  ScoreTable scores;
};

inline ProbeResult fit_probe(const ExperimentConfig& cfg, const ParameterStore& reference, const ValueVectorIndex& index,
                             const TaskData& data, std::uint64_t seed) {
  ProbeResult r;
  r.probe = train_probe(cfg.model, reference, data.probe, cfg.probe.pooling,
                        {.epochs = cfg.probe.epochs, .lr = cfg.probe.lr, .seed = SeedStreams::probe(seed)});
  r.scores = similarity_scores(r.probe, reference, index, cfg.probe.metric);
  return r;
}

inline SubspaceMask mask_for(const ExperimentConfig& cfg, const ProbeResult& probe, const ValueVectorIndex& index,
                             MaskMode mode, std::uint64_t seed, const std::string& source_hash = {}) {
  SubspaceMask m = build_mask_for_mode(probe.scores, mode, cfg.probe.r, SeedStreams::random_mask(seed), index);
  m.metric = cfg.probe.metric;
  m.source_hash = source_hash;
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation.

/// Responses in this task are as long as the prompt's content.
inline int response_length_for(std::span<const int> prompt) { return static_cast<int>(prompt.size()) - 3; }

inline double asr_proxy(const ModelConfig& cfg, const ParameterStore& theta, const SafetyTaskSpec& spec,
                        const std::vector<std::vector<int>>& prompts) {
  detail::require<ConfigError>(!prompts.empty(), "asr_proxy: empty prompt suite");
  std::size_t unsafe = 0;
  for (const auto& p : prompts) {
    const TokenSequence s = generate(cfg, theta, p, response_length_for(p));
    unsafe += safety_oracle(s.response(), spec) == Safety::unsafe;
  }
  return static_cast<double>(unsafe) / static_cast<double>(prompts.size());
}

struct ReferenceTable {
  std::vector<double> chosen, rejected, targets;
};

inline ReferenceTable reference_table(const ModelConfig& cfg, const ParameterStore& reference,
                                      const std::vector<PreferenceTriple>& data, const SafetyTaskSpec& spec,
                                      double beta_r) {
  ReferenceTable t;
  const RewardModel R = programmatic_reward(spec);
  for (const auto& p : data) {
    t.chosen.push_back(sequence_logprob(cfg, reference, p.chosen_sequence()));
    t.rejected.push_back(sequence_logprob(cfg, reference, p.rejected_sequence()));
    t.targets.push_back(reward_soft_target(R, p.prompt, p.chosen, p.rejected, beta_r));
  }
  return t;
}

struct EvalSummary {
  double asr_in = 0.0;
  double asr_ood = 0.0;
  double pref_accuracy = 0.0;
  double mean_margin = 0.0;

  nlohmann::json to_json() const {
    return {{"asr_in", asr_in}, {"asr_ood", asr_ood}, {"pref_accuracy", pref_accuracy}, {"mean_margin", mean_margin}};
  }
};

/// Preference accuracy: fraction of held-out pairs with strictly positive margin.
inline std::pair<double, double> preference_accuracy(const ModelConfig& cfg, const ParameterStore& theta,
                                                     const std::vector<PreferenceTriple>& pairs,
                                                     const ReferenceTable& ref, double beta) {
  std::vector<std::size_t> idx(pairs.size());
  std::iota(idx.begin(), idx.end(), 0);
  const PreferenceBatch b = make_batch(pairs, idx, ref.chosen, ref.rejected);
  const auto m = pair_margins(cfg, theta, b, beta);
  std::size_t ok = 0;
  double sum = 0.0;
  for (double x : m) {
    ok += x > 0.0;
    sum += x;
  }
  return {static_cast<double>(ok) / static_cast<double>(m.size()), sum / static_cast<double>(m.size())};
}

/// Everything evaluation needs, held by value.
struct EvalContext {
  SafetyTaskSpec spec;
  std::vector<PreferenceTriple> heldout;
  std::vector<std::vector<int>> eval_in, eval_ood;
  ReferenceTable heldout_ref;
};

inline EvalContext make_eval_context(const ExperimentConfig& cfg, const ParameterStore& reference,
                                     const TaskData& data) {
  return {data.spec, data.heldout, data.eval_in, data.eval_ood,
          reference_table(cfg.model, reference, data.heldout, data.spec, cfg.loss.beta_r)};
}

inline EvalSummary evaluate(const ExperimentConfig& cfg, const ParameterStore& theta, const EvalContext& ctx) {
  EvalSummary s;
  s.asr_in = asr_proxy(cfg.model, theta, ctx.spec, ctx.eval_in);
  s.asr_ood = asr_proxy(cfg.model, theta, ctx.spec, ctx.eval_ood);
  std::tie(s.pref_accuracy, s.mean_margin) =
      preference_accuracy(cfg.model, theta, ctx.heldout, ctx.heldout_ref, cfg.loss.beta);
  return s;
}

// ---------------------------------------------------------------------------
// Aligned training.

struct MetricsRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  double margin = 0.0;
  bool sam_fired = false;
  double eps_norm = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
  double perturbed_loss = std::nan("");
  std::optional<double> lambda_max_s;
  std::optional<double> asr_proxy;
  std::optional<double> pref_accuracy;
};

inline constexpr const char* kMetricsHeader =
    "step,loss,margin,sam_fired,eps_norm,grad_norm,wall_ms,lambda_max_s,asr_proxy,pref_accuracy";

inline std::string metrics_csv(const std::vector<MetricsRow>& rows, std::uint64_t config_hash, bool with_wall = true) {
  std::ostringstream os;
  os.precision(17);
  os << "# shapo-metrics version 1 config " << hex64(config_hash) << '\n' << kMetricsHeader << '\n';
  auto opt = [&](const std::optional<double>& v) {
    if (v) os << *v;
  };
  for (const auto& r : rows) {
    os << r.step << ',' << r.loss << ',' << r.margin << ',' << (r.sam_fired ? 1 : 0) << ',' << r.eps_norm << ','
       << r.grad_norm << ',';
    if (with_wall) os << r.wall_ms;
    os << ',';
    opt(r.lambda_max_s);
    os << ',';
    opt(r.asr_proxy);
    os << ',';
    opt(r.pref_accuracy);
    os << '\n';
  }
  return os.str();
}

/// Fixed batch of clean training pairs for geometry diagnostics.
inline PreferenceBatch diagnostic_batch(const ExperimentConfig& cfg, const TaskData& data,
                                        const ParameterStore& reference) {
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg.eval.diag_batch), data.train.size());
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  const RewardModel R = programmatic_reward(data.spec);
  return make_batch(data.train, idx, cfg.model, reference, &R, cfg.loss.beta_r);
}

struct TrainResult {
  ParameterStore theta;
  std::vector<MetricsRow> rows;
  std::uint64_t sam_fired = 0;
};

using StepHook = std::function<void(const MetricsRow&, const ParameterStore&)>;

/// Runs cfg.shapo.total_steps optimizer steps from the reference model on
/// `train` with the configured loss and mask.
inline TrainResult run_alignment(const ExperimentConfig& cfg, const ParameterStore& reference,
                                 const std::vector<PreferenceTriple>& train, const ReferenceTable& ref,
                                 const SubspaceMask& mask, std::uint64_t seed, const EvalContext* eval = nullptr,
                                 const PreferenceBatch* diag = nullptr, const SubspaceMask* diag_mask = nullptr,
                                 const StepHook& hook = {}) {
  cfg.validate();
  detail::require<ConfigError>(cfg.shapo.mask_mode == MaskMode::none || !mask.empty(), "train: mask mode ",
                               to_string(cfg.shapo.mask_mode), " needs a nonempty mask");
  TrainResult out{reference, {}, 0};
  OptimizerState state;
  BatchSampler sampler(train.size(), static_cast<std::size_t>(cfg.shapo.batch_size), SeedStreams::batches(seed));
  for (int step = 1; step <= cfg.shapo.total_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto idx = sampler.next();
    const PreferenceBatch batch = make_batch(train, idx, ref.chosen, ref.rejected, ref.targets);
    std::vector<double> margins, first_margins;
    const LossFn inner = make_loss_fn(cfg.model, batch, cfg.loss, &margins);
    const LossFn fn = [&](ParameterStore& theta, bool want_grad) {
      const double v = inner(theta, want_grad);
      if (first_margins.empty()) first_margins = margins;
      return v;
    };
    const StepMetrics sm = shapo_step(fn, out.theta, state, mask, cfg.shapo);
    MetricsRow row;
    row.step = sm.step;
    row.loss = sm.loss;
    for (double m : first_margins) row.margin += m / static_cast<double>(first_margins.size());
    row.sam_fired = sm.sam_fired;
    row.eps_norm = sm.eps_norm;
    row.grad_norm = sm.grad_norm;
    row.perturbed_loss = sm.perturbed_loss;
    if (eval && cfg.eval.eval_every > 0 && step % cfg.eval.eval_every == 0) {
      row.asr_proxy = asr_proxy(cfg.model, out.theta, eval->spec, eval->eval_in);
      row.pref_accuracy =
          preference_accuracy(cfg.model, out.theta, eval->heldout, eval->heldout_ref, cfg.loss.beta).first;
    }
    if (diag && diag_mask && cfg.eval.lambda_every > 0 && step % cfg.eval.lambda_every == 0) {
      const LossFn dfn = make_loss_fn(cfg.model, *diag, cfg.loss);
      EigenOptions eo;
      eo.iters = cfg.eval.lambda_iters;
      eo.seed = SeedStreams::geometry(seed);
      row.lambda_max_s = lambda_max_subspace(dfn, out.theta, *diag_mask, eo).value;
    }
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (hook) hook(row, out.theta);
    out.rows.push_back(row);
  }
  out.sam_fired = state.sam_fired;
  return out;
}

// ---------------------------------------------------------------------------
// Per-seed artifacts shared by every run of an experiment.

struct SeedArtifacts {
  std::uint64_t seed = 0;
  TaskData data;
  SftResult sft;
  ProbeResult probe;
  EvalContext eval;
  PreferenceBatch diag;
};

// ---------------------------------------------------------------------------
// Provenance and persistence.

/// Hash of the settings that determine the reference model.
inline std::uint64_t reference_hash(const ExperimentConfig& cfg, std::uint64_t seed) {
  const nlohmann::json j = cfg.to_json();
  return fnv1a(nlohmann::json{{"model", j["model"]}, {"task", j["task"]}, {"sft", j["sft"]}, {"seed", seed}}.dump());
}

inline std::map<std::string, std::string> provenance_meta(const ExperimentConfig& cfg, const SafetyTaskSpec& spec,
                                                          std::uint64_t seed, const std::string& stage) {
  return {{"config_hash", hex64(cfg.hash())},
          {"task_hash", hex64(spec.hash())},
          {"reference_hash", hex64(reference_hash(cfg, seed))},
          {"seed", std::to_string(seed)},
          {"stage", stage}};
}

/// Rejects a checkpoint produced for a different task or model shape.
inline void check_provenance(const Checkpoint& ck, const ExperimentConfig& cfg, const SafetyTaskSpec& spec) {
  detail::require<ConfigError>(ck.config == cfg.model, "checkpoint model config does not match the experiment config");
  const auto it = ck.meta.find("task_hash");
  detail::require<ConfigError>(it != ck.meta.end(), "checkpoint has no task hash");
  detail::require<ConfigError>(it->second == hex64(spec.hash()), "checkpoint task hash ", it->second,
                               " does not match task hash ", hex64(spec.hash()));
}

inline std::string seed_dir(const ExperimentConfig& cfg, std::uint64_t seed) {
  return (std::filesystem::path(cfg.output_dir) / ("seed-" + std::to_string(seed))).string();
}

inline std::string rate_label(double r) {
  std::ostringstream os;
  os << r;
  return os.str();
}

inline std::string cell_dir(const ExperimentConfig& cfg, std::uint64_t seed, LossKind kind, MaskMode mode,
                            double flip_rate) {
  return (std::filesystem::path(seed_dir(cfg, seed)) /
          (std::string(to_string(kind)) + "-" + to_string(mode) + "-flip" + rate_label(flip_rate)))
      .string();
}

inline void save_params(const std::string& path, const ExperimentConfig& cfg, const ParameterStore& theta,
                        std::map<std::string, std::string> meta) {
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  save_checkpoint(path, Checkpoint{cfg.model, theta, std::move(meta), StorageType::f64});
}

inline std::string reference_path(const ExperimentConfig& cfg, std::uint64_t seed) {
  return (std::filesystem::path(seed_dir(cfg, seed)) / "reference.ckpt").string();
}

/// Loads the cached reference for (config, seed) if its hash matches,
/// otherwise trains and (when `persist`) saves it.
inline SftResult load_or_train_reference(const ExperimentConfig& cfg, const TaskData& data, std::uint64_t seed,
                                         bool persist) {
  const std::string path = reference_path(cfg, seed);
  if (persist && std::filesystem::exists(path)) {
    Checkpoint ck = load_checkpoint(path);
    const auto it = ck.meta.find("reference_hash");
    if (ck.config == cfg.model && it != ck.meta.end() && it->second == hex64(reference_hash(cfg, seed))) {
      SftResult r;
      r.index = build_value_index(cfg.model, ck.params);
      r.params = std::move(ck.params);
      return r;
    }
  }
  SftResult r = run_sft(cfg, data, seed);
  if (persist) save_params(path, cfg, r.params, provenance_meta(cfg, data.spec, seed, "reference"));
  return r;
}

inline SeedArtifacts prepare_seed(const ExperimentConfig& cfg, std::uint64_t seed, bool persist = false) {
  SeedArtifacts a;
  a.seed = seed;
  a.data = generate_task_data(cfg, seed);
  a.sft = load_or_train_reference(cfg, a.data, seed, persist);
  a.probe = fit_probe(cfg, a.sft.params, a.sft.index, a.data, seed);
  a.eval = make_eval_context(cfg, a.sft.params, a.data);
  a.diag = diagnostic_batch(cfg, a.data, a.sft.params);
  return a;
}

/// Loss on the fixed diagnostic batch (same objective as training).
inline LossFn diagnostic_loss(const ExperimentConfig& cfg, const SeedArtifacts& a) {
  return make_loss_fn(cfg.model, a.diag, cfg.loss);
}

struct RunOutcome {
  std::uint64_t seed = 0;
  LossKind kind = LossKind::dpo;
  MaskMode mode = MaskMode::none;
  double flip_rate = 0.0;
  TrainResult train;
  EvalSummary eval;
};

/// One aligned run for (loss kind, mask mode, flip rate) on shared artifacts.
inline RunOutcome run_cell(ExperimentConfig cfg, const SeedArtifacts& a, LossKind kind, MaskMode mode,
                           double flip_rate, const StepHook& hook = {}) {
  cfg.loss.kind = kind;
  cfg.shapo.mask_mode = mode;
  cfg.flip_rate = flip_rate;
  const auto train = noisy_train(cfg, a.data, a.seed, flip_rate);
  const ReferenceTable ref = reference_table(cfg.model, a.sft.params, train, a.data.spec, cfg.loss.beta_r);
  const SubspaceMask mask = mask_for(cfg, a.probe, a.sft.index, mode, a.seed);
  RunOutcome out;
  out.seed = a.seed;
  out.kind = kind;
  out.mode = mode;
  out.flip_rate = flip_rate;
  const SubspaceMask selective = mask_for(cfg, a.probe, a.sft.index, MaskMode::selective, a.seed);
  out.train = run_alignment(cfg, a.sft.params, train, ref, mask, a.seed, &a.eval, &a.diag, &selective, hook);
  out.eval = evaluate(cfg, out.train.theta, a.eval);
  return out;
}

// ---------------------------------------------------------------------------
// Parallel helper: runs fn(i) for i in [0, n) on up to `threads` workers.

inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}


// ---------------------------------------------------------------------------
// Run records and experiment grids.

struct RunRecord {
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  LossKind kind = LossKind::dpo;
  MaskMode mode = MaskMode::none;
  double flip_rate = 0.0;
  double rho = 0.0;
  int steps = 0;
  std::uint64_t sam_fired = 0;
  std::size_t mask_coordinates = 0;
  double final_loss = 0.0;
  std::uint64_t checkpoint_checksum = 0;
  EvalSummary eval;

  nlohmann::json to_json() const {
    return {{"version", 1},
            {"config_hash", hex64(config_hash)},
            {"seed", seed},
            {"kind", to_string(kind)},
            {"mode", to_string(mode)},
            {"flip_rate", flip_rate},
            {"rho", rho},
            {"steps", steps},
            {"sam_fired", sam_fired},
            {"mask_coordinates", mask_coordinates},
            {"final_loss", final_loss},
            {"checkpoint_checksum", hex64(checkpoint_checksum)},
            {"eval", eval.to_json()}};
  }
};

inline RunRecord make_record(const ExperimentConfig& cfg, const SeedArtifacts& a, const RunOutcome& r) {
  ExperimentConfig c = cfg;
  c.loss.kind = r.kind;
  c.shapo.mask_mode = r.mode;
  const SubspaceMask mask = mask_for(c, a.probe, a.sft.index, r.mode, a.seed);
  RunRecord rec;
  rec.config_hash = cfg.hash();
  rec.seed = a.seed;
  rec.kind = r.kind;
  rec.mode = r.mode;
  rec.flip_rate = r.flip_rate;
  rec.rho = r.mode == MaskMode::none ? 0.0 : c.shapo.resolve_rho(mask);
  rec.steps = static_cast<int>(r.train.rows.size());
  rec.sam_fired = r.train.sam_fired;
  rec.mask_coordinates = r.mode == MaskMode::none ? 0 : mask.size();
  rec.final_loss = r.train.rows.empty() ? std::nan("") : r.train.rows.back().loss;
  rec.checkpoint_checksum = r.train.theta.checksum();
  rec.eval = r.eval;
  return rec;
}

/// Writes metrics.csv, final.ckpt and record.json for one run.
inline RunRecord write_run(const ExperimentConfig& cfg, const SeedArtifacts& a, const RunOutcome& r) {
  const std::string dir = cell_dir(cfg, a.seed, r.kind, r.mode, r.flip_rate);
  std::filesystem::create_directories(dir);
  write_text(dir + "/metrics.csv", metrics_csv(r.train.rows, cfg.hash()));
  auto meta = provenance_meta(cfg, a.data.spec, a.seed, "aligned");
  meta["kind"] = to_string(r.kind);
  meta["mode"] = to_string(r.mode);
  meta["flip_rate"] = rate_label(r.flip_rate);
  save_params(dir + "/final.ckpt", cfg, r.train.theta, meta);
  const RunRecord rec = make_record(cfg, a, r);
  write_text(dir + "/record.json", rec.to_json().dump(2) + "\n");
  return rec;
}

struct GridCell {
  std::size_t seed_index = 0;
  LossKind kind = LossKind::dpo;
  MaskMode mode = MaskMode::none;
  double flip_rate = 0.0;
};

/// Runs every cell (in parallel up to `threads`) and returns records in
/// cell order. Throws if any cell is missing afterwards.
inline std::vector<RunRecord> run_grid(const ExperimentConfig& cfg, const std::vector<SeedArtifacts>& seeds,
                                       const std::vector<GridCell>& cells, int threads, bool persist) {
  std::vector<std::optional<RunRecord>> out(cells.size());
  parallel_for(cells.size(), threads, [&](std::size_t i) {
    const GridCell& c = cells[i];
    const SeedArtifacts& a = seeds.at(c.seed_index);
    const RunOutcome r = run_cell(cfg, a, c.kind, c.mode, c.flip_rate);
    out[i] = persist ? write_run(cfg, a, r) : make_record(cfg, a, r);
  });
  std::vector<RunRecord> records;
  for (std::size_t i = 0; i < out.size(); ++i) {
    detail::require<Error>(out[i].has_value(), "grid cell ", i, " produced no result");
    records.push_back(*out[i]);
  }
  return records;
}

inline std::vector<SeedArtifacts> prepare_seeds(const ExperimentConfig& cfg, int threads, bool persist) {
  std::vector<SeedArtifacts> out(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), threads, [&](std::size_t i) { out[i] = prepare_seed(cfg, cfg.seeds[i], persist); });
  return out;
}

inline std::string results_table(const ExperimentConfig& cfg, const std::vector<RunRecord>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << "# shapo-results version 1 config " << hex64(cfg.hash()) << '\n'
     << "flip_rate,kind,mode,seed,asr_in,asr_ood,pref_accuracy,mean_margin,final_loss,sam_fired\n";
  for (const auto& r : rows)
    os << r.flip_rate << ',' << to_string(r.kind) << ',' << to_string(r.mode) << ',' << r.seed << ','
       << r.eval.asr_in << ',' << r.eval.asr_ood << ',' << r.eval.pref_accuracy << ',' << r.eval.mean_margin << ','
       << r.final_loss << ',' << r.sam_fired << '\n';
  return os.str();
}

/// rates x kinds x modes x seeds, in that nesting order.
inline std::vector<GridCell> noise_sweep_cells(const ExperimentConfig& cfg) {
  std::vector<GridCell> cells;
  for (double rate : cfg.sweep.flip_rates)
    for (LossKind k : cfg.sweep.kinds)
      for (MaskMode m : cfg.sweep.modes)
        for (std::size_t s = 0; s < cfg.seeds.size(); ++s) cells.push_back({s, k, m, rate});
  return cells;
}

/// The four geometry-control modes for the configured loss and flip rate.
inline std::vector<GridCell> ablation_cells(const ExperimentConfig& cfg) {
  std::vector<GridCell> cells;
  for (MaskMode m : {MaskMode::none, MaskMode::random, MaskMode::uniform, MaskMode::selective})
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s) cells.push_back({s, cfg.loss.kind, m, cfg.flip_rate});
  return cells;
}

/// Mean of `metric` over records matching (kind, mode, rate).
inline double mean_over_seeds(const std::vector<RunRecord>& rows, LossKind kind, MaskMode mode, double rate,
                              double EvalSummary::*metric) {
  double s = 0.0;
  int n = 0;
  for (const auto& r : rows)
    if (r.kind == kind && r.mode == mode && r.flip_rate == rate) {
      s += r.eval.*metric;
      ++n;
    }
  detail::require<Error>(n > 0, "no results for ", to_string(kind), "/", to_string(mode), " at rate ", rate);
  return s / n;
}

/// Top-K vs Random-K worst-case concentration on the reference model.
inline ConcentrationCurve figure1_curve(const ExperimentConfig& cfg, const SeedArtifacts& a) {
  ParameterStore theta = a.sft.params;
  return concentration_curve(diagnostic_loss(cfg, a), theta, a.probe.scores, a.sft.index, cfg.figure1.rho,
                             k_grid_from_fractions(cfg.figure1.fractions, a.sft.index.size()), cfg.figure1.n_random,
                             WorstCaseMethod::ascent_steps(cfg.figure1.ascent_steps), SeedStreams::geometry(a.seed));
}

inline std::string figure1_summary(const ExperimentConfig& cfg, std::uint64_t seed, const ConcentrationCurve& c,
                                   double probe_accuracy) {
  std::ostringstream os;
  os << "config " << hex64(cfg.hash()) << "\nseed " << seed << "\nneurons " << c.neurons << "\nrho " << c.rho
     << "\nprobe_heldout_accuracy " << probe_accuracy << "\nmethodology " << c.methodology << "\n";
  const auto k80 = c.crossing(0.8);
  os << "top_k_fraction_reaching_0.8 " << (k80 ? rate_label(*k80) : std::string("never")) << "\n";
  return os.str();
}

inline DiagnoseOptions diagnose_options(const ExperimentConfig& cfg, const SubspaceMask& mask, std::uint64_t seed) {
  DiagnoseOptions opt;
  opt.rho = cfg.shapo.resolve_rho(mask);
  opt.rho_grid = {0.25 * opt.rho, 0.5 * opt.rho, opt.rho};
  opt.eigen.iters = std::max(cfg.eval.lambda_iters, 1);
  opt.eigen.seed = SeedStreams::geometry(seed);
  opt.seed = SeedStreams::geometry(seed) + 1;
  opt.risk_margin = cfg.eval.risk_margin;
  return opt;
}

}  // namespace shapo
