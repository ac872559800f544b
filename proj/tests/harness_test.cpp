#include <filesystem>

#include <gtest/gtest.h>

#include "shapo/experiment.hpp"

namespace shapo {
namespace {

namespace fs = std::filesystem;

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.model.vocab_size = 16;
  c.model.d_model = 16;
  c.model.n_layers = 2;
  c.model.n_heads = 2;
  c.model.mlp_hidden = 32;
  c.model.max_seq_len = 11;
  c.task.response_max = 4;
  c.task.n_train = 48;
  c.task.n_heldout = 16;
  c.task.n_probe_per_class = 16;
  c.sft.steps = 30;
  c.sft.batch_size = 8;
  c.sft.unsafe_mix = 0.3;
  c.probe.epochs = 200;
  c.probe.pooling = Pooling::mean_response;
  c.shapo.total_steps = 6;
  c.shapo.batch_size = 4;
  c.shapo.lr = 0.05;
  c.shapo.rho = 0.1;
  c.shapo.tau_sam = 2;
  c.eval.n_prompts = 8;
  c.eval.diag_batch = 4;
  c.sweep.flip_rates = {0.0, 0.5};
  c.sweep.kinds = {LossKind::dpo, LossKind::reward_bce};
  c.sweep.modes = {MaskMode::none, MaskMode::selective};
  c.figure1.fractions = {0.05, 0.5, 1.0};
  c.figure1.n_random = 2;
  c.figure1.ascent_steps = 2;
  c.seeds = {3, 4};
  c.output_dir = (fs::temp_directory_path() / "shapo_harness_test").string();
  return c;
}

const SeedArtifacts& artifacts(std::size_t i) {
  static const std::vector<SeedArtifacts> a = prepare_seeds(small_config(), 1, false);
  return a.at(i);
}

std::string metrics_without_wall(const TrainResult& r, std::uint64_t hash) {
  return metrics_csv(r.rows, hash, false);
}

TEST(Config, JsonRoundTripAndHash) {
  ExperimentConfig c = small_config();
  c.loss.kind = LossKind::rdpo;
  c.shapo.mask_mode = MaskMode::random;
  c.probe.metric = ScoreMetric::abs_cosine;
  const ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  ExperimentConfig other = c;
  other.output_dir = "elsewhere";
  EXPECT_EQ(other.hash(), c.hash());
  other.flip_rate = 0.2;
  EXPECT_NE(other.hash(), c.hash());
}

TEST(Config, RejectsInvalidValues) {
  auto bad = [](auto mutate) {
    nlohmann::json j = small_config().to_json();
    mutate(j);
    return j;
  };
  EXPECT_THROW(ExperimentConfig::from_json(bad([](auto& j) { j["flip_rate"] = 1.5; })), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(bad([](auto& j) { j["seeds"] = nlohmann::json::array(); })), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(bad([](auto& j) { j["version"] = 2; })), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(bad([](auto& j) { j["model"]["max_seq_len"] = 8; })), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(bad([](auto& j) { j["loss"]["kind"] = "kto"; })), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(bad([](auto& j) { j["shapo"]["tau_sam"] = 0; })), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(bad([](auto& j) { j["probe"]["pooling"] = "max"; })), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json(bad([](auto& j) { j["sweep"]["modes"] = {"all"}; })), ConfigError);
}

TEST(Sampler, CoversEveryIndexPerPass) {
  BatchSampler s(10, 5, 1);
  std::vector<std::size_t> seen;
  for (int i = 0; i < 2; ++i)
    for (std::size_t x : s.next()) seen.push_back(x);
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(seen[i], i);
}

TEST(Sft, ReferencePrefersChosenOnHeldOutPairs) {
  ExperimentConfig c = small_config();
  c.sft.steps = 200;
  c.sft.unsafe_mix = 0.0;
  c.task.n_train = 200;
  c.task.n_heldout = 40;
  const TaskData d = generate_task_data(c, 1);
  const SftResult r = run_sft(c, d, 1);
  EXPECT_LT(r.losses.back(), r.losses.front());
  int better = 0;
  for (const auto& p : d.heldout)
    better += sequence_logprob(c.model, r.params, p.chosen_sequence()) >
              sequence_logprob(c.model, r.params, p.rejected_sequence());
  EXPECT_GT(better, static_cast<int>(d.heldout.size()) / 2);
  const SftResult again = run_sft(c, d, 1);
  EXPECT_EQ(again.params.checksum(), r.params.checksum());
}

TEST(Sft, UnsafeMixSelectsRejectedTargets) {
  ExperimentConfig c = small_config();
  c.task.n_train = 400;
  c.sft.unsafe_mix = 0.25;
  const TaskData d = generate_task_data(c, 2);
  const auto seqs = sft_sequences(c, d, 2);
  int unsafe = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const bool rejected = seqs[i] == d.train[i].rejected_sequence();
    EXPECT_TRUE(rejected || seqs[i] == d.train[i].chosen_sequence());
    unsafe += rejected;
  }
  EXPECT_NEAR(unsafe / 400.0, 0.25, 0.07);
}

/// Residual is the constant e at every position; the unembedding row of
/// `token` is e, every other row is zero, so greedy decoding emits `token`.
ParameterStore constant_emitter(const ModelConfig& cfg, int token) {
  ParameterStore p = init_params(cfg).params;
  for (std::size_t e = 0; e < p.size(); ++e) {
    const std::string& n = p.name(e);
    const bool zero = n == "pos_emb" || n == "unembed" || n.ends_with("attn.o") || n.ends_with("mlp.down");
    if (zero) std::fill(p.value(e).storage().begin(), p.value(e).storage().end(), 0.0);
  }
  Tensor& tok = p.value("tok_emb");
  Tensor& un = p.value("unembed");
  for (std::size_t r = 0; r < tok.rows(); ++r)
    for (std::size_t j = 0; j < tok.cols(); ++j) tok(r, j) = j % 2 ? 1.0 : -0.5;
  for (std::size_t j = 0; j < un.cols(); ++j) un(static_cast<std::size_t>(token), j) = j % 2 ? 1.0 : -0.5;
  return p;
}

TEST(Eval, AsrProxyExtremes) {
  const ExperimentConfig c = small_config();
  const TaskData d = generate_task_data(c, 0);
  const int unsafe = d.spec.unsafe_tokens.front();
  const int content = d.spec.content_tokens.front();
  EXPECT_EQ(asr_proxy(c.model, constant_emitter(c.model, unsafe), d.spec, d.eval_in), 1.0);
  EXPECT_EQ(asr_proxy(c.model, constant_emitter(c.model, unsafe), d.spec, d.eval_ood), 1.0);
  EXPECT_EQ(asr_proxy(c.model, constant_emitter(c.model, content), d.spec, d.eval_in), 0.0);
  EXPECT_THROW(asr_proxy(c.model, constant_emitter(c.model, content), d.spec, {}), ConfigError);
}

TEST(Eval, ReferenceTiesCountAsIncorrect) {
  const ExperimentConfig c = small_config();
  const SeedArtifacts& a = artifacts(0);
  const EvalSummary s = evaluate(c, a.sft.params, a.eval);
  EXPECT_EQ(s.pref_accuracy, 0.0);
  EXPECT_EQ(s.mean_margin, 0.0);
}

TEST(Train, MetricsRowPerStepAndHeader) {
  const ExperimentConfig c = small_config();
  const RunOutcome r = run_cell(c, artifacts(0), LossKind::dpo, MaskMode::selective, 0.0);
  ASSERT_EQ(r.train.rows.size(), 6u);
  EXPECT_EQ(r.train.sam_fired, 3u);
  const std::string csv = metrics_csv(r.train.rows, c.hash());
  std::istringstream in(csv);
  std::string version, header;
  std::getline(in, version);
  std::getline(in, header);
  EXPECT_EQ(version, "# shapo-metrics version 1 config " + hex64(c.hash()));
  EXPECT_EQ(header, kMetricsHeader);
  int lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 6);
  for (const auto& row : r.train.rows) EXPECT_EQ(row.sam_fired, row.step % 2 == 0);
}

TEST(Train, NoneModeMatchesDedicatedDpoLoopBitwise) {
  const ExperimentConfig c = small_config();
  const SeedArtifacts& a = artifacts(0);
  const RunOutcome r = run_cell(c, a, LossKind::dpo, MaskMode::none, 0.0);

  ParameterStore theta = a.sft.params;
  const ReferenceTable ref = reference_table(c.model, a.sft.params, a.data.train, a.data.spec, c.loss.beta_r);
  BatchSampler sampler(a.data.train.size(), 4, SeedStreams::batches(a.seed));
  LossSpec dpo;
  dpo.beta = c.loss.beta;
  for (int step = 0; step < c.shapo.total_steps; ++step) {
    const auto idx = sampler.next();
    const PreferenceBatch b = make_batch(a.data.train, idx, ref.chosen, ref.rejected);
    theta.zero_grad();
    make_loss_fn(c.model, b, dpo)(theta, true);
    std::vector<double> v = theta.flat_values();
    const std::vector<double> g = theta.flat_grad();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= c.shapo.lr * g[i];
    theta.set_flat_values(v);
  }
  EXPECT_EQ(theta.flat_values(), r.train.theta.flat_values());
}

TEST(Train, RunsAreDeterministic) {
  const ExperimentConfig c = small_config();
  const RunOutcome x = run_cell(c, artifacts(1), LossKind::reward_bce, MaskMode::selective, 0.5);
  const RunOutcome y = run_cell(c, artifacts(1), LossKind::reward_bce, MaskMode::selective, 0.5);
  EXPECT_EQ(x.train.theta.flat_values(), y.train.theta.flat_values());
  EXPECT_EQ(metrics_without_wall(x.train, 1), metrics_without_wall(y.train, 1));
  EXPECT_EQ(make_record(c, artifacts(1), x).to_json(), make_record(c, artifacts(1), y).to_json());
}

TEST(Train, EmptyMaskRejected) {
  ExperimentConfig c = small_config();
  c.shapo.mask_mode = MaskMode::selective;
  const SeedArtifacts& a = artifacts(0);
  const ReferenceTable ref = reference_table(c.model, a.sft.params, a.data.train, a.data.spec, c.loss.beta_r);
  EXPECT_THROW(run_alignment(c, a.sft.params, a.data.train, ref, SubspaceMask{}, 0), ConfigError);
}

TEST(Train, PeriodicEvaluationAndLambda) {
  ExperimentConfig c = small_config();
  c.eval.eval_every = 3;
  c.eval.lambda_every = 3;
  c.eval.lambda_iters = 3;
  const RunOutcome r = run_cell(c, artifacts(0), LossKind::dpo, MaskMode::none, 0.0);
  for (const auto& row : r.train.rows) {
    const bool due = row.step % 3 == 0;
    EXPECT_EQ(row.asr_proxy.has_value(), due);
    EXPECT_EQ(row.pref_accuracy.has_value(), due);
    EXPECT_EQ(row.lambda_max_s.has_value(), due);
  }
}

TEST(Grid, NoiseSweepCoversCrossProduct) {
  const ExperimentConfig c = small_config();
  const std::vector<SeedArtifacts> seeds{artifacts(0), artifacts(1)};
  const auto cells = noise_sweep_cells(c);
  ASSERT_EQ(cells.size(), 2u * 2u * 2u * 2u);
  const auto serial = run_grid(c, seeds, cells, 1, false);
  const auto threaded = run_grid(c, seeds, cells, 3, false);
  ASSERT_EQ(serial.size(), cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) EXPECT_EQ(serial[i].to_json(), threaded[i].to_json());
  // Rate 0 cells reproduce a clean run.
  const RunOutcome clean = run_cell(c, artifacts(1), LossKind::dpo, MaskMode::none, 0.0);
  bool found = false;
  for (const auto& r : serial)
    if (r.flip_rate == 0.0 && r.kind == LossKind::dpo && r.mode == MaskMode::none && r.seed == 4) {
      EXPECT_EQ(r.checkpoint_checksum, clean.train.theta.checksum());
      found = true;
    }
  EXPECT_TRUE(found);
  const std::string table = results_table(c, serial);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 2 + static_cast<long>(cells.size()));
}

TEST(Grid, AblationSharesArtifactsAcrossModes) {
  ExperimentConfig c = small_config();
  c.seeds = {3};
  const auto cells = ablation_cells(c);
  ASSERT_EQ(cells.size(), 4u);
  const auto rows = run_grid(c, {artifacts(0)}, cells, 1, false);
  const RunOutcome plain = run_cell(c, artifacts(0), LossKind::dpo, MaskMode::none, 0.0);
  EXPECT_EQ(rows[0].mode, MaskMode::none);
  EXPECT_EQ(rows[0].checkpoint_checksum, plain.train.theta.checksum());
  EXPECT_EQ(rows[0].sam_fired, 0u);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_EQ(rows[i].sam_fired, 3u);
  EXPECT_EQ(rows[2].mode, MaskMode::uniform);
  EXPECT_EQ(rows[2].mask_coordinates, artifacts(0).sft.params.num_coordinates());
  EXPECT_EQ(rows[1].mask_coordinates, rows[3].mask_coordinates);
}

TEST(Figure1, CurveReachesOneAtAllNeurons) {
  const ExperimentConfig c = small_config();
  const ConcentrationCurve curve = figure1_curve(c, artifacts(0));
  ASSERT_EQ(curve.k.back(), artifacts(0).sft.index.size());
  EXPECT_NEAR(curve.top_fraction.back(), 1.0, 1e-12);
  EXPECT_NEAR(curve.random_mean.back(), 1.0, 1e-12);
  EXPECT_NE(figure1_summary(c, 3, curve, 1.0).find("top_k_fraction_reaching_0.8"), std::string::npos);
}

TEST(Persistence, WriteRunAndProvenance) {
  ExperimentConfig c = small_config();
  c.output_dir = (fs::temp_directory_path() / "shapo_harness_persist").string();
  fs::remove_all(c.output_dir);
  const SeedArtifacts a = prepare_seed(c, 3, true);
  ASSERT_TRUE(fs::exists(reference_path(c, 3)));
  // A second preparation loads the cached reference bit-exactly.
  const SeedArtifacts b = prepare_seed(c, 3, true);
  EXPECT_EQ(a.sft.params.flat_values(), b.sft.params.flat_values());
  EXPECT_EQ(a.sft.params.checksum(), artifacts(0).sft.params.checksum());

  const RunOutcome r = run_cell(c, a, LossKind::dpo, MaskMode::selective, 0.0);
  const RunRecord rec = write_run(c, a, r);
  const std::string dir = cell_dir(c, 3, LossKind::dpo, MaskMode::selective, 0.0);
  const Checkpoint ck = load_checkpoint(dir + "/final.ckpt");
  EXPECT_EQ(ck.params.flat_values(), r.train.theta.flat_values());
  EXPECT_EQ(ck.meta.at("config_hash"), hex64(c.hash()));
  EXPECT_NO_THROW(check_provenance(ck, c, a.data.spec));
  const auto rec_json = nlohmann::json::parse(read_text(dir + "/record.json"));
  EXPECT_EQ(rec_json, rec.to_json());
  EXPECT_EQ(read_text(dir + "/metrics.csv").rfind("# shapo-metrics version 1 config " + hex64(c.hash()), 0), 0u);

  // A different task seed has a different task hash.
  EXPECT_THROW(check_provenance(ck, c, c.task_spec(99)), ConfigError);
  ExperimentConfig wider = c;
  wider.model.d_model = 32;
  wider.model.mlp_hidden = 64;
  EXPECT_THROW(check_provenance(ck, wider, a.data.spec), ConfigError);
  fs::remove_all(c.output_dir);
}

TEST(Parallel, PropagatesErrorsAndCoversIndices) {
  std::vector<int> hit(17, 0);
  parallel_for(hit.size(), 4, [&](std::size_t i) { hit[i] += 1; });
  for (int h : hit) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(5, 2, [](std::size_t i) { if (i == 3) throw NumericError("boom"); }), NumericError);
}

}  // namespace
}  // namespace shapo
