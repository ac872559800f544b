// Command-line front end for the experiment pipeline.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "shapo/experiment.hpp"

namespace fs = std::filesystem;
using namespace shapo;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  int threads = 1;
};

ExperimentConfig load(const Globals& g) {
  ExperimentConfig cfg = g.config.empty() ? ExperimentConfig{} : load_config(g.config);
  if (g.seed) cfg.seeds = {*g.seed};
  if (g.out) cfg.output_dir = *g.out;
  cfg.validate();
  return cfg;
}

void write_json(const std::string& path, const nlohmann::json& j) {
  fs::create_directories(fs::path(path).parent_path());
  write_text(path, j.dump(2) + "\n");
}

void note(const std::string& s) { std::cout << s << std::endl; }

void cmd_gen_data(const Globals& g) {
  const ExperimentConfig cfg = load(g);
  for (std::uint64_t seed : cfg.seeds) {
    const TaskData d = generate_task_data(cfg, seed);
    const auto noisy = noisy_train(cfg, d, seed);
    const std::string dir = seed_dir(cfg, seed) + "/data";
    fs::create_directories(dir);
    write_text(dir + "/train.jsonl", serialize_dataset(noisy));
    write_text(dir + "/heldout.jsonl", serialize_dataset(d.heldout));
    nlohmann::json manifest = dataset_manifest(d.spec, noisy, cfg.flip_rate);
    manifest["config_hash"] = hex64(cfg.hash());
    manifest["heldout"] = d.heldout.size();
    manifest["probe_examples"] = d.probe.size();
    manifest["eval_prompts"] = d.eval_in.size();
    write_json(dir + "/manifest.json", manifest);
    note("seed " + std::to_string(seed) + ": " + std::to_string(noisy.size()) + " pairs (" +
         std::to_string(count_flipped(noisy)) + " flipped) -> " + dir);
  }
}

void cmd_sft(const Globals& g) {
  const ExperimentConfig cfg = load(g);
  parallel_for(cfg.seeds.size(), g.threads, [&](std::size_t i) {
    const TaskData d = generate_task_data(cfg, cfg.seeds[i]);
    load_or_train_reference(cfg, d, cfg.seeds[i], true);
  });
  for (std::uint64_t seed : cfg.seeds) note("reference -> " + reference_path(cfg, seed));
}

void cmd_train_probe(const Globals& g) {
  const ExperimentConfig cfg = load(g);
  const auto seeds = prepare_seeds(cfg, g.threads, true);
  for (const auto& a : seeds) {
    const std::string dir = seed_dir(cfg, a.seed) + "/probe";
    const ProbeDirection& p = a.probe.probe;
    write_json(dir + "/probe.json",
               {{"version", 1},
                {"config_hash", hex64(cfg.hash())},
                {"pooling", to_string(cfg.probe.pooling)},
                {"p", std::vector<double>(p.p.values().begin(), p.p.values().end())},
                {"bias", p.bias},
                {"heldout_accuracy", p.heldout_accuracy},
                {"train_accuracy", p.train_accuracy},
                {"epochs_run", p.epochs_run},
                {"top_tokens", probe_to_tokens(p.p.values(),
                                               a.sft.params.value(a.sft.params.index_of("unembed")), 5)}});
    std::ostringstream scores;
    scores.precision(17);
    scores << "# shapo-scores version 1 config " << hex64(cfg.hash()) << " metric " << to_string(cfg.probe.metric)
           << "\nneuron,layer,score\n";
    for (std::size_t j = 0; j < a.probe.scores.scores.size(); ++j)
      scores << j << ',' << a.sft.index.entries[j].layer << ',' << a.probe.scores.scores[j] << '\n';
    write_text(dir + "/scores.csv", scores.str());
    for (MaskMode m : {MaskMode::selective, MaskMode::random, MaskMode::uniform})
      write_text(dir + "/mask-" + to_string(m) + ".txt",
                 serialize_mask(mask_for(cfg, a.probe, a.sft.index, m, a.seed, hex64(cfg.hash()))));
    note("seed " + std::to_string(a.seed) + ": probe held-out accuracy " + std::to_string(p.heldout_accuracy) +
         " -> " + dir);
  }
}

void cmd_train(const Globals& g) {
  const ExperimentConfig cfg = load(g);
  const auto seeds = prepare_seeds(cfg, g.threads, true);
  std::vector<GridCell> cells;
  for (std::size_t s = 0; s < seeds.size(); ++s)
    cells.push_back({s, cfg.loss.kind, cfg.shapo.mask_mode, cfg.flip_rate});
  for (const auto& r : run_grid(cfg, seeds, cells, g.threads, true))
    note(cell_dir(cfg, r.seed, r.kind, r.mode, r.flip_rate) + ": " + r.to_json()["eval"].dump());
}

void cmd_eval(const Globals& g, const std::string& checkpoint, const std::string& suite) {
  const ExperimentConfig cfg = load(g);
  detail::require<ConfigError>(suite == "in_dist" || suite == "ood_proxy" || suite == "both",
                               "eval: unknown suite '", suite, "'");
  for (std::uint64_t seed : cfg.seeds) {
    const std::string path = checkpoint.empty()
                                 ? cell_dir(cfg, seed, cfg.loss.kind, cfg.shapo.mask_mode, cfg.flip_rate) + "/final.ckpt"
                                 : checkpoint;
    const Checkpoint ck = load_checkpoint(path);
    const TaskData d = generate_task_data(cfg, seed);
    check_provenance(ck, cfg, d.spec);
    const SftResult ref = load_or_train_reference(cfg, d, seed, true);
    const EvalContext ctx = make_eval_context(cfg, ref.params, d);
    nlohmann::json out{{"version", 1}, {"config_hash", hex64(cfg.hash())}, {"checkpoint", path}, {"seed", seed}};
    if (suite != "ood_proxy") out["asr_in"] = asr_proxy(cfg.model, ck.params, d.spec, d.eval_in);
    if (suite != "in_dist") out["asr_ood"] = asr_proxy(cfg.model, ck.params, d.spec, d.eval_ood);
    const auto [acc, margin] = preference_accuracy(cfg.model, ck.params, d.heldout, ctx.heldout_ref, cfg.loss.beta);
    out["pref_accuracy"] = acc;
    out["mean_margin"] = margin;
    const std::string dest = (fs::path(path).parent_path() / "eval.json").string();
    write_json(dest, out);
    note(out.dump());
  }
}

void cmd_noise_sweep(const Globals& g) {
  const ExperimentConfig cfg = load(g);
  const auto seeds = prepare_seeds(cfg, g.threads, true);
  const auto cells = noise_sweep_cells(cfg);
  const auto rows = run_grid(cfg, seeds, cells, g.threads, true);
  const std::string path = cfg.output_dir + "/noise_sweep.csv";
  write_text(path, results_table(cfg, rows));
  note(std::to_string(rows.size()) + " cells -> " + path);
}

void cmd_ablate(const Globals& g) {
  const ExperimentConfig cfg = load(g);
  const auto seeds = prepare_seeds(cfg, g.threads, true);
  const auto rows = run_grid(cfg, seeds, ablation_cells(cfg), g.threads, true);
  const std::string path = cfg.output_dir + "/ablation.csv";
  write_text(path, results_table(cfg, rows));
  std::ostringstream os;
  os << "mode,asr_in_mean,asr_ood_mean\n";
  for (MaskMode m : {MaskMode::none, MaskMode::random, MaskMode::uniform, MaskMode::selective})
    os << to_string(m) << ',' << mean_over_seeds(rows, cfg.loss.kind, m, cfg.flip_rate, &EvalSummary::asr_in) << ','
       << mean_over_seeds(rows, cfg.loss.kind, m, cfg.flip_rate, &EvalSummary::asr_ood) << '\n';
  write_text(cfg.output_dir + "/ablation_summary.csv", os.str());
  std::cout << os.str();
}

void cmd_figure1(const Globals& g) {
  const ExperimentConfig cfg = load(g);
  const auto seeds = prepare_seeds(cfg, g.threads, true);
  std::vector<ConcentrationCurve> curves(seeds.size());
  parallel_for(seeds.size(), g.threads, [&](std::size_t i) { curves[i] = figure1_curve(cfg, seeds[i]); });
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const std::string dir = seed_dir(cfg, seeds[i].seed);
    fs::create_directories(dir);
    write_text(dir + "/figure1.csv",
               "# shapo-figure1 version 1 config " + hex64(cfg.hash()) + "\n" + curves[i].to_table());
    const std::string summary = figure1_summary(cfg, seeds[i].seed, curves[i], seeds[i].probe.probe.heldout_accuracy);
    write_text(dir + "/figure1_summary.txt", "version 1\n" + summary);
    std::cout << summary;
  }
}

void cmd_diagnose(const Globals& g, const std::string& checkpoint, const std::string& mask_path) {
  const ExperimentConfig cfg = load(g);
  for (std::uint64_t seed : cfg.seeds) {
    const SeedArtifacts a = prepare_seed(cfg, seed, true);
    ParameterStore theta = a.sft.params;
    std::string source = reference_path(cfg, seed);
    if (!checkpoint.empty()) {
      Checkpoint ck = load_checkpoint(checkpoint);
      check_provenance(ck, cfg, a.data.spec);
      theta = std::move(ck.params);
      source = checkpoint;
    }
    const MaskMode mode = cfg.shapo.mask_mode == MaskMode::none ? MaskMode::selective : cfg.shapo.mask_mode;
    const SubspaceMask mask = mask_path.empty() ? mask_for(cfg, a.probe, a.sft.index, mode, seed)
                                                : parse_mask(read_text(mask_path));
    const std::uint64_t before = theta.checksum();
    const GeometryReport report = diagnose(diagnostic_loss(cfg, a), theta, mask, diagnose_options(cfg, mask, seed));
    detail::require<Error>(theta.checksum() == before, "diagnose: parameters changed during diagnosis");
    nlohmann::json j = report.to_json();
    j["config_hash"] = hex64(cfg.hash());
    j["checkpoint"] = source;
    const fs::path path = (checkpoint.empty() ? fs::path(seed_dir(cfg, seed))
                                                 : fs::path(checkpoint).parent_path()) /
                             "geometry_report.json";
    write_json(path.string(), j);
    note(j.dump());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Selective sharpness-aware preference optimization toolkit"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  std::string out;
  app.add_option("--config", g.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "Run a single seed instead of the config's list");
  auto* out_opt = app.add_option("--out", out, "Output directory (overrides the config)");
  app.add_option("--threads", g.threads, "Worker threads for independent runs")->check(CLI::PositiveNumber);

  std::string checkpoint, suite = "both", mask;
  app.add_subcommand("gen-data", "Generate preference data, held-out pairs and a manifest");
  app.add_subcommand("sft", "Train the reference model");
  app.add_subcommand("train-probe", "Train the safety probe and write scores and masks");
  app.add_subcommand("train", "Aligned training with the configured loss and mask mode");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint (default: the configured run)");
  eval->add_option("--suite", suite, "in_dist, ood_proxy or both");
  app.add_subcommand("noise-sweep", "Flip-rate x loss x mode x seed grid");
  app.add_subcommand("ablate-geometry", "none / random / uniform / selective comparison");
  app.add_subcommand("figure1", "Worst-case concentration curves (Top-K vs Random-K)");
  auto* diag = app.add_subcommand("diagnose", "Geometry report for a checkpoint");
  diag->add_option("--checkpoint", checkpoint, "Checkpoint (default: the reference)");
  diag->add_option("--mask", mask, "Mask file (default: the configured mode)");

  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) g.seed = seed;
  if (*out_opt) g.out = out;
  try {
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "gen-data") cmd_gen_data(g);
    else if (cmd == "sft") cmd_sft(g);
    else if (cmd == "train-probe") cmd_train_probe(g);
    else if (cmd == "train") cmd_train(g);
    else if (cmd == "eval") cmd_eval(g, checkpoint, suite);
    else if (cmd == "noise-sweep") cmd_noise_sweep(g);
    else if (cmd == "ablate-geometry") cmd_ablate(g);
    else if (cmd == "figure1") cmd_figure1(g);
    else if (cmd == "diagnose") cmd_diagnose(g, checkpoint, mask);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
