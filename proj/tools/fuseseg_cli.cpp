#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "fuseseg/checkpoint.hpp"
#include "fuseseg/run_config.hpp"

namespace fs = std::filesystem;
using namespace fuseseg;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

struct GlobalOptions {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
};

RunConfig resolve_config(const GlobalOptions& g) {
  RunConfig c;
  if (const char* env = std::getenv("FUSESEG_OUT"); env && *env) c.out = env;
  if (!g.config_path.empty()) load_config_file(c, g.config_path);
  for (const auto& s : g.sets) apply_assignment(c, s);
  if (g.seed) {
    c.train.seed = *g.seed;
    c.phantom.seed = *g.seed;
  }
  if (!g.out.empty()) c.out = g.out;
  c.validate();
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text) || !out.flush()) throw std::runtime_error("cannot write " + path.string());
}

Dataset open_dataset(const RunConfig& c) {
  const fs::path dir = c.dataset_path();
  if (!fs::exists(dir / "manifest.txt")) {
    throw std::runtime_error("no dataset at " + dir.string() + " (run `fuseseg generate` first)");
  }
  return read_dataset(dir);
}

FoldAssignment single_split(const RunConfig& c, std::size_t n) {
  return fold_assignment(kfold_split(n, c.train.folds, c.train.seed), c.train.test_fold);
}

int cmd_generate(const RunConfig& c) {
  Dataset ds{c.phantom, generate_dataset(c.phantom, c.n_samples)};
  write_dataset(ds, c.dataset_path());
  std::printf("wrote %zu samples to %s\n", ds.samples.size(), c.dataset_path().string().c_str());
  return 0;
}

int cmd_train(const RunConfig& c) {
  const Dataset ds = open_dataset(c);
  const ModelSpec spec = c.model_spec(c.variant);
  fs::create_directories(c.out);
  RunHooks hooks;
  hooks.state_path = c.out / "train_state.ftrs";
  hooks.resume = c.resume;
  hooks.on_epoch = [&](const EpochRecord& e) {
    std::printf("epoch %3d/%d  loss %.6f  val_dice %.4f\n", e.epoch + 1, c.train.epochs, e.train_loss, e.val_dice);
    std::fflush(stdout);
  };
  std::printf("training %s (%s params) on %zu samples\n", std::string(variant_name(spec.variant)).c_str(),
              format_millions(count_params(build_model(spec, 0))).c_str(), ds.samples.size());
  const auto result = train_run(spec, ds.samples, single_split(c, ds.samples.size()), c.train, c.train.seed, hooks);
  save_checkpoint(c.out / "model.fckp", result.model);
  std::ostringstream hist, metrics;
  write_history_csv(hist, result.history);
  write_metrics_csv(metrics, result.metrics);
  write_text(c.out / "history.csv", hist.str());
  write_text(c.out / "metrics.csv", metrics.str());
  const auto s = aggregate(std::span<const std::vector<MetricsRecord>>(&result.metrics, 1));
  std::printf("held-out: dice %s  sensitivity %s  rad %s\n", s.dice.format().c_str(), s.sensitivity.format().c_str(),
              s.relative_area_difference.format().c_str());
  return 0;
}

int cmd_benchmark(const RunConfig& c) {
  const Dataset ds = open_dataset(c);
  std::vector<ModelSpec> specs;
  for (auto v : c.variants) specs.push_back(c.model_spec(v));
  fs::create_directories(c.out);
  const auto t0 = std::chrono::steady_clock::now();
  BenchmarkHooks hooks;
  hooks.on_epoch = [&](const std::string& v, int run, const EpochRecord& e) {
    std::printf("%s run %d epoch %3d/%d  loss %.6f  val_dice %.4f\n", v.c_str(), run + 1, e.epoch + 1,
                c.train.epochs, e.train_loss, e.val_dice);
    std::fflush(stdout);
  };
  const auto rows = benchmark(specs, ds.samples, c.train, hooks);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  std::ostringstream results, runs;
  write_results_csv(results, rows);
  write_runs_csv(runs, rows);
  write_text(c.out / "results.csv", results.str());
  write_text(c.out / "runs.csv", runs.str());
  std::printf("\n%-14s %12s  %-14s %-14s %-14s\n", "variant", "params", "dice %", "sensitivity %", "rad %");
  for (const auto& r : rows) {
    std::printf("%-14s %12s  %-14s %-14s %-14s\n", r.variant.c_str(), format_millions(r.params).c_str(),
                r.summary.dice.format().c_str(), r.summary.sensitivity.format().c_str(),
                r.summary.relative_area_difference.format().c_str());
  }
  std::printf("elapsed %.1f min\n", minutes);
  return 0;
}

int cmd_export_attention(const RunConfig& c) {
  const fs::path ckpt = c.checkpoint.empty() ? c.out / "model.fckp" : fs::path(c.checkpoint);
  const Model model = load_checkpoint(ckpt);
  if (!has_attention(model.spec().variant)) {
    throw std::invalid_argument("checkpoint " + ckpt.string() + " holds " +
                                std::string(variant_name(model.spec().variant)) + ", which has no SA gates");
  }
  const Dataset ds = open_dataset(c);
  if (ds.samples.empty()) throw std::runtime_error("dataset is empty");
  const SegmentationSample* sample = &ds.samples.front();
  if (!c.sample_id.empty()) {
    sample = nullptr;
    for (const auto& s : ds.samples) {
      if (s.sample_id == c.sample_id) sample = &s;
    }
    if (!sample) throw std::invalid_argument("no sample '" + c.sample_id + "' in " + c.dataset_path().string());
  }
  const auto files = export_attention(model, *sample, c.out / "attention");
  for (const auto& f : files) std::printf("%s\n", f.string().c_str());
  return 0;
}

int cmd_param_count(const RunConfig& c, const std::string& variant, int bottleneck) {
  std::vector<Variant> which;
  if (variant.empty()) {
    which.assign(all_variants().begin(), all_variants().end());
  } else {
    which.push_back(parse_variant(variant));
  }
  std::printf("%-14s %12s %8s\n", "variant", "params", "millions");
  for (auto v : which) {
    ModelSpec spec = default_spec(v, bottleneck);
    if (spec.sa && bottleneck != 1024) spec.sa = SAOptions{c.sa_reduction, c.sa_dilation};
    spec.validate();
    const std::size_t n = count_params(build_model(spec, 0));
    std::printf("%-14s %12zu %8s\n", std::string(variant_name(v)).c_str(), n, format_millions(n).c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fuseseg: master/assistant fusion segmentation on synthetic two-modality phantoms"};
  app.require_subcommand(1);
  app.footer(config_reference() + "\nEnvironment: FUSESEG_OUT sets the default output root.\n"
             "Exit codes: 0 success, 2 validation error, 3 runtime or numerical failure.");

  GlobalOptions g;
  app.add_option("--config", g.config_path, "flat key=value config file")->check(CLI::ExistingFile);
  app.add_option("--set", g.sets, "override one key (key=value); repeatable")->take_all()->allow_extra_args(false);
  app.add_option("--out", g.out, "output root (default: $FUSESEG_OUT, else fuseseg_out)");
  app.add_option("--seed", g.seed, "sets data.seed and train.seed");
  app.add_flag("--deterministic", g.deterministic, "single-threaded mode (the engine always is)");

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
  auto* train = app.add_subcommand("train", "train model.variant on the single split");
  auto* bench = app.add_subcommand("benchmark", "train model.variants for train.runs seeds and tabulate");
  auto* exp = app.add_subcommand("export-attention", "write the SA maps of a checkpoint as PGM files");
  std::string checkpoint, sample;
  exp->add_option("--checkpoint", checkpoint, "checkpoint file (overrides export.checkpoint)");
  exp->add_option("--sample", sample, "sample id (overrides export.sample_id)");
  auto* pc = app.add_subcommand("param-count", "print exact learnable counts");
  std::string pc_variant;
  int pc_bottleneck = 1024;
  pc->add_option("variant", pc_variant, "one variant (default: all)");
  pc->add_option("--bottleneck", pc_bottleneck, "bottleneck width (1024 = full size)")->capture_default_str();
  for (auto* sub : {gen, train, bench, exp, pc}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    RunConfig c = resolve_config(g);
    if (!checkpoint.empty()) c.checkpoint = checkpoint;
    if (!sample.empty()) c.sample_id = sample;
    if (*gen) return cmd_generate(c);
    if (*train) return cmd_train(c);
    if (*bench) return cmd_benchmark(c);
    if (*exp) return cmd_export_attention(c);
    if (*pc) return cmd_param_count(c, pc_variant, pc_bottleneck);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return 0;
}
