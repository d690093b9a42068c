#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fuseseg/model.hpp"
#include "fuseseg/objectives.hpp"
#include "fuseseg/synth.hpp"

namespace fuseseg {

struct TrainConfig {
  double lr0 = 1e-4;
  int decay_every = 30;
  int batch_size = 4;
  int epochs = 90;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossConfig loss;
  int folds = 5;
  int runs = 3;
  std::uint64_t seed = 0;
  /// Held-out fold of the single split.
  int test_fold = 0;
  /// Rotate the held-out fold over all folds instead of the single split.
  bool full_rotation = false;

  void validate() const;
  /// Stable text form; the training-state file stores its hash.
  std::string canonical() const;
};

/// lr0 * 0.5^floor(epoch / decay_every).
double lr_at_epoch(const TrainConfig& config, int epoch);

struct OptimizerState {
  std::vector<std::vector<double>> m, v, v_max;
  std::uint64_t t = 0;

  static OptimizerState zeros_like(std::span<const NamedTensor> params);
};

/// One Adam step with the AMSGrad running maximum. Gradients are read from the
/// parameters; a missing gradient counts as zero. Throws NumericalError, before
/// touching any parameter, when a gradient is not finite.
void adam_amsgrad_step(std::span<NamedTensor> params, OptimizerState& state, double lr, double beta1 = 0.9,
                       double beta2 = 0.999, double eps = 1e-8);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_dice = 0.0;
};

void write_history_csv(std::ostream& os, std::span<const EpochRecord> history);

struct FoldAssignment {
  std::vector<std::size_t> train, test;
};

/// Train on every fold but `test_fold`, test on `test_fold`.
FoldAssignment fold_assignment(const std::vector<std::vector<std::size_t>>& folds, int test_fold);

struct RunHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// When set, the full training state is written here after every epoch.
  std::filesystem::path state_path;
  /// Continue from `state_path` when it exists.
  bool resume = false;
  /// Stop once this many epochs have completed (interruption hook).
  std::optional<int> stop_after;
};

struct RunResult {
  Model model;
  std::vector<EpochRecord> history;
  /// Held-out metrics after the last completed epoch, one per test image.
  std::vector<MetricsRecord> metrics;
  OptimizerState optimizer;
};

/// Normalized network input for a batch of samples.
struct Batch {
  Tensor master, assistant, label;
};
Batch make_batch(std::span<const SegmentationSample> samples, std::span<const std::size_t> indices);

/// Per-image metrics of a model on the given samples.
std::vector<MetricsRecord> evaluate(const Model& model, std::span<const SegmentationSample> samples,
                                    std::span<const std::size_t> indices, int batch_size);

RunResult train_run(const ModelSpec& spec, std::span<const SegmentationSample> samples, const FoldAssignment& folds,
                    const TrainConfig& config, std::uint64_t run_seed, const RunHooks& hooks = {});

struct RunSummary {
  std::uint64_t seed = 0;
  double dice = 0.0, sensitivity = 0.0, relative_area_difference = 0.0;
};

struct BenchmarkRow {
  std::string variant;
  std::size_t params = 0;
  MetricsSummary summary;
  std::vector<RunSummary> runs;
};

struct BenchmarkHooks {
  std::function<void(const std::string& variant, int run, const EpochRecord&)> on_epoch;
  std::function<void(const std::string& variant, int run, const RunSummary&)> on_run;
};

/// config.runs independent seeds (config.seed + r) per variant; only
/// initialization and shuffling change between runs, the fold split is fixed.
std::vector<BenchmarkRow> benchmark(std::span<const ModelSpec> variants, std::span<const SegmentationSample> samples,
                                    const TrainConfig& config, const BenchmarkHooks& hooks = {});

/// variant,params,dice_mean,dice_sd,sens_mean,sens_sd,rad_mean,rad_sd (percent, one decimal).
void write_results_csv(std::ostream& os, std::span<const BenchmarkRow> rows);
/// variant,run,seed,dice,sensitivity,rad at full precision.
void write_runs_csv(std::ostream& os, std::span<const BenchmarkRow> rows);

/// One PGM per SA site: block{i}.pgm, or block{i}_master.pgm / block{i}_assistant.pgm
/// for per-stream gates. Throws std::invalid_argument for SA-free variants.
std::vector<std::filesystem::path> export_attention(const Model& model, const SegmentationSample& sample,
                                                    const std::filesystem::path& dir);

}  // namespace fuseseg
