#include "fuseseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <random>
#include <set>

#include "fuseseg/checkpoint.hpp"
#include "fuseseg/seeding.hpp"

namespace fuseseg {

namespace {

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
  return buf;
}

// Stacks (1,H,W) images into (N,1,H,W), optionally normalizing each.
Tensor stack(std::span<const SegmentationSample> samples, std::span<const std::size_t> indices,
             Tensor SegmentationSample::*field, bool normalized) {
  const Shape& one = (samples[indices[0]].*field).shape();
  std::vector<double> out;
  out.reserve(indices.size() * shape_numel(one));
  for (std::size_t i : indices) {
    const Tensor& t = samples[i].*field;
    if (t.shape() != one) throw ShapeError("batch: sample " + samples[i].sample_id + " has shape " + shape_str(t.shape()));
    const Tensor src = normalized ? normalize(t) : t;
    out.insert(out.end(), src.values().begin(), src.values().end());
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), one.begin(), one.end());
  return Tensor::from_values(std::move(shape), std::move(out));
}

std::optional<Tensor> assistant_input(const Model& model, const Batch& b) {
  if (!is_two_stream(model.spec().variant)) return std::nullopt;
  return b.assistant;
}

std::vector<std::size_t> shuffled(std::vector<std::size_t> idx, std::uint64_t run_seed, int epoch) {
  std::mt19937_64 rng(derive_seed(run_seed, static_cast<std::uint64_t>(epoch)));
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

double mean_dice(std::span<const MetricsRecord> records) {
  double s = 0.0;
  for (const auto& r : records) s += r.dice;
  return records.empty() ? 0.0 : s / static_cast<double>(records.size());
}

void check_folds(const FoldAssignment& folds, std::size_t n) {
  if (folds.train.empty()) throw std::invalid_argument("train_run: empty training set");
  if (folds.test.empty()) throw std::invalid_argument("train_run: empty held-out set");
  std::set<std::size_t> train(folds.train.begin(), folds.train.end());
  for (std::size_t i : folds.test) {
    if (train.count(i)) throw std::logic_error("train_run: held-out index " + std::to_string(i) + " is also trained on");
  }
  for (std::size_t i : folds.train) {
    if (i >= n) throw std::out_of_range("train_run: sample index " + std::to_string(i) + " out of range");
  }
  for (std::size_t i : folds.test) {
    if (i >= n) throw std::out_of_range("train_run: sample index " + std::to_string(i) + " out of range");
  }
}

}  // namespace

void write_history_csv(std::ostream& os, std::span<const EpochRecord> history) {
  os << "epoch,train_loss,val_dice\n";
  for (const auto& h : history) os << h.epoch << ',' << fmt17(h.train_loss) << ',' << fmt17(h.val_dice) << '\n';
}

FoldAssignment fold_assignment(const std::vector<std::vector<std::size_t>>& folds, int test_fold) {
  if (test_fold < 0 || static_cast<std::size_t>(test_fold) >= folds.size()) {
    throw std::invalid_argument("test fold " + std::to_string(test_fold) + " out of range");
  }
  FoldAssignment a;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    auto& dst = f == static_cast<std::size_t>(test_fold) ? a.test : a.train;
    dst.insert(dst.end(), folds[f].begin(), folds[f].end());
  }
  return a;
}

Batch make_batch(std::span<const SegmentationSample> samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: no samples");
  return {stack(samples, indices, &SegmentationSample::master, true),
          stack(samples, indices, &SegmentationSample::assistant, true),
          stack(samples, indices, &SegmentationSample::label, false)};
}

std::vector<MetricsRecord> evaluate(const Model& model, std::span<const SegmentationSample> samples,
                                    std::span<const std::size_t> indices, int batch_size) {
  NoGradGuard no_grad;
  std::vector<MetricsRecord> out;
  const auto bs = static_cast<std::size_t>(std::max(batch_size, 1));
  for (std::size_t b0 = 0; b0 < indices.size(); b0 += bs) {
    const auto chunk = indices.subspan(b0, std::min(bs, indices.size() - b0));
    const Batch b = make_batch(samples, chunk);
    const Tensor prob = model.forward(b.master, assistant_input(model, b)).prob;
    const std::size_t per = prob.numel() / chunk.size();
    for (std::size_t j = 0; j < chunk.size(); ++j) {
      const auto& s = samples[chunk[j]];
      std::vector<double> p(prob.values().begin() + static_cast<long>(j * per),
                            prob.values().begin() + static_cast<long>((j + 1) * per));
      const Tensor pred = binarize(Tensor::from_values(s.label.shape(), std::move(p)));
      out.push_back(compute_metrics(pred, s.label, s.sample_id));
    }
  }
  return out;
}

RunResult train_run(const ModelSpec& spec, std::span<const SegmentationSample> samples, const FoldAssignment& folds,
                    const TrainConfig& config, std::uint64_t run_seed, const RunHooks& hooks) {
  config.validate();
  spec.validate();
  check_folds(folds, samples.size());

  RunResult r{build_model(spec, run_seed), {}, {}, {}};
  r.optimizer = OptimizerState::zeros_like(r.model.parameters());
  const std::uint64_t config_hash = fnv1a(config.canonical());
  int start = 0;
  if (hooks.resume && !hooks.state_path.empty() && std::filesystem::exists(hooks.state_path)) {
    TrainingState st = load_training_state(hooks.state_path, r.model);
    if (st.config_hash != config_hash || st.run_seed != run_seed) {
      throw std::invalid_argument(hooks.state_path.string() + ": saved for a different configuration or seed");
    }
    start = st.epochs_done;
    r.history = std::move(st.history);
    r.optimizer = std::move(st.optimizer);
  }

  const auto bs = static_cast<std::size_t>(config.batch_size);
  for (int epoch = start; epoch < config.epochs; ++epoch) {
    if (hooks.stop_after && epoch >= *hooks.stop_after) break;
    const double lr = lr_at_epoch(config, epoch);
    const auto order = shuffled(folds.train, run_seed, epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += bs) {
      const std::span<const std::size_t> chunk(order.data() + b0, std::min(bs, order.size() - b0));
      const Batch b = make_batch(samples, chunk);
      r.model.zero_grad();
      const Tensor prob = r.model.forward(b.master, assistant_input(r.model, b)).prob;
      const Tensor loss = batch_loss(prob, b.label, config.loss);
      if (!std::isfinite(loss.item())) {
        throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batches) + ": loss " + std::to_string(loss.item()));
      }
      backward(loss);
      adam_amsgrad_step(r.model.parameters(), r.optimizer, lr, config.beta1, config.beta2, config.adam_eps);
      loss_sum += loss.item();
      ++batches;
    }
    r.metrics = evaluate(r.model, samples, folds.test, config.batch_size);
    const EpochRecord rec{epoch, loss_sum / static_cast<double>(batches), mean_dice(r.metrics)};
    r.history.push_back(rec);
    if (!hooks.state_path.empty()) {
      save_training_state(hooks.state_path, r.model,
                          TrainingState{config_hash, run_seed, epoch + 1, r.history, r.optimizer});
    }
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  if (r.metrics.empty()) r.metrics = evaluate(r.model, samples, folds.test, config.batch_size);
  return r;
}

std::vector<BenchmarkRow> benchmark(std::span<const ModelSpec> variants, std::span<const SegmentationSample> samples,
                                    const TrainConfig& config, const BenchmarkHooks& hooks) {
  if (variants.empty()) throw std::invalid_argument("benchmark: no variants");
  config.validate();
  const auto folds = kfold_split(samples.size(), config.folds, config.seed);
  std::vector<FoldAssignment> splits;
  if (config.full_rotation) {
    for (int f = 0; f < config.folds; ++f) splits.push_back(fold_assignment(folds, f));
  } else {
    splits.push_back(fold_assignment(folds, config.test_fold));
  }

  std::vector<BenchmarkRow> rows;
  for (const auto& spec : variants) {
    BenchmarkRow row;
    row.variant = std::string(variant_name(spec.variant));
    row.params = count_params(build_model(spec, config.seed));
    std::vector<std::vector<MetricsRecord>> per_run;
    for (int run = 0; run < config.runs; ++run) {
      const std::uint64_t seed = config.seed + static_cast<std::uint64_t>(run);
      std::vector<MetricsRecord> records;
      for (const auto& split : splits) {
        RunHooks rh;
        if (hooks.on_epoch) rh.on_epoch = [&](const EpochRecord& e) { hooks.on_epoch(row.variant, run, e); };
        auto result = train_run(spec, samples, split, config, seed, rh);
        records.insert(records.end(), result.metrics.begin(), result.metrics.end());
      }
      const auto s = aggregate(std::span<const std::vector<MetricsRecord>>(&records, 1));
      const RunSummary rs{seed, s.dice.mean, s.sensitivity.mean, s.relative_area_difference.mean};
      row.runs.push_back(rs);
      if (hooks.on_run) hooks.on_run(row.variant, run, rs);
      per_run.push_back(std::move(records));
    }
    row.summary = aggregate(per_run);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_results_csv(std::ostream& os, std::span<const BenchmarkRow> rows) {
  os << "variant,params,dice_mean,dice_sd,sens_mean,sens_sd,rad_mean,rad_sd\n";
  for (const auto& r : rows) {
    const auto& s = r.summary;
    os << r.variant << ',' << r.params << ',' << pct(s.dice.mean) << ',' << pct(s.dice.sd) << ','
       << pct(s.sensitivity.mean) << ',' << pct(s.sensitivity.sd) << ',' << pct(s.relative_area_difference.mean)
       << ',' << pct(s.relative_area_difference.sd) << '\n';
  }
}

void write_runs_csv(std::ostream& os, std::span<const BenchmarkRow> rows) {
  os << "variant,run,seed,dice,sensitivity,rad\n";
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.runs.size(); ++i) {
      const auto& x = r.runs[i];
      os << r.variant << ',' << i << ',' << x.seed << ',' << fmt17(x.dice) << ',' << fmt17(x.sensitivity) << ','
         << fmt17(x.relative_area_difference) << '\n';
    }
  }
}

std::vector<std::filesystem::path> export_attention(const Model& model, const SegmentationSample& sample,
                                                    const std::filesystem::path& dir) {
  if (!has_attention(model.spec().variant)) {
    throw std::invalid_argument("export_attention: variant " + std::string(variant_name(model.spec().variant)) +
                                " has no SA gates");
  }
  NoGradGuard no_grad;
  const std::array<std::size_t, 1> idx{0};
  const Batch b = make_batch(std::span<const SegmentationSample>(&sample, 1), idx);
  const ForwardResult fr = model.forward(b.master, assistant_input(model, b));
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  for (std::size_t i = 0; i < fr.attention.size(); ++i) {
    std::string name = fr.sites[i];
    std::replace(name.begin(), name.end(), '.', '_');
    const auto path = dir / (name + ".pgm");
    write_pgm(path, fr.attention[i]);
    written.push_back(path);
  }
  return written;
}

}  // namespace fuseseg
