#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "fuseseg/tensor.hpp"

namespace fuseseg {

struct LossConfig {
  double alpha = 1.0;     // weight of the cross-entropy term
  double epsilon = 1.0;   // Dice smoothing
  double clamp = 1e-7;    // probability clamp inside the logs
  void validate() const;
};

/// 1 - (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps) over all elements.
Tensor dice_loss(const Tensor& p, const Tensor& y, double epsilon = 1.0);
/// Mean binary cross-entropy with p clamped to [clamp, 1 - clamp].
Tensor ce_loss(const Tensor& p, const Tensor& y, double clamp = 1e-7);
/// dice_loss + alpha * ce_loss.
Tensor combined_loss(const Tensor& p, const Tensor& y, const LossConfig& config = {});
/// Mean over the leading (batch) axis of the per-image combined loss.
Tensor batch_loss(const Tensor& p, const Tensor& y, const LossConfig& config = {});

/// p >= threshold -> 1, else 0.
Tensor binarize(const Tensor& p, double threshold = 0.5);

struct MetricsRecord {
  std::string sample_id;
  double dice = 0.0;
  double sensitivity = 0.0;
  double relative_area_difference = 0.0;
};

inline constexpr double kDiceMetricEps = 1e-7;

double dice_coefficient(const Tensor& pred, const Tensor& label);
/// TP / (TP + FN); 1 when the label is empty.
double sensitivity(const Tensor& pred, const Tensor& label);
/// |A_pred - A_label| / A_label; throws std::invalid_argument for an empty label.
double relative_area_difference(const Tensor& pred, const Tensor& label);

/// All three metrics for binary masks of equal shape.
MetricsRecord compute_metrics(const Tensor& pred, const Tensor& label, std::string sample_id = {});

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  // population sd over runs
  /// Percentages with one decimal, e.g. "75.0 ± 4.1".
  std::string format() const;
};

struct MetricsSummary {
  MeanSd dice, sensitivity, relative_area_difference;
  std::size_t runs = 0;
};

/// Per-run mean over images, then mean and population sd over runs.
MetricsSummary aggregate(std::span<const std::vector<MetricsRecord>> runs);
MeanSd mean_sd(std::span<const double> values);

/// CSV with header `sample_id,dice,sensitivity,rad`.
void write_metrics_csv(std::ostream& os, std::span<const MetricsRecord> records);
std::vector<MetricsRecord> read_metrics_csv(std::istream& is);

}  // namespace fuseseg
