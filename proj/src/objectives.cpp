#include "fuseseg/objectives.hpp"

#include "fuseseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace fuseseg {

namespace {

void check_pair(const Tensor& p, const Tensor& y, const char* op) {
  if (!p.defined() || !y.defined()) throw ShapeError(std::string(op) + ": undefined operand");
  if (p.shape() != y.shape()) {
    throw ShapeError(std::string(op) + ": prediction " + shape_str(p.shape()) + " vs label " +
                     shape_str(y.shape()));
  }
}

void check_binary(std::span<const double> v, const char* op, const char* what) {
  for (double x : v) {
    if (x != 0.0 && x != 1.0) {
      throw std::invalid_argument(std::string(op) + ": " + what + " must be binary, found " +
                                  std::to_string(x));
    }
  }
}

void check_probability(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!(x >= 0.0 && x <= 1.0)) {
      throw std::invalid_argument(std::string(op) + ": probabilities must lie in [0,1], found " +
                                  std::to_string(x));
    }
  }
}

// Loss over one contiguous slice. When `grad` is set, adds weight * dL/dp into it.
double dice_slice(const double* p, const double* y, std::size_t n, double eps, double* grad, double weight) {
  double spy = 0.0, sp = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    spy += p[i] * y[i];
    sp += p[i];
    sy += y[i];
  }
  const double num = 2.0 * spy + eps;
  const double den = sp + sy + eps;
  if (grad) {
    const double inv = weight / (den * den);
    for (std::size_t i = 0; i < n; ++i) grad[i] -= (2.0 * y[i] * den - num) * inv;
  }
  return 1.0 - num / den;
}

double ce_slice(const double* p, const double* y, std::size_t n, double clamp, double* grad, double weight) {
  const double lo = clamp, hi = 1.0 - clamp;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = std::clamp(p[i], lo, hi);
    total -= y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  if (grad) {
    for (std::size_t i = 0; i < n; ++i) {
      if (p[i] < lo || p[i] > hi) continue;  // flat outside the clamp
      grad[i] -= weight * inv_n * (y[i] / p[i] - (1.0 - y[i]) / (1.0 - p[i]));
    }
  }
  return total * inv_n;
}

std::size_t count_ones(std::span<const double> v) {
  return static_cast<std::size_t>(std::count(v.begin(), v.end(), 1.0));
}

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0;
};

Confusion confusion(const Tensor& pred, const Tensor& label, const char* op) {
  check_pair(pred, label, op);
  check_binary(pred.values(), op, "prediction");
  check_binary(label.values(), op, "label");
  Confusion c;
  const auto a = pred.values(), b = label.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool pa = a[i] == 1.0, lb = b[i] == 1.0;
    c.tp += pa && lb;
    c.fp += pa && !lb;
    c.fn += !pa && lb;
  }
  return c;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void LossConfig::validate() const {
  if (!(alpha >= 0.0)) throw std::invalid_argument("loss alpha must be >= 0");
  if (!(epsilon > 0.0)) throw std::invalid_argument("loss epsilon must be > 0");
  if (!(clamp > 0.0 && clamp < 0.5)) throw std::invalid_argument("loss clamp must lie in (0, 0.5)");
}

Tensor dice_loss(const Tensor& p, const Tensor& y, double epsilon) {
  check_pair(p, y, "dice_loss");
  check_binary(y.values(), "dice_loss", "label");
  check_probability(p.values(), "dice_loss");
  if (!(epsilon > 0.0)) throw std::invalid_argument("dice_loss: epsilon must be > 0");
  const double v = dice_slice(p.values().data(), y.values().data(), p.numel(), epsilon, nullptr, 0.0);
  return make_result({1}, {v}, {p}, [p, y, epsilon](std::span<const double> g) {
    dice_slice(p.values().data(), y.values().data(), p.numel(), epsilon, p.grad_buffer().data(), g[0]);
  });
}

Tensor ce_loss(const Tensor& p, const Tensor& y, double clamp) {
  check_pair(p, y, "ce_loss");
  check_binary(y.values(), "ce_loss", "label");
  check_probability(p.values(), "ce_loss");
  if (!(clamp > 0.0 && clamp < 0.5)) throw std::invalid_argument("ce_loss: clamp must lie in (0, 0.5)");
  const double v = ce_slice(p.values().data(), y.values().data(), p.numel(), clamp, nullptr, 0.0);
  return make_result({1}, {v}, {p}, [p, y, clamp](std::span<const double> g) {
    ce_slice(p.values().data(), y.values().data(), p.numel(), clamp, p.grad_buffer().data(), g[0]);
  });
}

Tensor combined_loss(const Tensor& p, const Tensor& y, const LossConfig& config) {
  config.validate();
  return add(dice_loss(p, y, config.epsilon), scale(ce_loss(p, y, config.clamp), config.alpha));
}

Tensor batch_loss(const Tensor& p, const Tensor& y, const LossConfig& config) {
  config.validate();
  check_pair(p, y, "batch_loss");
  check_binary(y.values(), "batch_loss", "label");
  check_probability(p.values(), "batch_loss");
  if (p.rank() < 2) throw ShapeError("batch_loss: expected a leading batch axis, got " + shape_str(p.shape()));
  const std::size_t batch = p.dim(0);
  if (batch == 0) throw ShapeError("batch_loss: empty batch");
  const std::size_t per = p.numel() / batch;
  const double w = 1.0 / static_cast<double>(batch);
  double total = 0.0;
  for (std::size_t n = 0; n < batch; ++n) {
    const double* pn = p.values().data() + n * per;
    const double* yn = y.values().data() + n * per;
    total += dice_slice(pn, yn, per, config.epsilon, nullptr, 0.0) +
             config.alpha * ce_slice(pn, yn, per, config.clamp, nullptr, 0.0);
  }
  return make_result({1}, {total * w}, {p}, [p, y, config, batch, per, w](std::span<const double> g) {
    double* grad = p.grad_buffer().data();
    for (std::size_t n = 0; n < batch; ++n) {
      const double* pn = p.values().data() + n * per;
      const double* yn = y.values().data() + n * per;
      dice_slice(pn, yn, per, config.epsilon, grad + n * per, g[0] * w);
      ce_slice(pn, yn, per, config.clamp, grad + n * per, g[0] * w * config.alpha);
    }
  });
}

Tensor binarize(const Tensor& p, double threshold) {
  std::vector<double> out(p.numel());
  const auto v = p.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] >= threshold ? 1.0 : 0.0;
  return Tensor::from_values(p.shape(), std::move(out));
}

double dice_coefficient(const Tensor& pred, const Tensor& label) {
  const auto c = confusion(pred, label, "dice_coefficient");
  const double tp2 = 2.0 * static_cast<double>(c.tp);
  return (tp2 + kDiceMetricEps) / (tp2 + static_cast<double>(c.fp + c.fn) + kDiceMetricEps);
}

double sensitivity(const Tensor& pred, const Tensor& label) {
  const auto c = confusion(pred, label, "sensitivity");
  if (c.tp + c.fn == 0) return 1.0;
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

double relative_area_difference(const Tensor& pred, const Tensor& label) {
  check_pair(pred, label, "relative_area_difference");
  check_binary(pred.values(), "relative_area_difference", "prediction");
  check_binary(label.values(), "relative_area_difference", "label");
  const auto a_pred = static_cast<double>(count_ones(pred.values()));
  const auto a_label = static_cast<double>(count_ones(label.values()));
  if (a_label == 0.0) throw std::invalid_argument("relative_area_difference: label mask is empty");
  return std::abs(a_pred - a_label) / a_label;
}

MetricsRecord compute_metrics(const Tensor& pred, const Tensor& label, std::string sample_id) {
  MetricsRecord r;
  r.sample_id = std::move(sample_id);
  r.dice = dice_coefficient(pred, label);
  r.sensitivity = sensitivity(pred, label);
  r.relative_area_difference = relative_area_difference(pred, label);
  return r;
}

std::string MeanSd::format() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f ± %.1f", 100.0 * mean, 100.0 * sd);
  return buf;
}

MeanSd mean_sd(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("mean_sd: no values");
  // Identical values: (x + x + x) / 3 need not round back to x.
  if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values[0]; })) return {values[0], 0.0};
  double m = 0.0;
  for (double v : values) m += v;
  m /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - m) * (v - m);
  var /= static_cast<double>(values.size());
  return {m, std::sqrt(var)};
}

MetricsSummary aggregate(std::span<const std::vector<MetricsRecord>> runs) {
  if (runs.empty()) throw std::invalid_argument("aggregate: no runs");
  std::vector<double> dice, sens, rad;
  for (const auto& run : runs) {
    if (run.empty()) throw std::invalid_argument("aggregate: run without records");
    double d = 0.0, s = 0.0, r = 0.0;
    for (const auto& rec : run) {
      d += rec.dice;
      s += rec.sensitivity;
      r += rec.relative_area_difference;
    }
    const auto n = static_cast<double>(run.size());
    dice.push_back(d / n);
    sens.push_back(s / n);
    rad.push_back(r / n);
  }
  return {mean_sd(dice), mean_sd(sens), mean_sd(rad), runs.size()};
}

void write_metrics_csv(std::ostream& os, std::span<const MetricsRecord> records) {
  os << "sample_id,dice,sensitivity,rad\n";
  for (const auto& r : records) {
    os << r.sample_id << ',' << format_double(r.dice) << ',' << format_double(r.sensitivity) << ','
       << format_double(r.relative_area_difference) << '\n';
  }
}

std::vector<MetricsRecord> read_metrics_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "sample_id,dice,sensitivity,rad") {
    throw FormatError("metrics csv: missing header");
  }
  std::vector<MetricsRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id, d, s, r;
    if (!std::getline(ss, id, ',') || !std::getline(ss, d, ',') || !std::getline(ss, s, ',') ||
        !std::getline(ss, r)) {
      throw FormatError("metrics csv: malformed row '" + line + "'");
    }
    try {
      out.push_back({id, std::stod(d), std::stod(s), std::stod(r)});
    } catch (const std::exception&) {
      throw FormatError("metrics csv: malformed number in row '" + line + "'");
    }
  }
  return out;
}

}  // namespace fuseseg
