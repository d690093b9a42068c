#include <algorithm>
#include <cmath>
#include <sstream>

#include "fuseseg/trainer.hpp"

namespace fuseseg {

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw std::invalid_argument("lr0 must be > 0");
  if (decay_every <= 0) throw std::invalid_argument("decay_every must be > 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw std::invalid_argument("beta1 must lie in (0,1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw std::invalid_argument("beta2 must lie in (0,1)");
  if (!(adam_eps > 0.0)) throw std::invalid_argument("adam_eps must be > 0");
  if (folds < 2) throw std::invalid_argument("folds must be >= 2");
  if (runs < 1) throw std::invalid_argument("runs must be >= 1");
  if (test_fold < 0 || test_fold >= folds) {
    throw std::invalid_argument("test_fold must lie in [0, folds), got " + std::to_string(test_fold));
  }
  loss.validate();
}

std::string TrainConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "lr0=" << lr0 << ";decay_every=" << decay_every << ";batch_size=" << batch_size << ";epochs=" << epochs
     << ";beta1=" << beta1 << ";beta2=" << beta2 << ";adam_eps=" << adam_eps << ";alpha=" << loss.alpha
     << ";epsilon=" << loss.epsilon << ";clamp=" << loss.clamp << ";folds=" << folds << ";seed=" << seed
     << ";test_fold=" << test_fold << ";full_rotation=" << full_rotation;
  return os.str();
}

double lr_at_epoch(const TrainConfig& config, int epoch) {
  if (epoch < 0) throw std::invalid_argument("lr_at_epoch: epoch must be >= 0");
  return config.lr0 * std::ldexp(1.0, -(epoch / config.decay_every));
}

OptimizerState OptimizerState::zeros_like(std::span<const NamedTensor> params) {
  OptimizerState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.tensor.numel(), 0.0);
    s.v.emplace_back(p.tensor.numel(), 0.0);
    s.v_max.emplace_back(p.tensor.numel(), 0.0);
  }
  return s;
}

void adam_amsgrad_step(std::span<NamedTensor> params, OptimizerState& state, double lr, double beta1, double beta2,
                       double eps) {
  if (state.m.size() != params.size() || state.v.size() != params.size() || state.v_max.size() != params.size()) {
    throw std::invalid_argument("optimizer state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                                std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (state.m[i].size() != p.tensor.numel()) {
      throw ShapeError("optimizer state for '" + p.name + "' does not match its shape " + shape_str(p.tensor.shape()));
    }
    if (!p.tensor.has_grad()) continue;
    const auto g = p.tensor.grad();
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw NumericalError("non-finite gradient " + std::to_string(g[j]) + " in '" + p.name + "' at element " +
                             std::to_string(j) + " (step " + std::to_string(state.t + 1) + ")");
      }
    }
  }

  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto theta = p.tensor.mutable_values();
    const auto grad = p.tensor.has_grad() ? p.tensor.grad() : std::span<const double>{};
    auto& m = state.m[i];
    auto& v = state.v[i];
    auto& vmax = state.v_max[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      m[j] = beta1 * m[j] + (1.0 - beta1) * g;
      v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
      vmax[j] = std::max(vmax[j], v[j]);
      const double m_hat = m[j] / c1;
      const double v_hat = vmax[j] / c2;
      theta[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

}  // namespace fuseseg
