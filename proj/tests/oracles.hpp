#pragma once

// Reference implementations and checking helpers shared by the unit tests and
// the acceptance binary. Nothing here calls into the library's kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "fuseseg/ops.hpp"
#include "fuseseg/tensor.hpp"

namespace oracle {

using fuseseg::Shape;
using fuseseg::Tensor;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = false, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(fuseseg::shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Straight nested-loop cross-correlation, kernel (Cout, Cin, k, k).
inline std::vector<double> conv2d(const Tensor& x, const Tensor& w, const Tensor* b, int stride, int dil, int pad) {
  const auto n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto cout = w.dim(0), k = w.dim(2);
  const long oh = (static_cast<long>(h) + 2 * pad - dil * (static_cast<long>(k) - 1) - 1) / stride + 1;
  const long ow = (static_cast<long>(wd) + 2 * pad - dil * (static_cast<long>(k) - 1) - 1) / stride + 1;
  std::vector<double> out(n * cout * oh * ow, 0.0);
  auto X = x.values();
  auto W = w.values();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t co = 0; co < cout; ++co)
      for (long i = 0; i < oh; ++i)
        for (long j = 0; j < ow; ++j) {
          double acc = b ? b->values()[co] : 0.0;
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                const long y = i * stride - pad + static_cast<long>(ki) * dil;
                const long z = j * stride - pad + static_cast<long>(kj) * dil;
                if (y < 0 || z < 0 || y >= static_cast<long>(h) || z >= static_cast<long>(wd)) continue;
                acc += X[((s * cin + ci) * h + y) * wd + z] * W[((co * cin + ci) * k + ki) * k + kj];
              }
          out[((s * cout + co) * oh + i) * ow + j] = acc;
        }
  return out;
}

// 2x2/2 max with first-in-raster tie-break; also returns the window position.
inline std::vector<double> maxpool(const Tensor& x, std::vector<int>* argmax = nullptr) {
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<double> out;
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t i = 0; i < h / 2; ++i)
      for (std::size_t j = 0; j < w / 2; ++j) {
        double best = -INFINITY;
        int at = 0;
        for (int q = 0; q < 4; ++q) {
          const double v = x.values()[(p * h + 2 * i + q / 2) * w + 2 * j + q % 2];
          if (v > best) best = v, at = q;
        }
        out.push_back(best);
        if (argmax) argmax->push_back(at);
      }
  return out;
}

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline Confusion confusion(const Tensor& pred, const Tensor& label) {
  Confusion c;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const bool p = pred.values()[i] != 0.0, y = label.values()[i] != 0.0;
    (p && y ? c.tp : p ? c.fp : y ? c.fn : c.tn)++;
  }
  return c;
}

struct GradCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::size_t nonzero = 0;  // checked coordinates with a gradient above the floor
};

// Central differences on up to `coords` sampled entries of each leaf against
// the gradients left there by one backward pass of `loss_fn`.
// Differences across a relu/maxpool kink measure nothing: a coordinate whose
// +-h probes leave the base point's region is skipped and another is drawn,
// up to 4 * coords draws per leaf.
inline GradCheck grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> leaves, std::size_t coords,
                            std::mt19937_64& rng, double h = 1e-3, double floor = 1e-8) {
  for (auto& l : leaves) l.zero_grad();
  std::uint64_t base = 0;
  {
    fuseseg::BranchTrace trace;
    Tensor loss = loss_fn();
    base = trace.digest();
    fuseseg::backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) {
    const auto g = l.grad_buffer();
    analytic.emplace_back(g.begin(), g.end());
  }
  auto probe = [&](bool& smooth) {
    fuseseg::BranchTrace trace;
    const double v = loss_fn().item();
    smooth = smooth && trace.digest() == base;
    return v;
  };

  GradCheck r;
  fuseseg::NoGradGuard no_grad;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor leaf = leaves[li];
    std::vector<std::size_t> idx(leaf.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t done = 0, drawn = 0;
    for (std::size_t i : idx) {
      if (done == coords || drawn++ == 4 * coords) break;
      double& x = leaf.mutable_values()[i];
      const double x0 = x;
      bool smooth = true;
      x = x0 + h;
      const double up = probe(smooth);
      x = x0 - h;
      const double down = probe(smooth);
      x = x0;
      if (!smooth) {
        ++r.skipped;
        continue;
      }
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[li][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      r.max_rel = std::max(r.max_rel, std::abs(a - numeric) / denom);
      ++r.checked;
      r.nonzero += denom > floor;
      ++done;
    }
  }
  return r;
}

inline GradCheck grad_check(const std::function<Tensor()>& loss_fn, Tensor leaf, std::size_t coords,
                            std::mt19937_64& rng, double h = 1e-3, double floor = 1e-8) {
  return grad_check(loss_fn, std::vector<Tensor>{std::move(leaf)}, coords, rng, h, floor);
}

}  // namespace oracle
