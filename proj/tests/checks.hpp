#pragma once

// Composite checks used by both the unit tests and the acceptance binary.

#include <array>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "fuseseg/model.hpp"
#include "fuseseg/objectives.hpp"
#include "oracles.hpp"

namespace checks {

using fuseseg::Variant;

constexpr std::size_t conv(std::size_t ci, std::size_t co, std::size_t k) { return ci * co * k * k + co; }
constexpr std::size_t block(std::size_t ci, std::size_t co) { return conv(ci, co, 3) + conv(co, co, 3); }
constexpr std::size_t upconv(std::size_t ci, std::size_t co) { return ci * co * 4 + co; }
constexpr std::size_t sa_gate(std::size_t n, std::size_t r) {
  return conv(n, n / r, 1) + conv(n / r, n / r, 3) + conv(n / r, 1, 1);
}

// Learnable count written out per variant from the layer table: decoder widths
// B/32..B/2, encoder widths equal (or half, for the halved variants), 3x3 blocks,
// 2x2 up-convolutions, a 1x1 head.
inline std::size_t closed_form_params(Variant v, std::size_t B, std::size_t r) {
  std::array<std::size_t, 5> d{}, e{};
  for (std::size_t i = 0; i < 5; ++i) d[i] = B >> (5 - i);
  const bool halved = v == Variant::late_fuse || v == Variant::fuse_unet || v == Variant::fuse_unet_sa ||
                      v == Variant::proposed;
  for (std::size_t i = 0; i < 5; ++i) e[i] = halved ? d[i] / 2 : d[i];

  std::size_t total = 0;
  std::array<std::size_t, 5> skip{};
  switch (v) {
    case Variant::unet:
    case Variant::unet_sa:
    case Variant::early_fuse: {
      std::size_t in = v == Variant::early_fuse ? 2 : 1;
      for (std::size_t i = 0; i < 5; ++i) {
        total += block(in, e[i]);
        if (v == Variant::unet_sa) total += sa_gate(e[i], r);
        skip[i] = in = e[i];
      }
      total += block(e[4], B);
      break;
    }
    case Variant::late_fuse: {
      for (std::size_t i = 0; i < 5; ++i) {
        total += 2 * block(i ? e[i - 1] : 1, e[i]);
        skip[i] = e[i];
      }
      total += 2 * block(e[4], B / 2);
      break;
    }
    default: {
      const bool sum = v == Variant::fuse_add;
      std::size_t master_in = 1;
      for (std::size_t i = 0; i < 5; ++i) {
        total += block(master_in, e[i]) + block(i ? e[i - 1] : 1, e[i]);
        if (v == Variant::proposed) total += sa_gate(e[i], r);
        if (v == Variant::fuse_unet_sa) total += 2 * sa_gate(e[i], r);
        skip[i] = master_in = sum ? e[i] : 2 * e[i];
      }
      total += block(skip[4], B);
      break;
    }
  }
  std::size_t prev = B;
  for (std::size_t k = 0; k < 5; ++k) {
    const std::size_t i = 4 - k;
    total += upconv(prev, d[i]) + block(d[i] + skip[i], d[i]);
    prev = d[i];
  }
  return total + conv(d[0], 1, 1);
}

struct ModelGradResult {
  oracle::GradCheck check;
  std::vector<std::string> leaves;
};

// Full-size `proposed` on one 2-modality 32x32 input under the combined loss.
// Coordinates are spread over a leaf from every stage of the network.
inline ModelGradResult proposed_model_grad_check(std::size_t coords_per_leaf = 12, double h = 1e-3,
                                                 double floor = 1e-8, std::uint64_t seed = 2024) {
  using namespace fuseseg;
  Model model = build_model(default_spec(Variant::proposed), seed);
  std::mt19937_64 rng(seed);
  const Tensor master = oracle::random_tensor({1, 1, 32, 32}, rng, false, 0.0, 1.0);
  const Tensor assistant = oracle::random_tensor({1, 1, 32, 32}, rng, false, 0.0, 1.0);
  std::vector<double> y(32 * 32, 0.0);
  for (std::size_t i = 10; i < 20; ++i)
    for (std::size_t j = 8; j < 22; ++j) y[i * 32 + j] = 1.0;
  const Tensor label = Tensor::from_values({1, 1, 32, 32}, y);

  ModelGradResult r;
  r.leaves = {"enc.master.1.conv1.weight",
              "enc.assistant.1.conv2.bias",
              "enc.master.1.sa.reduce.weight",
              "enc.master.1.sa.dilated.weight",
              "enc.master.3.sa.collapse.weight",
              "enc.master.5.sa.collapse.bias",
              "enc.assistant.4.conv1.weight",
              "bottleneck.conv2.weight",
              "dec.5.up.weight",
              "dec.2.conv1.weight",
              "dec.1.conv2.bias",
              "head.weight",
              "head.bias"};
  std::vector<Tensor> leaves;
  for (const auto& name : r.leaves) leaves.push_back(model.parameter(name));
  auto loss = [&] { return batch_loss(model.forward(master, assistant).prob, label); };
  r.check = oracle::grad_check(loss, leaves, coords_per_leaf, rng, h, floor);
  return r;
}

}  // namespace checks
