#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "fuseseg/objectives.hpp"
#include "fuseseg/ops.hpp"
#include "oracles.hpp"

using namespace fuseseg;

namespace {

const Tensor kY4 = Tensor::from_values({4}, {1.0, 0.0, 0.0, 0.0});

Tensor mask(std::size_t n, std::size_t from, std::size_t count) {
  std::vector<double> v(n, 0.0);
  for (std::size_t i = from; i < from + count; ++i) v[i] = 1.0;
  return Tensor::from_values({1, 1, 1, n}, v);
}

}  // namespace

TEST(DiceLoss, HandCases) {
  EXPECT_NEAR(dice_loss(Tensor::full({4}, 0.5), kY4).item(), 0.5, 1e-9);
  EXPECT_NEAR(dice_loss(Tensor::zeros({16}), Tensor::zeros({16})).item(), 0.0, 1e-15);
  const Tensor y = mask(400, 50, 100);
  EXPECT_NEAR(dice_loss(y, y).item(), 0.0, 1e-15);
}

TEST(CeLoss, HandCases) {
  EXPECT_NEAR(ce_loss(Tensor::full({4}, 0.5), kY4).item(), std::log(2.0), 1e-9);
  EXPECT_NEAR(ce_loss(Tensor::from_values({4}, {0.9, 0.1, 0.1, 0.1}), kY4).item(), 0.105361, 1e-6);
  EXPECT_NEAR(ce_loss(Tensor::from_values({4}, {0.9, 0.1, 0.1, 0.1}), kY4).item(), -std::log(0.9), 1e-12);
  EXPECT_LE(ce_loss(kY4, kY4).item(), -std::log1p(-1e-7) + 1e-15);
}

TEST(CombinedLoss, HandCasesAndWeightDegeneracy) {
  EXPECT_NEAR(combined_loss(Tensor::full({4}, 0.5), kY4).item(), 0.5 + std::log(2.0), 1e-9);
  EXPECT_NEAR(combined_loss(Tensor::full({4}, 0.5), kY4).item(), 1.193147, 1e-6);
  const Tensor y = mask(400, 50, 100);
  EXPECT_LE(combined_loss(y, y).item(), 2e-7);

  std::mt19937_64 rng(5);
  const Tensor p = oracle::random_tensor({1, 1, 8, 8}, rng, false, 0.01, 0.99);
  const Tensor t = binarize(oracle::random_tensor({1, 1, 8, 8}, rng, false, 0.0, 1.0));
  LossConfig cfg;
  cfg.alpha = 0.0;
  EXPECT_EQ(combined_loss(p, t, cfg).item(), dice_loss(p, t).item());
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(6);
  Tensor p = oracle::random_tensor({2, 1, 8, 8}, rng, true, 0.05, 0.95);
  const Tensor y = binarize(oracle::random_tensor({2, 1, 8, 8}, rng, false, 0.0, 1.0));
  EXPECT_LT(oracle::grad_check([&] { return dice_loss(p, y); }, p, 60, rng, 1e-4).max_rel, 1e-4);
  EXPECT_LT(oracle::grad_check([&] { return ce_loss(p, y); }, p, 60, rng, 1e-4).max_rel, 1e-4);
  EXPECT_LT(oracle::grad_check([&] { return batch_loss(p, y); }, p, 60, rng, 1e-4).max_rel, 1e-4);
}

TEST(BatchLoss, IsTheMeanOfPerImageLosses) {
  std::mt19937_64 rng(7);
  const Tensor p = oracle::random_tensor({3, 1, 4, 4}, rng, false, 0.01, 0.99);
  const Tensor y = binarize(oracle::random_tensor({3, 1, 4, 4}, rng, false, 0.0, 1.0));
  double expect = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    auto slice = [&](const Tensor& t) {
      return Tensor::from_values({16}, {t.values().begin() + 16 * i, t.values().begin() + 16 * (i + 1)});
    };
    expect += combined_loss(slice(p), slice(y)).item() / 3.0;
  }
  EXPECT_NEAR(batch_loss(p, y).item(), expect, 1e-14);
  EXPECT_THROW(batch_loss(Tensor::zeros({0, 1, 4, 4}), Tensor::zeros({0, 1, 4, 4})), ShapeError);
}

TEST(Losses, RejectInvalidOperands) {
  EXPECT_THROW(dice_loss(Tensor::full({4}, 0.5), Tensor::zeros({5})), ShapeError);
  EXPECT_THROW(dice_loss(Tensor::full({4}, 1.5), kY4), std::invalid_argument);
  EXPECT_THROW(ce_loss(Tensor::full({4}, 0.5), Tensor::full({4}, 0.3)), std::invalid_argument);
  EXPECT_THROW(dice_loss(Tensor::full({4}, 0.5), kY4, 0.0), std::invalid_argument);
  LossConfig bad;
  bad.clamp = 0.6;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Binarize, ThresholdTiesGoForeground) {
  const Tensor b = binarize(Tensor::from_values({3}, {0.5, 0.49, 0.51}));
  EXPECT_EQ(b.values()[0], 1.0);
  EXPECT_EQ(b.values()[1], 0.0);
  EXPECT_EQ(b.values()[2], 1.0);
  std::mt19937_64 rng(8);
  const Tensor p = oracle::random_tensor({100}, rng, false, 0.0, 1.0);
  const Tensor q = binarize(p);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(q.values()[i], p.values()[i] >= 0.5 ? 1.0 : 0.0);
}

TEST(Metrics, HandCases) {
  const Tensor label = mask(200, 20, 50);
  const auto same = compute_metrics(label, label);
  EXPECT_DOUBLE_EQ(same.dice, 1.0);
  EXPECT_DOUBLE_EQ(same.sensitivity, 1.0);
  EXPECT_DOUBLE_EQ(same.relative_area_difference, 0.0);

  const auto cover = compute_metrics(mask(200, 0, 100), label);
  EXPECT_NEAR(cover.dice, 100.0 / 150.0, 1e-9);
  EXPECT_DOUBLE_EQ(cover.sensitivity, 1.0);
  EXPECT_DOUBLE_EQ(cover.relative_area_difference, 1.0);

  const auto disjoint = compute_metrics(mask(200, 100, 50), label);
  EXPECT_LT(disjoint.dice, 1e-8);
  EXPECT_DOUBLE_EQ(disjoint.sensitivity, 0.0);
  EXPECT_DOUBLE_EQ(disjoint.relative_area_difference, 0.0);

  EXPECT_DOUBLE_EQ(sensitivity(mask(10, 0, 3), Tensor::zeros({1, 1, 1, 10})), 1.0);
  EXPECT_THROW(relative_area_difference(mask(10, 0, 3), Tensor::zeros({1, 1, 1, 10})), std::invalid_argument);
}

TEST(Metrics, MatchConfusionMatrixOracleOnRandomPairs) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> density(0.05, 0.6);
  for (int k = 0; k < 100; ++k) {
    std::bernoulli_distribution a(density(rng)), b(density(rng));
    std::vector<double> p(256), y(256);
    for (auto& v : p) v = a(rng);
    for (auto& v : y) v = b(rng);
    y[k % 256] = 1.0;
    const Tensor P = Tensor::from_values({1, 16, 16}, p), Y = Tensor::from_values({1, 16, 16}, y);
    const auto c = oracle::confusion(P, Y);
    const double tp = c.tp, fp = c.fp, fn = c.fn;
    const auto m = compute_metrics(P, Y);
    EXPECT_EQ(m.dice, (2 * tp + 1e-7) / (2 * tp + fp + fn + 1e-7));
    EXPECT_EQ(m.sensitivity, tp / (tp + fn));
    EXPECT_EQ(m.relative_area_difference, std::abs((tp + fp) - (tp + fn)) / (tp + fn));
  }
}

TEST(Aggregate, PopulationSdOverRunMeans) {
  auto run = [](std::vector<double> dice) {
    std::vector<MetricsRecord> r;
    for (double d : dice) r.push_back({"x", d, 1.0, 0.0});
    return r;
  };
  const std::vector<std::vector<MetricsRecord>> runs{run({0.6, 0.8}), run({0.75}), run({0.8, 0.8, 0.8})};
  const auto s = aggregate(runs);
  EXPECT_EQ(s.runs, 3u);
  EXPECT_NEAR(s.dice.mean, 0.75, 1e-15);
  EXPECT_NEAR(s.dice.sd, std::sqrt(0.005 / 3.0), 1e-15);
  EXPECT_EQ(s.dice.format(), "75.0 ± 4.1");
  EXPECT_EQ(s.sensitivity.sd, 0.0);

  const std::vector<std::vector<MetricsRecord>> one{run({0.9, 0.7})};
  EXPECT_EQ(aggregate(one).dice.sd, 0.0);
  const std::vector<double> same{0.4, 0.4, 0.4};
  EXPECT_EQ(mean_sd(same).sd, 0.0);
  EXPECT_THROW(aggregate({}), std::invalid_argument);
}

TEST(MetricsCsv, RoundTripIsExact) {
  const std::vector<MetricsRecord> recs{{"s00001", 0.1 + 0.2, 1.0 / 3.0, 2.0}, {"s00007", 0.0, 1.0, 1e-300}};
  std::stringstream ss;
  write_metrics_csv(ss, recs);
  EXPECT_EQ(ss.str().substr(0, 29), "sample_id,dice,sensitivity,ra");
  const auto back = read_metrics_csv(ss);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].sample_id, recs[i].sample_id);
    EXPECT_EQ(back[i].dice, recs[i].dice);
    EXPECT_EQ(back[i].sensitivity, recs[i].sensitivity);
    EXPECT_EQ(back[i].relative_area_difference, recs[i].relative_area_difference);
  }
  std::stringstream bad("sample_id,dice,sensitivity,rad\ns1,0.5\n");
  EXPECT_THROW(read_metrics_csv(bad), FormatError);
}
