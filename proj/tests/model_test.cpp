#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include "checks.hpp"
#include "fuseseg/checkpoint.hpp"
#include "fuseseg/model.hpp"
#include "oracles.hpp"

using namespace fuseseg;

namespace {

struct Inputs {
  Tensor master, assistant;
};

Inputs inputs(std::size_t n, std::size_t side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {oracle::random_tensor({n, 1, side, side}, rng, false, 0.0, 1.0),
          oracle::random_tensor({n, 1, side, side}, rng, false, 0.0, 1.0)};
}

ForwardResult run(const Model& m, const Inputs& in, const ForwardOptions& opt = {}) {
  NoGradGuard g;
  return m.forward(in.master, is_two_stream(m.spec().variant) ? std::optional(in.assistant) : std::nullopt, opt);
}

ModelSpec desk(Variant v) {
  ModelSpec s = default_spec(v, 128);
  if (s.sa) s.sa = SAOptions{2, 4};
  return s;
}

}  // namespace

TEST(SAGate, ZeroFeaturesGiveHalf) {
  SABlock sa({64, 16, 4}, 1);
  const Tensor map = sa.forward(Tensor::zeros({2, 64, 8, 8}));
  EXPECT_EQ(map.shape(), (Shape{2, 1, 8, 8}));
  for (double v : map.values()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(SAGate, MapIsInsideOpenUnitInterval) {
  std::mt19937_64 rng(2);
  SABlock sa({32, 4, 2}, 3);
  const Tensor map = sa.forward(oracle::random_tensor({1, 32, 16, 16}, rng, false, -5.0, 5.0));
  for (double v : map.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(SAGate, ParameterCountClosedForm) {
  EXPECT_EQ(SABlock({512, 16, 4}, 0).param_count(), 25697u);
  EXPECT_EQ(checks::sa_gate(512, 16), 16416u + 9248u + 33u);
  EXPECT_EQ(SABlock({16, 2, 4}, 0).param_count(), checks::sa_gate(16, 2));
}

TEST(SAGate, RejectsBadConfig) {
  EXPECT_THROW(SABlock({30, 16, 4}, 0), std::invalid_argument);
  EXPECT_THROW(SABlock({64, 16, 0}, 0), std::invalid_argument);
  EXPECT_THROW(SABlock({8, 16, 4}, 0), std::invalid_argument);
}

TEST(SAGate, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  SABlock sa({16, 4, 2}, 5);
  Tensor x = oracle::random_tensor({1, 16, 8, 8}, rng, true);
  std::vector<Tensor> leaves{x};
  for (auto& p : sa.parameters()) leaves.push_back(p.tensor);
  const auto r = oracle::grad_check([&] { return sum(sa.forward(x)); }, leaves, 60, rng);
  EXPECT_LT(r.max_rel, 1e-4);
  EXPECT_GE(r.checked, 50u);
}

TEST(ParamCount, SpotValueForOneConv) {
  const std::vector<NamedTensor> layer{{"w", Tensor::zeros({8, 3, 3, 3})}, {"b", Tensor::zeros({8})}};
  EXPECT_EQ(count_params(layer), 224u);
  EXPECT_EQ(checks::conv(3, 8, 3), 224u);
}

TEST(ParamCount, EnumerationEqualsClosedFormForEveryVariant) {
  for (Variant v : all_variants()) {
    EXPECT_EQ(count_params(build_model(default_spec(v), 0)), checks::closed_form_params(v, 1024, 16))
        << variant_name(v);
    EXPECT_EQ(count_params(build_model(desk(v), 0)), checks::closed_form_params(v, 128, 2)) << variant_name(v);
  }
}

TEST(ParamCount, EarlyFusionAddsOneInputChannel) {
  const auto unet = count_params(build_model(default_spec(Variant::unet), 0));
  const auto early = count_params(build_model(default_spec(Variant::early_fuse), 0));
  EXPECT_EQ(early - unet, 288u);
}

TEST(ParamCount, FormatsMillions) {
  EXPECT_EQ(format_millions(34'512'345), "34.5M");
  EXPECT_EQ(format_millions(25'697), "0.0M");
}

TEST(Variants, NamesRoundTripAndUnknownListsChoices) {
  for (Variant v : all_variants()) EXPECT_EQ(parse_variant(variant_name(v)), v);
  try {
    parse_variant("fusenet");
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("proposed"), std::string::npos);
  }
}

TEST(Spec, CanonicalRoundTripAndValidation) {
  for (Variant v : all_variants()) {
    const ModelSpec s = desk(v);
    const ModelSpec back = ModelSpec::from_canonical(s.canonical());
    EXPECT_EQ(back.canonical(), s.canonical());
    EXPECT_EQ(back.hash(), s.hash());
  }
  EXPECT_THROW(ModelSpec::from_canonical("variant=unet;enc=1,2"), std::invalid_argument);
  ModelSpec bad = default_spec(Variant::proposed);
  bad.encoder_channels[2] = 100;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  EXPECT_THROW(default_spec(Variant::fuse_unet, 96).validate(), std::invalid_argument);
}

TEST(Forward, ShapesAndAttentionSites) {
  const Inputs in = inputs(2, 64, 1);
  for (Variant v : all_variants()) {
    const ForwardResult r = run(build_model(desk(v), 1), in);
    EXPECT_EQ(r.prob.shape(), (Shape{2, 1, 64, 64})) << variant_name(v);
    for (double p : r.prob.values()) {
      ASSERT_GT(p, 0.0);
      ASSERT_LT(p, 1.0);
    }
    const std::size_t sites = !has_attention(v) ? 0 : v == Variant::fuse_unet_sa ? 10 : 5;
    ASSERT_EQ(r.attention.size(), sites) << variant_name(v);
    for (std::size_t i = 0; i < sites; ++i) {
      const std::size_t side = 64 >> (v == Variant::fuse_unet_sa ? i / 2 : i);
      EXPECT_EQ(r.attention[i].shape(), (Shape{2, 1, side, side}));
    }
  }
}

TEST(Forward, ProposedSitesAreNamedByBlock) {
  const ForwardResult r = run(build_model(desk(Variant::proposed), 1), inputs(1, 64, 2));
  EXPECT_EQ(r.sites, (std::vector<std::string>{"block1", "block2", "block3", "block4", "block5"}));
}

TEST(Forward, UnitAttentionReducesProposedToFuseUnet) {
  const Inputs in = inputs(1, 32, 3);
  const auto a = run(build_model(desk(Variant::proposed), 9), in, {true}).prob;
  const auto b = run(build_model(desk(Variant::fuse_unet), 9), in).prob;
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
}

TEST(Forward, RejectsWrongInputs) {
  const Model m = build_model(desk(Variant::proposed), 0);
  const Inputs in = inputs(1, 64, 0);
  EXPECT_THROW(m.forward(in.master, std::nullopt), std::invalid_argument);
  EXPECT_THROW(m.forward(Tensor::zeros({1, 1, 48, 48}), Tensor::zeros({1, 1, 48, 48})), ShapeError);
  EXPECT_THROW(m.forward(in.master, Tensor::zeros({1, 1, 32, 32})), ShapeError);
  const Model u = build_model(desk(Variant::unet), 0);
  EXPECT_THROW(u.forward(in.master, in.assistant), std::invalid_argument);
}

TEST(Init, SameSeedIsBitIdenticalAndBiasesAreZero) {
  const Inputs in = inputs(1, 64, 4);
  const auto a = run(build_model(desk(Variant::proposed), 17), in).prob;
  const auto b = run(build_model(desk(Variant::proposed), 17), in).prob;
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  const Model m = build_model(desk(Variant::proposed), 17);
  for (const auto& p : m.parameters()) {
    if (p.name.ends_with(".bias")) {
      for (double v : p.tensor.values()) EXPECT_EQ(v, 0.0) << p.name;
    }
  }
}

TEST(Init, SharedLayerNamesGetSharedValues) {
  Model a = build_model(desk(Variant::fuse_unet), 5);
  Model b = build_model(desk(Variant::proposed), 5);
  const auto& x = a.parameter("enc.assistant.3.conv1.weight");
  const auto& y = b.parameter("enc.assistant.3.conv1.weight");
  EXPECT_TRUE(std::equal(x.values().begin(), x.values().end(), y.values().begin()));
  EXPECT_THROW(a.parameter("enc.master.1.sa.reduce.weight"), std::out_of_range);
}

TEST(ModelGradient, ProposedMatchesFiniteDifferences) {
  const auto r = checks::proposed_model_grad_check();
  EXPECT_GE(r.check.checked, 50u);
  EXPECT_LT(r.check.max_rel, 1e-4);
}

// At h=1e-3 most encoder coordinates straddle a kink. A small step reaches
// them; its round-off (~1e-11 absolute on a loss near 1.5) sets the floor.
TEST(ModelGradient, SmallStepReachesDeepLeaves) {
  const auto r = checks::proposed_model_grad_check(6, 1e-5, 1e-6);
  EXPECT_GE(r.check.nonzero, 40u);
  EXPECT_LT(r.check.max_rel, 1e-3);
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() / ("fuseseg_ckpt_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

TEST_F(CheckpointTest, SaveLoadKeepsForwardOutput) {
  const Model m = build_model(desk(Variant::proposed), 8);
  save_checkpoint(dir_ / "m.fckp", m);
  const Model back = load_checkpoint(dir_ / "m.fckp", desk(Variant::proposed));
  const Inputs in = inputs(1, 64, 5);
  const auto a = run(m, in).prob;
  const auto b = run(back, in).prob;
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  EXPECT_EQ(load_checkpoint(dir_ / "m.fckp").spec().canonical(), m.spec().canonical());
}

TEST_F(CheckpointTest, WrongVariantIsASpecMismatch) {
  save_checkpoint(dir_ / "m.fckp", build_model(desk(Variant::proposed), 8));
  EXPECT_THROW(load_checkpoint(dir_ / "m.fckp", desk(Variant::fuse_unet)), std::invalid_argument);
}

TEST_F(CheckpointTest, CorruptMagicAndTrailingBytesAreFormatErrors) {
  save_checkpoint(dir_ / "m.fckp", build_model(desk(Variant::unet), 8));
  std::string bytes;
  {
    std::ifstream in(dir_ / "m.fckp", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) { std::ofstream(dir_ / "bad.fckp", std::ios::binary) << b; };
  write("XCKP" + bytes.substr(4));
  EXPECT_THROW(load_checkpoint(dir_ / "bad.fckp"), FormatError);
  write(bytes + "junk");
  EXPECT_THROW(load_checkpoint(dir_ / "bad.fckp"), FormatError);
  write(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_checkpoint(dir_ / "bad.fckp"), FormatError);
}
