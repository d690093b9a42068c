#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fuseseg/ops.hpp"
#include "fuseseg/tensor.hpp"

namespace fuseseg {

/// Architecture variants of the comparison ladder.
enum class Variant {
  unet,          // single encoder on the master modality
  unet_sa,       // unet with an SA gate before each pooling
  early_fuse,    // unet on the channel-stacked modalities
  late_fuse,     // two halved encoders joined only at the bottleneck
  fuse_origin,   // two full encoders, concatenation fusion at every level
  fuse_add,      // fuse_origin with pixel-wise summation fusion
  fuse_unet,     // fuse_origin with halved encoders
  fuse_unet_sa,  // fuse_unet, each stream self-gated by its own SA map
  proposed,      // fuse_unet, both streams gated by the master's SA map
};

std::span<const Variant> all_variants();
std::string_view variant_name(Variant v);
/// Throws std::invalid_argument listing the valid names.
Variant parse_variant(std::string_view name);

/// Variant consumes an assistant image.
bool is_two_stream(Variant v);
/// Variant carries SA gates.
bool has_attention(Variant v);
/// Variant uses the halved encoder channel plan.
bool has_halved_encoder(Variant v);

/// Spatial attention gate on n input channels: reduction factor r, atrous rate D.
struct SAConfig {
  int n = 0;
  int r = 16;
  int D = 4;
  void validate() const;
};

/// Learnables of one SA gate: 1x1 reduce (n -> n/r), 3x3 atrous (n/r -> n/r),
/// 1x1 collapse (n/r -> 1).
struct SAWeights {
  Tensor reduce_w, reduce_b;
  Tensor dilated_w, dilated_b;
  Tensor collapse_w, collapse_b;
};

/// Weight heatmap (N,1,H,W) in (0,1) from (N,n,H,W) features.
Tensor sa_forward(const Tensor& features, const SAConfig& config, const SAWeights& weights);

/// SA settings shared by every gate of a model; n is taken from each block.
struct SAOptions {
  int reduction = 16;
  int dilation = 4;
  bool operator==(const SAOptions&) const = default;
};

struct ModelSpec {
  Variant variant = Variant::unet;
  std::array<int, 5> encoder_channels{};  // per stream
  int bottleneck_channels = 0;
  int in_channels_per_modality = 1;
  std::optional<SAOptions> sa;

  /// Throws std::invalid_argument on an inconsistent channel plan or SA setting.
  void validate() const;
  /// Stable text form; the checkpoint hash is taken over it.
  std::string canonical() const;
  /// Inverse of canonical(); throws std::invalid_argument on malformed text.
  static ModelSpec from_canonical(std::string_view text);
  std::uint64_t hash() const;
  /// Decoder channels at block i (0-based), derived from the bottleneck width.
  int decoder_channels(std::size_t block) const;
};

/// Default channel plan for a variant. `bottleneck` = 1024 is the full-size
/// plan (unet encoder 32..512); smaller powers of two shrink every layer.
ModelSpec default_spec(Variant v, int bottleneck = 1024);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ForwardOptions {
  /// Replaces every SA map by the constant 1 (test hook).
  bool unit_attention = false;
};

struct ForwardResult {
  Tensor prob;                     // (N,1,H,W), values in (0,1)
  std::vector<Tensor> attention;   // (N,1,H_i,W_i) per SA site, block order
  std::vector<std::string> sites;  // e.g. "block1", or "block1.master"/"block1.assistant"
};

class Model {
 public:
  struct Conv {
    std::size_t weight = 0;  // index into parameters
    std::size_t bias = 0;
    int dilation = 1;
    int padding = 0;
    int stride = 1;
    bool transpose = false;
  };
  struct SAGate {
    SAConfig config;
    Conv reduce, dilated, collapse;
  };
  struct Block {
    Conv first, second;
  };
  struct Stream {
    std::vector<Block> blocks;  // 5 encoder blocks
    std::vector<SAGate> gates;  // 0 or 5
    std::optional<Block> bottleneck;  // late fusion only
  };

  const ModelSpec& spec() const { return spec_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::vector<NamedTensor>& parameters() { return params_; }
  /// Throws std::out_of_range for an unknown name.
  Tensor& parameter(std::string_view name);
  const std::vector<std::string>& topology() const { return topology_; }

  ForwardResult forward(const Tensor& master, const std::optional<Tensor>& assistant,
                        const ForwardOptions& options = {}) const;

  void zero_grad();

 private:
  friend Model build_model(const ModelSpec& spec, std::uint64_t seed);

  Conv add_conv(const std::string& name, int c_in, int c_out, int k, int dilation, std::uint64_t seed);
  Conv add_upconv(const std::string& name, int c_in, int c_out, std::uint64_t seed);
  Block add_block(const std::string& name, int c_in, int c_out, std::uint64_t seed);
  SAGate add_gate(const std::string& name, int n, std::uint64_t seed);

  Tensor apply(const Conv& c, const Tensor& x) const;
  Tensor apply(const Block& b, const Tensor& x) const;
  Tensor apply(const SAGate& g, const Tensor& x) const;

  ModelSpec spec_;
  std::vector<NamedTensor> params_;
  std::vector<std::string> topology_;
  Stream master_, assistant_;
  Block bottleneck_;
  std::vector<Conv> up_;       // decoder block order 5..1
  std::vector<Block> decode_;  // decoder block order 5..1
  Conv head_;
};

/// Builds and initializes a model. Each parameter is seeded from (seed, name),
/// so layers with the same name are initialized identically across variants.
Model build_model(const ModelSpec& spec, std::uint64_t seed);

/// Standalone SA gate, with its own parameters, for inspection and tests.
class SABlock {
 public:
  SABlock(const SAConfig& config, std::uint64_t seed);
  const SAConfig& config() const { return config_; }
  std::vector<NamedTensor>& parameters() { return params_; }
  std::size_t param_count() const;
  Tensor forward(const Tensor& features) const;

 private:
  SAConfig config_;
  std::vector<NamedTensor> params_;  // reduce w/b, dilated w/b, collapse w/b
};

/// Number of scalar learnables.
std::size_t count_params(const Model& model);
std::size_t count_params(std::span<const NamedTensor> params);

/// Millions with one decimal, e.g. "34.5M".
std::string format_millions(std::size_t count);

}  // namespace fuseseg
