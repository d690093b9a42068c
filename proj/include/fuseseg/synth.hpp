#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fuseseg/tensor.hpp"

namespace fuseseg {

struct Range {
  double lo = 0.0, hi = 0.0;
  bool contains(double v) const { return v >= lo && v <= hi; }
  bool overlaps(const Range& o) const { return lo <= o.hi && o.lo <= hi; }
  bool operator==(const Range&) const = default;
};

struct IntRange {
  int lo = 0, hi = 0;
  bool operator==(const IntRange&) const = default;
};

/// Background level shared by both modalities before noise.
inline constexpr double kPhantomBackground = 0.1;

struct PhantomParams {
  int image_size = 64;
  IntRange n_distractors{1, 4};
  Range mass_radius{4.0, 12.0};
  double spiculation = 0.3;
  Range master_fg_intensity{0.6, 0.9};   // mass in the master image
  Range distractor_intensity{0.6, 0.9};  // distractors, both modalities
  Range assistant_mass_contrast{0.25, 0.4};
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument when a field or the modality premise is violated.
  void validate() const;
  /// key=value form used by the dataset manifest.
  std::map<std::string, std::string> to_map() const;
  static PhantomParams from_map(const std::map<std::string, std::string>& kv);
  bool operator==(const PhantomParams&) const = default;
};

/// Raised when a distractor cannot be placed clear of the mass.
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SegmentationSample {
  std::string sample_id;
  Tensor master;     // (1,H,W) in [0,1]
  Tensor assistant;  // (1,H,W) in [0,1]
  Tensor label;      // (1,H,W) binary, the mass support
  /// Union of distractor supports; generator output only, not persisted.
  Tensor distractors;
};

std::string sample_id_for(std::size_t index);

/// Pure function of (params, index).
SegmentationSample generate_sample(const PhantomParams& params, std::size_t index);
std::vector<SegmentationSample> generate_dataset(const PhantomParams& params, std::size_t count);

/// Per-image min-max to [0,1]; a constant image maps to zeros.
Tensor normalize(const Tensor& image);

/// Shuffled partition of [0, n) into k folds whose sizes differ by at most one
/// (the first n % k folds are the larger ones).
std::vector<std::vector<std::size_t>> kfold_split(std::size_t n_samples, int k, std::uint64_t seed);

struct Dataset {
  PhantomParams params;
  std::vector<SegmentationSample> samples;
};

/// dir/manifest.txt plus dir/<sample_id>/{master,assistant,label}.ftns.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

/// 8-bit binary PGM of a single-channel image, min-max scaled to 0..255.
void write_pgm(const std::filesystem::path& path, const Tensor& image);

}  // namespace fuseseg
