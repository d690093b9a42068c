#pragma once

#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fuseseg/model.hpp"
#include "fuseseg/synth.hpp"
#include "fuseseg/trainer.hpp"

namespace fuseseg {

/// Unknown key, malformed value or failed validation in a run configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Desk-scale bottleneck width (the full-size plan uses 1024).
inline constexpr int kDeskBottleneck = 128;
inline constexpr int kDeskSAReduction = 2;

struct RunConfig {
  PhantomParams phantom;
  std::size_t n_samples = 300;
  std::string data_dir = "dataset";  // relative paths resolve against the output root

  Variant variant = Variant::proposed;
  std::vector<Variant> variants{Variant::fuse_unet, Variant::proposed};
  int bottleneck = kDeskBottleneck;
  int sa_reduction = kDeskSAReduction;
  int sa_dilation = 4;

  TrainConfig train;
  bool resume = false;

  std::string checkpoint;  // export-attention input; empty = <out>/model.fckp
  std::string sample_id;   // export-attention sample; empty = first sample

  std::filesystem::path out = "fuseseg_out";

  ModelSpec model_spec(Variant v) const;
  std::filesystem::path dataset_path() const;
  /// Throws ConfigError.
  void validate() const;
};

struct ConfigKey {
  std::string key;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

/// Every accepted key, in documentation order. Defaults are read from RunConfig{}.
const std::vector<ConfigKey>& config_schema();

void apply_setting(RunConfig& config, std::string_view key, std::string_view value);
/// Parses `key=value` (also accepts surrounding whitespace).
void apply_assignment(RunConfig& config, std::string_view assignment);
/// Flat key=value file; '#' starts a comment; blank lines ignored.
void load_config_file(RunConfig& config, const std::filesystem::path& path);

/// One line per key: name, default, description.
std::string config_reference();

}  // namespace fuseseg
