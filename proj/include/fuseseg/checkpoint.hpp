#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fuseseg/model.hpp"
#include "fuseseg/trainer.hpp"

namespace fuseseg {

// Model checkpoint (little-endian):
//   "FCKP" | u32 version=1 | str spec.canonical() | u64 spec.hash() | u64 count
//   | count x (str name | tensor record)
// where str = u32 length | bytes.

void save_checkpoint(const std::filesystem::path& path, const Model& model);
/// Rebuilds the model recorded in the file.
Model load_checkpoint(const std::filesystem::path& path);
/// As above, but throws std::invalid_argument when the file holds a different spec.
Model load_checkpoint(const std::filesystem::path& path, const ModelSpec& expected);

/// Everything needed to continue a run bit-for-bit.
struct TrainingState {
  std::uint64_t config_hash = 0;
  std::uint64_t run_seed = 0;
  int epochs_done = 0;
  std::vector<EpochRecord> history;
  OptimizerState optimizer;
};

// Training state: "FTRS" | u32 version=1 | u64 config hash | u64 run seed | u32 epochs done
//   | u64 history size | history x (u32 epoch | f64 loss | f64 dice) | u64 t
//   | embedded model checkpoint | per parameter: m, v, v_max tensor records

void save_training_state(const std::filesystem::path& path, const Model& model, const TrainingState& state);
/// Loads into `model`, which must have the recorded spec.
TrainingState load_training_state(const std::filesystem::path& path, Model& model);

}  // namespace fuseseg
