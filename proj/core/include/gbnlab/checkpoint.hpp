#pragma once

#include <cstdint>
#include <filesystem>

#include "gbnlab/model.hpp"

namespace gbnlab {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Seed of the training run plus the number of optimizer steps taken; every
// random stream in training is derived from these.
struct TrainingRngState {
  std::uint64_t seed = 0;
  std::uint64_t steps = 0;

  friend bool operator==(const TrainingRngState&, const TrainingRngState&) = default;
};

/// Binary layout (all integers and reals little-endian):
///
///   "GBNLABCK"  u32 version
///   u32 count, then count x (str key, str value)      topology
///   u64 seed, u64 steps                               rng state
///   u32 count, then count x (str name, u32 rank, u64 dims[rank], f64 values)
///   u32 count, then count x (str name, u64 c, f64 mean[c], f64 var[c],
///                             f64 xi, f64 alpha, u64 num_batches_seen)
///
/// where str is u32 length followed by bytes.
void save_checkpoint(const LeNet& model, const TrainingRngState& rng,
                     const std::filesystem::path& path);

/// Restores parameters and normalization state into `model`. Throws
/// VersionError on a version mismatch and TopologyError naming the first
/// differing topology entry.
TrainingRngState load_checkpoint(LeNet& model, const std::filesystem::path& path);

/// Rebuilds the model configuration stored in a checkpoint.
ModelConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace gbnlab
