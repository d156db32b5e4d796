#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

#include "gbnlab/eval.hpp"
#include "gbnlab/model.hpp"
#include "gbnlab/train.hpp"

namespace gbnlab {

struct DataConfig {
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  std::size_t train_limit = 0;  // 0 keeps everything
  std::size_t test_limit = 0;
};

struct EvalConfig {
  GatingMode gating = GatingMode::soft();
  EvalOptions options;
  AttackSuite suite;
  bool adaptive = false;  // append gate-fooling and branch-forced attacks
};

struct ExperimentConfig {
  std::string run_id = "run";
  std::uint64_t seed = 0;
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  std::filesystem::path output_dir = "runs/run";
  std::string source_text;  // the document as read, echoed into output_dir

  // Replaces every seed in the experiment with `seed`.
  void override_seed(std::uint64_t seed);
};

/// Parses a YAML experiment document. Unknown keys and bad values raise
/// ConfigError carrying the line and column. Relative paths resolve
/// against base_dir.
ExperimentConfig parse_experiment_config(const std::string& text,
                                         const std::filesystem::path& base_dir = ".");
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Training and test splits named by the config, truncated to the limits.
Dataset load_train_data(const ExperimentConfig& config);
Dataset load_test_data(const ExperimentConfig& config);

}  // namespace gbnlab
