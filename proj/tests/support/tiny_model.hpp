#pragma once

#include "gbnlab/data.hpp"
#include "gbnlab/model.hpp"
#include "gbnlab/rng.hpp"
#include "gbnlab/train.hpp"

namespace gbnlab::testing {

// 12x12 inputs, 4 classes, a handful of channels: small enough that a full
// training epoch with attacks takes well under a second.
inline ModelConfig tiny_model(NormKind kind, std::size_t branches = 4, std::uint64_t seed = 0) {
  ModelConfig cfg;
  cfg.norm = kind;
  cfg.num_branches = kind == NormKind::Batch || kind == NormKind::None ? 1 : branches;
  cfg.input_size = 12;
  cfg.kernel = 3;
  cfg.conv1_channels = 2;
  cfg.conv2_channels = 3;
  cfg.hidden = 5;
  cfg.classes = 4;
  cfg.gate_hidden_channels = 2;
  cfg.fc_gate_hidden = 6;
  cfg.init_seed = seed;
  return cfg;
}

inline Dataset tiny_images(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  ds.images = Tensor({n, 1, 12, 12});
  for (double& v : ds.images.mutable_data()) v = uniform01(rng);
  for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(static_cast<int>(i % 4));
  return ds;
}

inline TrainConfig tiny_training(int attack_iterations = 2) {
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.learning_rate = 0.05;
  cfg.gate_learning_rate = 0.01;
  cfg.attack_specs = scaled_attack_specs(attack_iterations);
  return cfg;
}

}  // namespace gbnlab::testing
