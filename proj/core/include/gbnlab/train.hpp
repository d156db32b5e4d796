#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gbnlab/attacks.hpp"
#include "gbnlab/checkpoint.hpp"
#include "gbnlab/data.hpp"
#include "gbnlab/model.hpp"

namespace gbnlab {

enum class Defense { Vanilla, GBN, AVG, MAX, SeparateBN };

std::string to_string(Defense defense);
Defense parse_defense(const std::string& text);

// Domain d >= 1 is the adversarial domain of perturbation type d:
// 1 = L1, 2 = L2, 3 = Linf. Domain 0 is clean.
Norm domain_norm(int domain);

struct TrainConfig {
  int epochs = 5;
  std::size_t batch_size = 64;
  double learning_rate = 0.1;
  double weight_decay = 0.0;
  // Step size for the gate parameters; <= 0 means learning_rate.
  double gate_learning_rate = 0.0;
  std::uint64_t seed = 0;
  // attack_specs[d - 1] generates domain d.
  std::vector<AttackSpec> attack_specs;
  Defense defense = Defense::GBN;
  // Domains trained on; branch i of every block handles domains[i].
  std::vector<int> domains{0, 1, 2, 3};

  // Throws ConfigError when the config cannot drive `model`.
  void validate(const LeNet& model) const;
  double gate_rate() const { return gate_learning_rate > 0.0 ? gate_learning_rate : learning_rate; }
};

/// L1 / L2 / Linf PGD specs at the MNIST budgets with `iterations` steps
/// and step size 2.5 * eps / iterations.
std::vector<AttackSpec> scaled_attack_specs(int iterations);

struct EpochMetrics {
  int epoch = 0;  // 1-based
  double classification_loss = 0.0;      // mean over batches
  double domain_prediction_loss = 0.0;   // mean over batches, GBN only
  double clean_train_accuracy = 0.0;
  std::size_t batches = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  TrainingRngState rng;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// theta <- theta - lr * (grad + weight_decay * theta) for every parameter
/// with a gradient; gradients are cleared afterwards.
void sgd_step(std::span<const NamedTensor> params, double learning_rate, double weight_decay);

TrainResult train_gbn(LeNet& model, const Dataset& data, const TrainConfig& cfg,
                      const EpochCallback& on_epoch = {});
TrainResult train_vanilla(LeNet& model, const Dataset& data, const TrainConfig& cfg,
                          const EpochCallback& on_epoch = {});
TrainResult train_avg(LeNet& model, const Dataset& data, const TrainConfig& cfg,
                      const EpochCallback& on_epoch = {});
TrainResult train_max(LeNet& model, const Dataset& data, const TrainConfig& cfg,
                      const EpochCallback& on_epoch = {});

/// Dispatches on cfg.defense.
TrainResult train(LeNet& model, const Dataset& data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

/// Index of the largest entry; the lowest index wins ties.
std::size_t select_max_loss(std::span<const double> losses);

struct BranchStatRecord {
  std::size_t layer = 0;  // 1-based normalization slot
  std::size_t branch = 0;
  std::size_t channel = 0;
  double running_mean = 0.0;
  double running_var = 0.0;
};

struct ProbeReport {
  std::vector<BranchStatRecord> records;
  // Per layer: mean over channels of |mean(Linf branch) - mean(clean branch)|.
  std::vector<double> divergence;
  // Per layer: the same statistic between the two halves of the clean stream.
  std::vector<double> control;
};

/// Running statistics of every branch of every slot. divergence/control are
/// filled when the model has a Linf branch and split-control states.
ProbeReport branch_statistics(const LeNet& model, std::span<const int> domains);

/// Trains a plain multi-branch BN model with manual branch activation and
/// summed domain losses, then reports its branch statistics.
ProbeReport separate_bn_probe(LeNet& model, const Dataset& data, const TrainConfig& cfg,
                              const EpochCallback& on_epoch = {});

}  // namespace gbnlab
