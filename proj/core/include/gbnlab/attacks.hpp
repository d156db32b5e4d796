#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gbnlab/gbn.hpp"
#include "gbnlab/model.hpp"
#include "gbnlab/norm.hpp"
#include "gbnlab/tensor.hpp"

namespace gbnlab {

struct AttackSpec {
  Norm norm = Norm::Linf;
  double epsilon = 0.3;
  double step_size = 0.01;
  int iterations = 50;
  int restarts = 1;
  // Start the first restart from a random point as well; later restarts
  // always start randomly.
  bool random_start = false;
  // Also consider each restart's starting point when picking the best.
  bool keep_start_candidate = false;
  double decay = 1.0;  // MI-FGSM momentum decay
  std::uint64_t seed = 0;

  void validate() const;
};

// Hyperparameters for MNIST-scale budgets: L1 eps 10, L2 eps 2, Linf eps 0.3.
AttackSpec default_pgd_spec(Norm norm);

struct AdversarialBatch {
  Tensor x_adv;
  std::vector<bool> success_mask;  // true where the model misclassifies x_adv
  std::vector<double> loss;        // attacked objective at x_adv, per sample
  Norm norm = Norm::Linf;
  double epsilon = 0.0;
};

using LogitsFn = std::function<Tensor(const Tensor&)>;

// Euclidean projections onto the eps-ball of the given norm. The Tensor
// overloads treat the whole tensor as one vector.
void project_in_place(std::span<double> v, Norm norm, double epsilon);
Tensor project_linf(const Tensor& delta, double epsilon);
Tensor project_l2(const Tensor& delta, double epsilon);
Tensor project_l1(const Tensor& delta, double epsilon);

/// Per-sample Lp distance between two batches with equal shapes.
std::vector<double> per_sample_distance(const Tensor& a, const Tensor& b, Norm norm);

AdversarialBatch pgd(const LogitsFn& model, const Tensor& x, std::span<const int> y,
                     const AttackSpec& spec);
AdversarialBatch fgsm(const LogitsFn& model, const Tensor& x, std::span<const int> y,
                      double epsilon);
AdversarialBatch mi_fgsm(const LogitsFn& model, const Tensor& x, std::span<const int> y,
                         const AttackSpec& spec);
AdversarialBatch gaussian_noise_attack(const Tensor& x, std::span<const int> y,
                                       const LogitsFn& model, double epsilon, int trials,
                                       std::uint64_t seed);

/// PGD against a LeNet evaluated under `mode`; parameters are frozen while
/// the attack runs.
AdversarialBatch pgd(LeNet& model, const Tensor& x, std::span<const int> y,
                     const AttackSpec& spec, GatingMode mode);

/// PGD that maximizes the summed domain-prediction loss of every gate,
/// pushing each gate away from `domain`.
AdversarialBatch gate_fooling_pgd(LeNet& model, const Tensor& x, std::span<const int> y,
                                  const AttackSpec& spec, DomainLabel domain = DomainLabel{0});

/// PGD with every block forced to `branch` while computing gradients; the
/// success mask is evaluated under the model's own gating mode.
AdversarialBatch branch_forced_attack(LeNet& model, const Tensor& x, std::span<const int> y,
                                      const AttackSpec& spec, DomainLabel branch);

LogitsFn eval_logits(const LeNet& model);
std::vector<bool> misclassified(const LogitsFn& model, const Tensor& x, std::span<const int> y);

}  // namespace gbnlab
