#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gbnlab/attacks.hpp"
#include "gbnlab/data.hpp"
#include "gbnlab/model.hpp"

namespace gbnlab {

enum class AttackKind { Pgd, Fgsm, MiFgsm, GaussianNoise, GateFooling, BranchForced };

std::string to_string(AttackKind kind);
AttackKind parse_attack_kind(const std::string& text);

struct SuiteEntry {
  std::string name;
  AttackKind kind = AttackKind::Pgd;
  AttackSpec spec;
  int trials = 10;                 // GaussianNoise
  DomainLabel branch{0};           // BranchForced: forced branch; GateFooling: domain pushed away from
};

using AttackSuite = std::vector<SuiteEntry>;

/// PGD-L1, PGD-L2, Gaussian noise (L2), PGD-Linf, FGSM and MI-FGSM at the
/// MNIST budgets; PGD and MI-FGSM run `iterations` steps with step size
/// 2.5 * eps / iterations.
AttackSuite standard_suite(int iterations);

/// Gate-fooling PGD plus one branch-forced PGD per branch, all Linf.
AttackSuite adaptive_suite(const LeNet& model, int iterations);

struct EvalOptions {
  std::size_t batch_size = 100;
  std::uint64_t seed = 0;
  int restarts = 1;  // applied to PGD-style entries
  bool gate_accuracy = true;
  // Branch i of the model handles domains[i]; used for gate accuracy.
  std::vector<int> domains{0, 1, 2, 3};
};

struct EvalReport {
  std::size_t samples = 0;
  double clean_accuracy = 0.0;
  std::map<std::string, double> per_attack_accuracy;
  std::map<std::string, double> per_type_worst;  // keys L1 / L2 / Linf
  double all_attacks_accuracy = 0.0;
  // slot (1-based) -> domain -> fraction routed to that domain's branch
  std::optional<std::map<int, std::map<int, double>>> gate_accuracy_per_layer;

  // all_attacks <= min per-type worst <= min per-attack, all within [0, 1].
  bool ordering_holds() const;
};

/// Evaluates under `mode`. Throws UsageError for an empty suite.
EvalReport evaluate(LeNet& model, const Dataset& data, const AttackSuite& suite, GatingMode mode,
                    const EvalOptions& options = {});

/// evaluate() for a model trained on clean plus two perturbation types.
EvalReport held_out_perturbation_eval(LeNet& model, const Dataset& data, const AttackSuite& suite,
                                      GatingMode mode, const EvalOptions& options);

/// Runs one suite entry on a batch.
AdversarialBatch run_attack(LeNet& model, const SuiteEntry& entry, const Tensor& x,
                            std::span<const int> y, GatingMode mode, std::uint64_t seed,
                            int restarts = 1);

/// Fraction of rows whose gate at `slot` (0-based) routes to `branch`.
double gate_accuracy(const LeNet& model, std::size_t slot, const Tensor& x, int branch);

}  // namespace gbnlab
