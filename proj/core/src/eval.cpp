#include "gbnlab/eval.hpp"

#include <algorithm>
#include <limits>

#include "gbnlab/error.hpp"
#include "gbnlab/ops.hpp"
#include "gbnlab/rng.hpp"
#include "gbnlab/train.hpp"

namespace gbnlab {

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::Pgd:
      return "pgd";
    case AttackKind::Fgsm:
      return "fgsm";
    case AttackKind::MiFgsm:
      return "mi_fgsm";
    case AttackKind::GaussianNoise:
      return "gaussian";
    case AttackKind::GateFooling:
      return "gate_fooling";
    case AttackKind::BranchForced:
      return "branch_forced";
  }
  return "pgd";
}

AttackKind parse_attack_kind(const std::string& text) {
  for (AttackKind k : {AttackKind::Pgd, AttackKind::Fgsm, AttackKind::MiFgsm,
                       AttackKind::GaussianNoise, AttackKind::GateFooling,
                       AttackKind::BranchForced}) {
    if (to_string(k) == text) return k;
  }
  throw UsageError("unknown attack kind '" + text +
                   "' (pgd|fgsm|mi_fgsm|gaussian|gate_fooling|branch_forced)");
}

AttackSuite standard_suite(int iterations) {
  const auto specs = scaled_attack_specs(iterations);
  AttackSuite suite;
  suite.push_back({"PGD-L1", AttackKind::Pgd, specs[0]});
  suite.push_back({"PGD-L2", AttackKind::Pgd, specs[1]});
  SuiteEntry noise{"Gaussian-L2", AttackKind::GaussianNoise, specs[1]};
  suite.push_back(noise);
  suite.push_back({"PGD-Linf", AttackKind::Pgd, specs[2]});
  suite.push_back({"FGSM", AttackKind::Fgsm, specs[2]});
  AttackSpec mi = specs[2];
  mi.step_size = mi.epsilon / iterations;
  suite.push_back({"MI-FGSM", AttackKind::MiFgsm, mi});
  return suite;
}

AttackSuite adaptive_suite(const LeNet& model, int iterations) {
  const AttackSpec linf = scaled_attack_specs(iterations)[2];
  AttackSuite suite;
  if (model.has_gates()) suite.push_back({"GateFooling-Linf", AttackKind::GateFooling, linf});
  for (std::size_t k = 0; k < model.num_branches(); ++k) {
    suite.push_back({"BranchForced" + std::to_string(k) + "-Linf", AttackKind::BranchForced, linf,
                     10, DomainLabel{static_cast<int>(k)}});
  }
  return suite;
}

bool EvalReport::ordering_holds() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(clean_accuracy) || !in_unit(all_attacks_accuracy)) return false;
  double min_type = std::numeric_limits<double>::infinity();
  for (const auto& [type, acc] : per_type_worst) {
    if (!in_unit(acc)) return false;
    min_type = std::min(min_type, acc);
  }
  double min_attack = std::numeric_limits<double>::infinity();
  for (const auto& [name, acc] : per_attack_accuracy) {
    if (!in_unit(acc)) return false;
    min_attack = std::min(min_attack, acc);
  }
  return all_attacks_accuracy <= min_type && min_type <= min_attack;
}

AdversarialBatch run_attack(LeNet& model, const SuiteEntry& entry, const Tensor& x,
                            std::span<const int> y, GatingMode mode, std::uint64_t seed,
                            int restarts) {
  AttackSpec spec = entry.spec;
  spec.seed = seed;
  spec.restarts = std::max(spec.restarts, restarts);
  GatingModeScope scope(model, mode);
  switch (entry.kind) {
    case AttackKind::Pgd:
      return pgd(model, x, y, spec, mode);
    case AttackKind::Fgsm: {
      FrozenParameters frozen(model);
      return fgsm(eval_logits(model), x, y, spec.epsilon);
    }
    case AttackKind::MiFgsm: {
      FrozenParameters frozen(model);
      return mi_fgsm(eval_logits(model), x, y, spec);
    }
    case AttackKind::GaussianNoise:
      return gaussian_noise_attack(x, y, eval_logits(model), spec.epsilon, entry.trials, seed);
    case AttackKind::GateFooling:
      return gate_fooling_pgd(model, x, y, spec, entry.branch);
    case AttackKind::BranchForced:
      return branch_forced_attack(model, x, y, spec, entry.branch);
  }
  throw UsageError("unknown attack kind");
}

double gate_accuracy(const LeNet& model, std::size_t slot, const Tensor& x, int branch) {
  NoGradScope no_grad;
  std::vector<Tensor> logits;
  model.forward_eval(x, &logits);
  if (slot >= logits.size() || !logits[slot].defined()) {
    throw UsageError("normalization slot " + std::to_string(slot + 1) + " has no gate");
  }
  const auto top = ops::argmax_rows(logits[slot]);
  std::size_t hits = 0;
  for (int t : top) hits += t == branch;
  return static_cast<double>(hits) / static_cast<double>(top.size());
}

EvalReport evaluate(LeNet& model, const Dataset& data, const AttackSuite& suite, GatingMode mode,
                    const EvalOptions& options) {
  if (suite.empty()) throw UsageError("evaluate: empty attack suite");
  if (data.size() == 0) throw UsageError("evaluate: empty dataset");
  if (options.batch_size < 1) throw UsageError("evaluate: batch size must be >= 1");
  GatingModeScope scope(model, mode);

  const std::size_t n = data.size();
  std::size_t clean_hits = 0;
  std::vector<std::size_t> attack_hits(suite.size(), 0);
  std::map<std::string, std::size_t> type_hits;
  std::size_t all_hits = 0;

  // Gate routing targets: clean inputs and the first PGD entry of each type.
  const bool gates = options.gate_accuracy && model.has_gates();
  std::map<int, std::size_t> gate_source;  // domain -> suite index (-1 for clean)
  std::map<int, int> gate_branch;          // domain -> branch
  if (gates) {
    for (std::size_t i = 0; i < options.domains.size(); ++i) {
      const int d = options.domains[i];
      if (i >= model.num_branches()) break;
      gate_branch[d] = static_cast<int>(i);
      if (d == 0) continue;
      for (std::size_t a = 0; a < suite.size(); ++a) {
        if (suite[a].kind == AttackKind::Pgd && suite[a].spec.norm == domain_norm(d)) {
          gate_source[d] = a;
          break;
        }
      }
    }
  }
  std::map<int, std::map<int, double>> gate_hits;  // slot -> domain -> hits

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::size_t batch_index = 0;
  for (std::size_t begin = 0; begin < n; begin += options.batch_size, ++batch_index) {
    const std::size_t end = std::min(n, begin + options.batch_size);
    const Batch b = gather(data, {order.begin() + static_cast<std::ptrdiff_t>(begin),
                                  order.begin() + static_cast<std::ptrdiff_t>(end)});
    const std::size_t m = b.labels.size();
    const auto wrong_clean = misclassified(eval_logits(model), b.x, b.labels);
    for (bool w : wrong_clean) clean_hits += !w;

    std::vector<bool> survives_all(m, true);
    std::map<std::string, std::vector<bool>> survives_type;
    std::vector<Tensor> adversarial(suite.size());
    for (std::size_t a = 0; a < suite.size(); ++a) {
      const auto& entry = suite[a];
      const auto adv = run_attack(model, entry, b.x, b.labels, mode,
                                  derive_seed(options.seed, {a, batch_index}), options.restarts);
      auto& type = survives_type[to_string(entry.spec.norm)];
      if (type.empty()) type.assign(m, true);
      for (std::size_t s = 0; s < m; ++s) {
        const bool ok = !adv.success_mask[s];
        attack_hits[a] += ok;
        type[s] = type[s] && ok;
        survives_all[s] = survives_all[s] && ok;
      }
      adversarial[a] = adv.x_adv;
    }
    for (const auto& [type, ok] : survives_type) {
      for (bool v : ok) type_hits[type] += v;
    }
    for (bool v : survives_all) all_hits += v;

    if (gates) {
      for (const auto& [domain, branch] : gate_branch) {
        const Tensor* x = nullptr;
        if (domain == 0) {
          x = &b.x;
        } else if (auto it = gate_source.find(domain); it != gate_source.end()) {
          x = &adversarial[it->second];
        }
        if (!x) continue;
        for (std::size_t slot = 0; slot < model.norms().size(); ++slot) {
          gate_hits[static_cast<int>(slot + 1)][domain] +=
              gate_accuracy(model, slot, *x, branch) * static_cast<double>(m);
        }
      }
    }
  }

  const double total = static_cast<double>(n);
  EvalReport report;
  report.samples = n;
  report.clean_accuracy = static_cast<double>(clean_hits) / total;
  for (std::size_t a = 0; a < suite.size(); ++a) {
    report.per_attack_accuracy[suite[a].name] = static_cast<double>(attack_hits[a]) / total;
  }
  for (const auto& [type, hits] : type_hits) {
    report.per_type_worst[type] = static_cast<double>(hits) / total;
  }
  report.all_attacks_accuracy = static_cast<double>(all_hits) / total;
  if (gates) {
    for (auto& [slot, per_domain] : gate_hits) {
      for (auto& [domain, hits] : per_domain) hits /= total;
    }
    report.gate_accuracy_per_layer = std::move(gate_hits);
  }
  return report;
}

EvalReport held_out_perturbation_eval(LeNet& model, const Dataset& data, const AttackSuite& suite,
                                      GatingMode mode, const EvalOptions& options) {
  if (model.num_branches() != 3) {
    throw UsageError("held-out evaluation expects a model trained on clean plus two types");
  }
  return evaluate(model, data, suite, mode, options);
}

}  // namespace gbnlab
