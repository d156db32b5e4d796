#include "gbnlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "gbnlab/error.hpp"
#include "gbnlab/ops.hpp"
#include "gbnlab/rng.hpp"

namespace gbnlab {

std::string to_string(Defense defense) {
  switch (defense) {
    case Defense::Vanilla:
      return "vanilla";
    case Defense::GBN:
      return "gbn";
    case Defense::AVG:
      return "avg";
    case Defense::MAX:
      return "max";
    case Defense::SeparateBN:
      return "separate_bn";
  }
  return "vanilla";
}

Defense parse_defense(const std::string& text) {
  if (text == "vanilla") return Defense::Vanilla;
  if (text == "gbn") return Defense::GBN;
  if (text == "avg") return Defense::AVG;
  if (text == "max") return Defense::MAX;
  if (text == "separate_bn") return Defense::SeparateBN;
  throw UsageError("unknown defense '" + text + "' (vanilla|gbn|avg|max|separate_bn)");
}

Norm domain_norm(int domain) {
  switch (domain) {
    case 1:
      return Norm::L1;
    case 2:
      return Norm::L2;
    case 3:
      return Norm::Linf;
    default:
      throw IndexError("domain " + std::to_string(domain) + " has no perturbation type");
  }
}

std::vector<AttackSpec> scaled_attack_specs(int iterations) {
  std::vector<AttackSpec> specs;
  for (Norm norm : {Norm::L1, Norm::L2, Norm::Linf}) {
    AttackSpec spec = default_pgd_spec(norm);
    spec.iterations = iterations;
    spec.step_size = 2.5 * spec.epsilon / iterations;
    specs.push_back(spec);
  }
  return specs;
}

void TrainConfig::validate(const LeNet& model) const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (!(gate_learning_rate >= 0.0)) throw ConfigError("train.gate_learning_rate must be >= 0");
  if (domains.empty()) throw ConfigError("train.domains is empty");
  if (std::set<int>(domains.begin(), domains.end()).size() != domains.size()) {
    throw ConfigError("train.domains has duplicates");
  }
  for (int d : domains) {
    if (d < 0 || d > 3) throw ConfigError("train.domains entries must be in 0..3");
    if (d > 0 && static_cast<std::size_t>(d) > attack_specs.size()) {
      throw ConfigError("no attack spec for domain " + std::to_string(d));
    }
    if (d > 0 && attack_specs[static_cast<std::size_t>(d - 1)].norm != domain_norm(d)) {
      throw ConfigError("attack spec for domain " + std::to_string(d) + " must use " +
                        to_string(domain_norm(d)));
    }
  }
  for (const auto& spec : attack_specs) {
    try {
      spec.validate();
    } catch (const UsageError& e) {
      throw ConfigError(e.what());
    }
  }
  const bool multi = defense == Defense::GBN || defense == Defense::SeparateBN;
  if (multi) {
    if (domains.front() != 0 || domains.size() < 2) {
      throw ConfigError(to_string(defense) + " needs domain 0 first and at least two domains");
    }
    if (model.num_branches() != domains.size()) {
      throw ConfigError(to_string(defense) + ": model has " +
                        std::to_string(model.num_branches()) + " branches but " +
                        std::to_string(domains.size()) + " domains are configured");
    }
    if (defense == Defense::GBN && !model.has_gates()) {
      throw ConfigError("gbn training needs a gated model");
    }
    if (defense == Defense::SeparateBN && model.config().norm != NormKind::MultiBranch) {
      throw ConfigError("separate_bn training needs a multi_branch model");
    }
  } else if (model.num_branches() != 1 || model.has_gates()) {
    throw ConfigError(to_string(defense) + " training needs a single-branch model");
  }
}

void sgd_step(std::span<const NamedTensor> params, double learning_rate, double weight_decay) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    if (!t.has_grad()) continue;
    auto values = t.mutable_data();
    const auto grad = t.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      values[i] -= learning_rate * (grad[i] + weight_decay * values[i]);
    }
    t.clear_grad();
  }
}

std::size_t select_max_loss(std::span<const double> losses) {
  return static_cast<std::size_t>(std::max_element(losses.begin(), losses.end()) - losses.begin());
}

namespace {

struct StepStats {
  double cls = 0.0;
  double dp = 0.0;
  std::size_t correct = 0;
  std::size_t seen = 0;
};

using StepFn = std::function<StepStats(const Batch&, int epoch, std::size_t index)>;

TrainResult run_loop(LeNet& model, const Dataset& data, const TrainConfig& cfg, const StepFn& step,
                     const EpochCallback& on_epoch) {
  cfg.validate(model);
  TrainResult result;
  result.rng.seed = cfg.seed;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto epoch_batches = batches(data, cfg.batch_size, cfg.seed, static_cast<std::uint64_t>(epoch));
    EpochMetrics m;
    m.epoch = epoch;
    std::size_t correct = 0, seen = 0;
    for (std::size_t j = 0; j < epoch_batches.size(); ++j) {
      const StepStats s = step(epoch_batches[j], epoch, j);
      m.classification_loss += s.cls;
      m.domain_prediction_loss += s.dp;
      correct += s.correct;
      seen += s.seen;
      ++result.rng.steps;
    }
    m.batches = epoch_batches.size();
    if (m.batches) {
      m.classification_loss /= static_cast<double>(m.batches);
      m.domain_prediction_loss /= static_cast<double>(m.batches);
    }
    m.clean_train_accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    result.epochs.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return result;
}

AdversarialBatch adversarial(LeNet& model, const Batch& b, const TrainConfig& cfg, int domain,
                             GatingMode mode, int epoch, std::size_t index) {
  AttackSpec spec = cfg.attack_specs[static_cast<std::size_t>(domain - 1)];
  spec.seed = derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), index,
                                     static_cast<std::uint64_t>(domain)});
  return pgd(model, b.x, b.labels, spec, mode);
}

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const auto predicted = ops::argmax_rows(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
  return correct;
}

Tensor accumulate(const Tensor& total, const Tensor& term) {
  return total.defined() ? ops::add(total, term) : term;
}

// One iteration of the multi-branch scheme: every domain batch goes
// through its own branch, then the gates (if any) learn to tell them apart.
StepStats multi_branch_step(LeNet& model, const TrainConfig& cfg, const Batch& b, int epoch,
                            std::size_t index) {
  const std::size_t domains = cfg.domains.size();
  std::vector<Tensor> xs{b.x};
  for (std::size_t i = 1; i < domains; ++i) {
    xs.push_back(adversarial(model, b, cfg, cfg.domains[i],
                             GatingMode::forced(DomainLabel{static_cast<int>(i)}), epoch, index)
                     .x_adv);
  }

  StepStats stats;
  std::vector<std::vector<Tensor>> captured(domains);
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss;
    for (std::size_t i = 0; i < domains; ++i) {
      Tensor logits = model.forward_train(xs[i], DomainLabel{static_cast<int>(i)},
                                          model.has_gates() ? &captured[i] : nullptr);
      loss = accumulate(loss, ops::softmax_cross_entropy(logits, b.labels));
      if (i == 0) stats.correct = count_correct(logits, b.labels);
    }
    tape.backward(loss);
    stats.cls = loss.item();
    sgd_step(model.parameters(ParamGroup::Main), cfg.learning_rate, cfg.weight_decay);
  }
  if (model.has_gates()) {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = model.gate_loss(captured);
    tape.backward(loss);
    stats.dp = loss.item();
    sgd_step(model.parameters(ParamGroup::Gate), cfg.gate_rate(), cfg.weight_decay);
  }
  stats.seen = b.labels.size();
  return stats;
}

// Trains on the concatenation of `parts`, each contributing its own mean
// cross-entropy, through the single BN branch.
StepStats concatenated_step(LeNet& model, const TrainConfig& cfg, const Batch& b,
                            const std::vector<Tensor>& parts) {
  const std::size_t n = b.labels.size();
  StepStats stats;
  Tape tape;
  TapeScope scope(tape);
  Tensor logits = model.forward_train(ops::concat_rows(parts), DomainLabel{0});
  Tensor loss;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    Tensor part = ops::slice_rows(logits, i * n, (i + 1) * n);
    loss = accumulate(loss, ops::softmax_cross_entropy(part, b.labels));
    if (i == 0) stats.correct = count_correct(part, b.labels);
  }
  tape.backward(loss);
  stats.cls = loss.item();
  stats.seen = n;
  sgd_step(model.parameters(ParamGroup::Main), cfg.learning_rate, cfg.weight_decay);
  return stats;
}

std::vector<int> adversarial_domains(const TrainConfig& cfg) {
  std::vector<int> out;
  for (int d : cfg.domains) {
    if (d > 0) out.push_back(d);
  }
  return out;
}

}  // namespace

TrainResult train_gbn(LeNet& model, const Dataset& data, const TrainConfig& cfg,
                      const EpochCallback& on_epoch) {
  TrainConfig c = cfg;
  c.defense = Defense::GBN;
  return run_loop(
      model, data, c,
      [&](const Batch& b, int epoch, std::size_t j) { return multi_branch_step(model, c, b, epoch, j); },
      on_epoch);
}

TrainResult train_vanilla(LeNet& model, const Dataset& data, const TrainConfig& cfg,
                          const EpochCallback& on_epoch) {
  TrainConfig c = cfg;
  c.defense = Defense::Vanilla;
  return run_loop(
      model, data, c,
      [&](const Batch& b, int, std::size_t) { return concatenated_step(model, c, b, {b.x}); },
      on_epoch);
}

TrainResult train_avg(LeNet& model, const Dataset& data, const TrainConfig& cfg,
                      const EpochCallback& on_epoch) {
  TrainConfig c = cfg;
  c.defense = Defense::AVG;
  const auto types = adversarial_domains(c);
  return run_loop(
      model, data, c,
      [&](const Batch& b, int epoch, std::size_t j) {
        std::vector<Tensor> parts{b.x};
        for (int d : types) {
          parts.push_back(
              adversarial(model, b, c, d, GatingMode::forced(DomainLabel{0}), epoch, j).x_adv);
        }
        return concatenated_step(model, c, b, parts);
      },
      on_epoch);
}

TrainResult train_max(LeNet& model, const Dataset& data, const TrainConfig& cfg,
                      const EpochCallback& on_epoch) {
  TrainConfig c = cfg;
  c.defense = Defense::MAX;
  const auto types = adversarial_domains(c);
  if (types.empty()) throw ConfigError("max training needs at least one adversarial domain");
  return run_loop(
      model, data, c,
      [&](const Batch& b, int epoch, std::size_t j) {
        std::vector<AdversarialBatch> candidates;
        for (int d : types) {
          candidates.push_back(
              adversarial(model, b, c, d, GatingMode::forced(DomainLabel{0}), epoch, j));
        }
        const std::size_t n = b.labels.size(), row = b.x.numel() / n;
        Tensor worst(b.x.shape());
        std::vector<double> losses(candidates.size());
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t t = 0; t < candidates.size(); ++t) losses[t] = candidates[t].loss[s];
          const auto& src = candidates[select_max_loss(losses)].x_adv.data();
          std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(s * row), row,
                      worst.mutable_data().begin() + static_cast<std::ptrdiff_t>(s * row));
        }
        return concatenated_step(model, c, b, {b.x, worst});
      },
      on_epoch);
}

TrainResult train(LeNet& model, const Dataset& data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  switch (cfg.defense) {
    case Defense::Vanilla:
      return train_vanilla(model, data, cfg, on_epoch);
    case Defense::GBN:
      return train_gbn(model, data, cfg, on_epoch);
    case Defense::AVG:
      return train_avg(model, data, cfg, on_epoch);
    case Defense::MAX:
      return train_max(model, data, cfg, on_epoch);
    case Defense::SeparateBN: {
      TrainConfig c = cfg;
      for (auto& block : model.norms()) {
        if (!block.split_control()) block.enable_split_control();
      }
      return run_loop(
          model, data, c,
          [&](const Batch& b, int epoch, std::size_t j) {
            return multi_branch_step(model, c, b, epoch, j);
          },
          on_epoch);
    }
  }
  throw UsageError("unknown defense");
}

ProbeReport branch_statistics(const LeNet& model, std::span<const int> domains) {
  ProbeReport report;
  const auto& norms = model.norms();
  for (std::size_t slot = 0; slot < norms.size(); ++slot) {
    const auto& branches = norms[slot].branches();
    for (std::size_t k = 0; k < branches.size(); ++k) {
      for (std::size_t c = 0; c < branches[k].channels(); ++c) {
        report.records.push_back({slot + 1, k, c, branches[k].running_mean[c],
                                  branches[k].running_var[c]});
      }
    }
    auto mean_gap = [](const BnBranchState& a, const BnBranchState& b) {
      double acc = 0.0;
      for (std::size_t c = 0; c < a.channels(); ++c) {
        acc += std::abs(a.running_mean[c] - b.running_mean[c]);
      }
      return acc / static_cast<double>(a.channels());
    };
    const auto linf = std::find(domains.begin(), domains.end(), 3);
    const auto& control = norms[slot].split_control();
    if (linf != domains.end() && control &&
        static_cast<std::size_t>(linf - domains.begin()) < branches.size()) {
      report.divergence.push_back(
          mean_gap(branches[static_cast<std::size_t>(linf - domains.begin())], branches[0]));
      report.control.push_back(mean_gap((*control)[0], (*control)[1]));
    }
  }
  return report;
}

ProbeReport separate_bn_probe(LeNet& model, const Dataset& data, const TrainConfig& cfg,
                              const EpochCallback& on_epoch) {
  if (model.config().norm != NormKind::MultiBranch) {
    throw UsageError("separate_bn_probe needs a multi_branch model without gates");
  }
  TrainConfig c = cfg;
  c.defense = Defense::SeparateBN;
  train(model, data, c, on_epoch);
  return branch_statistics(model, c.domains);
}

}  // namespace gbnlab
