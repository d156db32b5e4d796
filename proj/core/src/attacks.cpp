#include "gbnlab/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gbnlab/error.hpp"
#include "gbnlab/ops.hpp"
#include "gbnlab/rng.hpp"

namespace gbnlab {

void AttackSpec::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw UsageError("attack epsilon must be >= 0");
  if (!(step_size >= 0.0) || !std::isfinite(step_size)) {
    throw UsageError("attack step size must be >= 0");
  }
  if (iterations < 1) throw UsageError("attack needs at least one iteration");
  if (restarts < 1) throw UsageError("attack needs at least one restart");
}

AttackSpec default_pgd_spec(Norm norm) {
  AttackSpec spec;
  spec.norm = norm;
  switch (norm) {
    case Norm::L1:
      spec.epsilon = 10.0;
      spec.iterations = 50;
      spec.step_size = spec.epsilon / 10.0;
      break;
    case Norm::L2:
      spec.epsilon = 2.0;
      spec.iterations = 100;
      spec.step_size = 0.1;
      break;
    case Norm::Linf:
      spec.epsilon = 0.3;
      spec.iterations = 50;
      spec.step_size = 0.01;
      break;
  }
  return spec;
}

namespace {

void project_l1_in_place(std::span<double> v, double epsilon) {
  if (lp_norm(v, Norm::L1) <= epsilon) return;
  if (epsilon <= 0.0) {
    std::fill(v.begin(), v.end(), 0.0);
    return;
  }
  // Soft-thresholding at the level that lands exactly on the sphere.
  std::vector<double> mags(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) mags[i] = std::abs(v[i]);
  std::sort(mags.begin(), mags.end(), std::greater<>());
  double cumulative = 0.0;
  double theta = 0.0;
  for (std::size_t j = 0; j < mags.size(); ++j) {
    cumulative += mags[j];
    const double candidate = (cumulative - epsilon) / static_cast<double>(j + 1);
    if (mags[j] - candidate > 0.0) theta = candidate;
  }
  for (double& x : v) {
    const double shrunk = std::max(std::abs(x) - theta, 0.0);
    x = x < 0.0 ? -shrunk : shrunk;
  }
}

}  // namespace

void project_in_place(std::span<double> v, Norm norm, double epsilon) {
  switch (norm) {
    case Norm::Linf:
      for (double& x : v) x = std::clamp(x, -epsilon, epsilon);
      return;
    case Norm::L2: {
      const double n2 = lp_norm(v, Norm::L2);
      if (n2 > epsilon) {
        const double factor = epsilon / n2;
        for (double& x : v) x *= factor;
      }
      return;
    }
    case Norm::L1:
      project_l1_in_place(v, epsilon);
      return;
  }
}

namespace {

Tensor project_copy(const Tensor& delta, Norm norm, double epsilon) {
  Tensor out = delta.detach();
  project_in_place(out.mutable_data(), norm, epsilon);
  return out;
}

std::size_t row_size(const Tensor& x) {
  if (x.rank() < 1 || x.dim(0) == 0) throw DimensionError("attack: empty batch");
  return x.numel() / x.dim(0);
}

void check_inputs(const Tensor& x, std::span<const int> y) {
  if (x.rank() < 1 || y.size() != x.dim(0)) {
    throw DimensionError("attack: " + std::to_string(y.size()) + " labels for batch " +
                         shape_to_string(x.shape()));
  }
}

// Writes clamp(x + delta, 0, 1) into x_adv and the realized delta back.
void apply_delta(std::span<const double> x, std::span<double> delta, std::span<double> x_adv) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    x_adv[i] = std::clamp(x[i] + delta[i], 0.0, 1.0);
    delta[i] = x_adv[i] - x[i];
  }
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void random_start(std::span<double> delta, Norm norm, double epsilon, Rng& rng) {
  const std::size_t d = delta.size();
  std::fill(delta.begin(), delta.end(), 0.0);
  switch (norm) {
    case Norm::Linf:
      for (double& v : delta) v = uniform(rng, -epsilon, epsilon);
      break;
    case Norm::L2: {
      double n2 = 0.0;
      for (double& v : delta) {
        v = standard_normal(rng);
        n2 += v * v;
      }
      n2 = std::sqrt(n2);
      const double radius = epsilon * std::pow(uniform01(rng), 1.0 / static_cast<double>(d));
      for (double& v : delta) v = n2 > 0.0 ? v / n2 * radius : 0.0;
      break;
    }
    case Norm::L1: {
      // A handful of signed coordinates sharing a random fraction of the budget.
      const std::size_t count = std::min<std::size_t>(d, 16);
      std::vector<double> weights(count);
      double total = 0.0;
      for (double& w : weights) {
        w = -std::log(1.0 - uniform01(rng));
        total += w;
      }
      const double radius = epsilon * uniform01(rng);
      for (std::size_t j = 0; j < count; ++j) {
        const std::size_t idx = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(d));
        const double s = uniform01(rng) < 0.5 ? -1.0 : 1.0;
        delta[std::min(idx, d - 1)] += s * radius * weights[j] / total;
      }
      break;
    }
  }
  project_in_place(delta, norm, epsilon);
}

struct ObjectiveValue {
  Tensor total;                   // scalar on the tape
  std::vector<double> per_sample; // same objective, per sample
};

using Objective = std::function<ObjectiveValue(const Tensor&)>;

Objective classification_objective(const LogitsFn& model, std::span<const int> y) {
  std::vector<int> labels(y.begin(), y.end());
  return [&model, labels](const Tensor& x) {
    Tensor logits = model(x);
    return ObjectiveValue{ops::softmax_cross_entropy(logits, labels),
                          ops::cross_entropy_per_sample(logits, labels)};
  };
}

std::vector<double> input_gradient(const Objective& objective, const Tensor& x_cur,
                                   std::vector<double>* per_sample, int step) {
  Tensor xv = x_cur.detach();
  xv.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  ObjectiveValue value;
  try {
    value = objective(xv);
    if (value.total.requires_grad()) tape.backward(value.total);
  } catch (const UsageError&) {
    throw;
  } catch (const DimensionError&) {
    throw;
  } catch (const Error& e) {
    throw AttackError("attack step " + std::to_string(step) + ": " + e.what());
  }
  if (per_sample) *per_sample = std::move(value.per_sample);
  std::vector<double> grad(xv.numel(), 0.0);
  if (xv.has_grad()) std::copy(xv.grad().begin(), xv.grad().end(), grad.begin());
  for (double g : grad) {
    if (!std::isfinite(g)) {
      throw AttackError("attack step " + std::to_string(step) + ": non-finite input gradient");
    }
  }
  return grad;
}

void check_feasible(const Tensor& x, const Tensor& x_adv, Norm norm, double epsilon) {
  for (double v : x_adv.data()) {
    if (v < 0.0 || v > 1.0) throw AttackError("attack produced a pixel outside [0, 1]");
  }
  for (double dist : per_sample_distance(x_adv, x, norm)) {
    if (dist > epsilon + 1e-6) {
      throw AttackError("attack left the " + to_string(norm) + " ball: distance " +
                        std::to_string(dist) + " > " + std::to_string(epsilon));
    }
  }
}

struct PgdOutcome {
  Tensor x_adv;
  std::vector<double> loss;
};

PgdOutcome run_pgd(const Objective& objective, const Tensor& x, const AttackSpec& spec) {
  spec.validate();
  const std::size_t n = x.dim(0), d = row_size(x);
  const auto xs = x.data();

  Tensor best = x.detach();
  std::vector<double> best_loss(n, -std::numeric_limits<double>::infinity());
  auto offer = [&](const Tensor& candidate, const std::vector<double>& loss) {
    for (std::size_t s = 0; s < n; ++s) {
      if (loss[s] > best_loss[s]) {
        best_loss[s] = loss[s];
        std::copy_n(candidate.data().begin() + s * d, d, best.mutable_data().begin() + s * d);
      }
    }
  };

  for (int restart = 0; restart < spec.restarts; ++restart) {
    std::vector<double> delta(n * d, 0.0);
    if (restart > 0 || spec.random_start) {
      for (std::size_t s = 0; s < n; ++s) {
        Rng rng(derive_seed(spec.seed, {s, static_cast<std::uint64_t>(restart)}));
        random_start(std::span<double>(delta).subspan(s * d, d), spec.norm, spec.epsilon, rng);
      }
    }
    Tensor x_cur(x.shape());
    apply_delta(xs, delta, x_cur.mutable_data());

    for (int step = 0; step < spec.iterations; ++step) {
      std::vector<double> start_loss;
      const auto grad = input_gradient(objective, x_cur,
                                       step == 0 && spec.keep_start_candidate ? &start_loss : nullptr,
                                       step);
      if (!start_loss.empty()) offer(x_cur, start_loss);
      for (std::size_t s = 0; s < n; ++s) {
        std::span<const double> g(grad.data() + s * d, d);
        std::span<double> ds(delta.data() + s * d, d);
        switch (spec.norm) {
          case Norm::Linf:
            for (std::size_t i = 0; i < d; ++i) ds[i] += spec.step_size * sign(g[i]);
            break;
          case Norm::L2:
          case Norm::L1: {
            const double scale = lp_norm(g, spec.norm);
            if (scale > 0.0) {
              for (std::size_t i = 0; i < d; ++i) ds[i] += spec.step_size * g[i] / scale;
            }
            break;
          }
        }
        project_in_place(ds, spec.norm, spec.epsilon);
      }
      apply_delta(xs, delta, x_cur.mutable_data());
    }

    std::vector<double> final_loss;
    {
      NoGradScope no_grad;
      final_loss = objective(x_cur).per_sample;
    }
    offer(x_cur, final_loss);
  }
  return {best, best_loss};
}

AdversarialBatch finish_batch(PgdOutcome outcome, const Tensor& x, std::span<const int> y,
                              const LogitsFn& judge, Norm norm, double epsilon) {
  check_feasible(x, outcome.x_adv, norm, epsilon);
  AdversarialBatch out;
  out.success_mask = misclassified(judge, outcome.x_adv, y);
  out.x_adv = std::move(outcome.x_adv);
  out.loss = std::move(outcome.loss);
  out.norm = norm;
  out.epsilon = epsilon;
  return out;
}

}  // namespace

Tensor project_linf(const Tensor& delta, double epsilon) {
  return project_copy(delta, Norm::Linf, epsilon);
}
Tensor project_l2(const Tensor& delta, double epsilon) {
  return project_copy(delta, Norm::L2, epsilon);
}
Tensor project_l1(const Tensor& delta, double epsilon) {
  return project_copy(delta, Norm::L1, epsilon);
}

std::vector<double> per_sample_distance(const Tensor& a, const Tensor& b, Norm norm) {
  if (a.shape() != b.shape()) {
    throw DimensionError("per_sample_distance: shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  }
  const std::size_t n = a.dim(0), d = row_size(a);
  std::vector<double> out(n);
  std::vector<double> diff(d);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < d; ++i) diff[i] = a.data()[s * d + i] - b.data()[s * d + i];
    out[s] = lp_norm(diff, norm);
  }
  return out;
}

LogitsFn eval_logits(const LeNet& model) {
  return [&model](const Tensor& x) { return model.forward_eval(x); };
}

std::vector<bool> misclassified(const LogitsFn& model, const Tensor& x, std::span<const int> y) {
  NoGradScope no_grad;
  const auto predicted = ops::argmax_rows(model(x));
  std::vector<bool> out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = predicted[i] != y[i];
  return out;
}

AdversarialBatch pgd(const LogitsFn& model, const Tensor& x, std::span<const int> y,
                     const AttackSpec& spec) {
  check_inputs(x, y);
  auto outcome = run_pgd(classification_objective(model, y), x, spec);
  return finish_batch(std::move(outcome), x, y, model, spec.norm, spec.epsilon);
}

AdversarialBatch fgsm(const LogitsFn& model, const Tensor& x, std::span<const int> y,
                      double epsilon) {
  check_inputs(x, y);
  if (!(epsilon >= 0.0)) throw UsageError("fgsm: epsilon must be >= 0");
  const auto objective = classification_objective(model, y);
  const auto grad = input_gradient(objective, x, nullptr, 0);
  Tensor x_adv(x.shape());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    x_adv.mutable_data()[i] = std::clamp(x.data()[i] + epsilon * sign(grad[i]), 0.0, 1.0);
  }
  std::vector<double> loss;
  {
    NoGradScope no_grad;
    loss = objective(x_adv).per_sample;
  }
  return finish_batch({x_adv, loss}, x, y, model, Norm::Linf, epsilon);
}

AdversarialBatch mi_fgsm(const LogitsFn& model, const Tensor& x, std::span<const int> y,
                         const AttackSpec& spec) {
  check_inputs(x, y);
  spec.validate();
  const std::size_t n = x.dim(0), d = row_size(x);
  const double step = spec.epsilon / static_cast<double>(spec.iterations);
  const auto objective = classification_objective(model, y);
  std::vector<double> momentum(n * d, 0.0), delta(n * d, 0.0);
  Tensor x_cur = x.detach();
  for (int t = 0; t < spec.iterations; ++t) {
    const auto grad = input_gradient(objective, x_cur, nullptr, t);
    for (std::size_t s = 0; s < n; ++s) {
      std::span<const double> g(grad.data() + s * d, d);
      const double l1 = lp_norm(g, Norm::L1);
      for (std::size_t i = 0; i < d; ++i) {
        const double normalized = l1 > 0.0 ? g[i] / l1 : 0.0;
        momentum[s * d + i] = spec.decay * momentum[s * d + i] + normalized;
        delta[s * d + i] += step * sign(momentum[s * d + i]);
      }
      project_in_place(std::span<double>(delta).subspan(s * d, d), Norm::Linf, spec.epsilon);
    }
    apply_delta(x.data(), delta, x_cur.mutable_data());
  }
  std::vector<double> loss;
  {
    NoGradScope no_grad;
    loss = objective(x_cur).per_sample;
  }
  return finish_batch({x_cur, loss}, x, y, model, Norm::Linf, spec.epsilon);
}

AdversarialBatch gaussian_noise_attack(const Tensor& x, std::span<const int> y,
                                       const LogitsFn& model, double epsilon, int trials,
                                       std::uint64_t seed) {
  check_inputs(x, y);
  if (!(epsilon >= 0.0)) throw UsageError("gaussian noise: epsilon must be >= 0");
  if (trials < 1) throw UsageError("gaussian noise: needs at least one trial");
  const std::size_t n = x.dim(0), d = row_size(x);
  std::vector<Rng> streams;
  streams.reserve(n);
  for (std::size_t s = 0; s < n; ++s) streams.emplace_back(derive_seed(seed, {s}));

  Tensor x_adv = x.detach();
  std::vector<bool> done(n, false);
  std::vector<double> noise(d);
  for (int trial = 0; trial < trials; ++trial) {
    Tensor candidate = x_adv.detach();
    for (std::size_t s = 0; s < n; ++s) {
      if (done[s]) continue;
      for (double& v : noise) v = standard_normal(streams[s]);
      project_in_place(noise, Norm::L2, epsilon);
      for (std::size_t i = 0; i < d; ++i) {
        candidate.mutable_data()[s * d + i] = std::clamp(x.data()[s * d + i] + noise[i], 0.0, 1.0);
      }
    }
    const auto fooled = misclassified(model, candidate, y);
    for (std::size_t s = 0; s < n; ++s) {
      if (done[s]) continue;
      std::copy_n(candidate.data().begin() + s * d, d, x_adv.mutable_data().begin() + s * d);
      if (fooled[s]) done[s] = true;
    }
    if (std::all_of(done.begin(), done.end(), [](bool b) { return b; })) break;
  }
  std::vector<double> loss;
  {
    NoGradScope no_grad;
    loss = ops::cross_entropy_per_sample(model(x_adv), y);
  }
  return finish_batch({x_adv, loss}, x, y, model, Norm::L2, epsilon);
}

AdversarialBatch pgd(LeNet& model, const Tensor& x, std::span<const int> y,
                     const AttackSpec& spec, GatingMode mode) {
  FrozenParameters frozen(model);
  GatingModeScope scope(model, mode);
  return pgd(eval_logits(model), x, y, spec);
}

AdversarialBatch gate_fooling_pgd(LeNet& model, const Tensor& x, std::span<const int> y,
                                  const AttackSpec& spec, DomainLabel domain) {
  check_inputs(x, y);
  if (!model.has_gates()) throw UsageError("gate_fooling_pgd: model has no GBN gates");
  if (domain.k < 0 || static_cast<std::size_t>(domain.k) >= model.num_branches()) {
    throw IndexError("gate_fooling_pgd: domain " + std::to_string(domain.k) + " out of range");
  }
  FrozenParameters frozen(model);
  const std::vector<int> targets(x.dim(0), domain.k);
  Objective objective = [&model, &targets](const Tensor& xv) {
    std::vector<Tensor> gate_logits;
    model.forward_eval(xv, &gate_logits);
    ObjectiveValue value;
    value.per_sample.assign(targets.size(), 0.0);
    for (const Tensor& logits : gate_logits) {
      if (!logits.defined()) continue;
      Tensor term = ops::softmax_cross_entropy(logits, targets);
      value.total = value.total.defined() ? ops::add(value.total, term) : term;
      const auto per = ops::cross_entropy_per_sample(logits, targets);
      for (std::size_t s = 0; s < per.size(); ++s) value.per_sample[s] += per[s];
    }
    return value;
  };
  auto outcome = run_pgd(objective, x, spec);
  return finish_batch(std::move(outcome), x, y, eval_logits(model), spec.norm, spec.epsilon);
}

AdversarialBatch branch_forced_attack(LeNet& model, const Tensor& x, std::span<const int> y,
                                      const AttackSpec& spec, DomainLabel branch) {
  check_inputs(x, y);
  if (branch.k < 0 || static_cast<std::size_t>(branch.k) >= model.num_branches()) {
    throw IndexError("branch_forced_attack: branch " + std::to_string(branch.k) +
                     " outside 0.." + std::to_string(model.num_branches() - 1));
  }
  FrozenParameters frozen(model);
  PgdOutcome outcome;
  {
    GatingModeScope scope(model, GatingMode::forced(branch));
    auto logits = eval_logits(model);
    outcome = run_pgd(classification_objective(logits, y), x, spec);
  }
  return finish_batch(std::move(outcome), x, y, eval_logits(model), spec.norm, spec.epsilon);
}

}  // namespace gbnlab
