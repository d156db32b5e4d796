#include "gbnlab/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "gbnlab/error.hpp"

namespace gbnlab {

namespace {

void check(const LinearClassifier& clf, double epsilon) {
  if (clf.w.empty()) throw DimensionError("linear classifier has no weights");
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw UsageError("epsilon must be >= 0");
  if (lp_norm(clf.w, Norm::Linf) == 0.0) {
    throw DegenerateError("optimal perturbation is undefined for w = 0");
  }
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

std::size_t dominant_coordinate(std::span<const double> w) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < w.size(); ++i) {
    if (std::abs(w[i]) > std::abs(w[best])) best = i;
  }
  return best;
}

std::vector<double> optimal_perturbation(const LinearClassifier& clf, int y, double epsilon,
                                         Norm norm) {
  check(clf, epsilon);
  if (y != 1 && y != -1) throw UsageError("label must be -1 or +1");
  const auto& w = clf.w;
  std::vector<double> delta(w.size(), 0.0);
  switch (norm) {
    case Norm::L1: {
      const std::size_t i = dominant_coordinate(w);
      delta[i] = -y * epsilon * sign(w[i]);
      break;
    }
    case Norm::L2: {
      const double n2 = lp_norm(w, Norm::L2);
      for (std::size_t i = 0; i < w.size(); ++i) delta[i] = -y * epsilon * w[i] / n2;
      break;
    }
    case Norm::Linf:
      for (std::size_t i = 0; i < w.size(); ++i) delta[i] = -y * epsilon * sign(w[i]);
      break;
  }
  return delta;
}

double wasserstein_pair(const LinearClassifier& clf, double epsilon, Norm p, Norm q) {
  check(clf, epsilon);
  if (p == q) throw UsageError("wasserstein_pair needs two different norms");
  if (p > q) std::swap(p, q);
  const auto& w = clf.w;
  const double n1 = lp_norm(w, Norm::L1);
  const double n2 = lp_norm(w, Norm::L2);
  const double ninf = lp_norm(w, Norm::Linf);
  // Zero weights get no sign perturbation, so d counts nonzero entries.
  double d = 0.0;
  for (double v : w) d += v != 0.0 ? 1.0 : 0.0;
  double squared = 0.0;
  if (p == Norm::L1 && q == Norm::L2) {
    squared = 2.0 - 2.0 * ninf / n2;
  } else if (p == Norm::L1) {
    squared = d - 1.0;
  } else {
    squared = d + 1.0 - 2.0 * n1 / n2;
  }
  return epsilon * std::sqrt(std::max(squared, 0.0));
}

double wasserstein_oracle(const LinearClassifier& clf, double epsilon, Norm p, Norm q) {
  if (p == q) throw UsageError("wasserstein_oracle needs two different norms");
  const auto a = optimal_perturbation(clf, 1, epsilon, p);
  const auto b = optimal_perturbation(clf, 1, epsilon, q);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

}  // namespace gbnlab
