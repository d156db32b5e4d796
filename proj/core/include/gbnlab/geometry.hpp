#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "gbnlab/norm.hpp"

namespace gbnlab {

// f(x) = w.x + b with labels in {-1, +1}.
struct LinearClassifier {
  std::vector<double> w;
  double b = 0.0;
};

/// Loss-maximizing eps-perturbation of a linear classifier under the given
/// norm. Throws DegenerateError when w is zero.
std::vector<double> optimal_perturbation(const LinearClassifier& clf, int y, double epsilon,
                                         Norm norm);

/// Index of the largest |w_i|; the lowest index wins ties.
std::size_t dominant_coordinate(std::span<const double> w);

/// Closed-form Wasserstein-2 distance between the point masses of the
/// optimal p- and q-perturbations. The result does not depend on y.
double wasserstein_pair(const LinearClassifier& clf, double epsilon, Norm p, Norm q);

/// Same distance computed directly from the two perturbation vectors.
double wasserstein_oracle(const LinearClassifier& clf, double epsilon, Norm p, Norm q);

}  // namespace gbnlab
