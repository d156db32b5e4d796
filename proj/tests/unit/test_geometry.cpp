#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "gbnlab/error.hpp"
#include "gbnlab/geometry.hpp"
#include "support/oracles.hpp"

namespace gbnlab {
namespace {

constexpr Norm kNorms[] = {Norm::L1, Norm::L2, Norm::Linf};

Norm dual(Norm p) { return p == Norm::L1 ? Norm::Linf : p == Norm::Linf ? Norm::L1 : Norm::L2; }

LinearClassifier random_classifier(Rng& rng, std::size_t d) {
  LinearClassifier clf;
  for (std::size_t i = 0; i < d; ++i) clf.w.push_back(standard_normal(rng));
  clf.b = standard_normal(rng);
  return clf;
}

TEST(OptimalPerturbation, ThreeFourExample) {
  LinearClassifier clf{{3, 4}, 0};
  EXPECT_EQ(optimal_perturbation(clf, 1, 1.0, Norm::Linf), (std::vector<double>{-1, -1}));
  EXPECT_EQ(optimal_perturbation(clf, 1, 1.0, Norm::L1), (std::vector<double>{0, -1}));
  const auto d2 = optimal_perturbation(clf, 1, 1.0, Norm::L2);
  EXPECT_NEAR(d2[0], -0.6, 1e-15);
  EXPECT_NEAR(d2[1], -0.8, 1e-15);
}

TEST(OptimalPerturbation, ThreeFourAgreesWithBruteForce) {
  LinearClassifier clf{{3, 4}, 0};
  Rng rng(1);
  for (Norm p : kNorms) {
    const auto delta = optimal_perturbation(clf, 1, 1.0, p);
    const double closed = -(3 * delta[0] + 4 * delta[1]);
    const double brute = testing::brute_force_worst_margin(clf.w, 1, 1.0, p, 1'000'000, rng);
    EXPECT_LE(brute, closed + 1e-12) << to_string(p);
    EXPECT_GE(brute, closed - 1e-3) << to_string(p);
  }
}

TEST(OptimalPerturbation, OddInLabelAndOnTheSphere) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto clf = random_classifier(rng, 2 + trial % 15);
    const double eps = uniform(rng, 0.1, 5);
    for (Norm p : kNorms) {
      const auto pos = optimal_perturbation(clf, 1, eps, p);
      const auto neg = optimal_perturbation(clf, -1, eps, p);
      for (std::size_t i = 0; i < pos.size(); ++i) EXPECT_EQ(pos[i], -neg[i]);
      EXPECT_NEAR(lp_norm(pos, p), eps, 1e-12);
    }
  }
}

TEST(OptimalPerturbation, TiesPickLowestIndexAndErrors) {
  EXPECT_EQ(dominant_coordinate(std::vector<double>{1, -3, 3, 2}), 1u);
  LinearClassifier flat{{2, -2, 2}, 0};
  EXPECT_EQ(optimal_perturbation(flat, 1, 1.0, Norm::L1), (std::vector<double>{-1, 0, 0}));
  LinearClassifier zero{{0, 0}, 1};
  EXPECT_THROW(optimal_perturbation(zero, 1, 1.0, Norm::L2), DegenerateError);
  LinearClassifier fine{{1, 0}, 0};
  EXPECT_THROW(optimal_perturbation(fine, 0, 1.0, Norm::L2), UsageError);
}

TEST(Wasserstein, ThreeFourExample) {
  LinearClassifier clf{{3, 4}, 0};
  EXPECT_NEAR(wasserstein_pair(clf, 1.0, Norm::L1, Norm::Linf), 1.0, 1e-12);
  EXPECT_NEAR(wasserstein_pair(clf, 1.0, Norm::L1, Norm::L2), std::sqrt(0.4), 1e-12);
  EXPECT_NEAR(wasserstein_pair(clf, 1.0, Norm::L2, Norm::Linf), std::sqrt(0.2), 1e-12);
  EXPECT_THROW(wasserstein_pair(clf, 1.0, Norm::L2, Norm::L2), UsageError);
  EXPECT_THROW(wasserstein_oracle(clf, 1.0, Norm::L1, Norm::L1), UsageError);
}

TEST(Wasserstein, OneDimensionalL1EqualsL2) {
  LinearClassifier clf{{-2.5}, 0};
  EXPECT_EQ(wasserstein_pair(clf, 1.7, Norm::L1, Norm::L2), 0.0);
  EXPECT_EQ(wasserstein_oracle(clf, 1.7, Norm::L1, Norm::L2), 0.0);
}

TEST(Wasserstein, HomogeneousSymmetricTriangle) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto clf = random_classifier(rng, 2 + rng() % 15);
    const double eps = uniform(rng, 0.01, 5), c = uniform(rng, 0.1, 3);
    const double a = wasserstein_pair(clf, eps, Norm::L1, Norm::L2);
    const double b = wasserstein_pair(clf, eps, Norm::L2, Norm::Linf);
    const double e = wasserstein_pair(clf, eps, Norm::L1, Norm::Linf);
    EXPECT_NEAR(wasserstein_pair(clf, c * eps, Norm::L1, Norm::L2), c * a, 1e-9);
    EXPECT_NEAR(wasserstein_pair(clf, c * eps, Norm::L2, Norm::Linf), c * b, 1e-9);
    EXPECT_NEAR(wasserstein_pair(clf, c * eps, Norm::L1, Norm::Linf), c * e, 1e-9);
    EXPECT_EQ(wasserstein_oracle(clf, eps, Norm::L2, Norm::L1),
              wasserstein_oracle(clf, eps, Norm::L1, Norm::L2));
    EXPECT_LE(e, a + b + 1e-12);
    EXPECT_LE(a, b + e + 1e-12);
    EXPECT_LE(b, a + e + 1e-12);
  }
}

TEST(Wasserstein, ClosedFormsMatchShiftOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto clf = random_classifier(rng, 2 + rng() % 15);
    const double eps = uniform(rng, 1e-6, 5);
    for (auto [p, q] : {std::pair{Norm::L1, Norm::L2}, {Norm::L1, Norm::Linf}, {Norm::L2, Norm::Linf}}) {
      EXPECT_NEAR(wasserstein_pair(clf, eps, p, q), wasserstein_oracle(clf, eps, p, q), 1e-9);
    }
  }
}

TEST(Wasserstein, ZeroEntriesDoNotCountAsDimensions) {
  // sign(0) = 0 leaves the Linf perturbation at zero where w is zero, so
  // only the nonzero coordinates contribute.
  LinearClassifier clf{{3, 0, 4, 0}, 0};
  EXPECT_NEAR(wasserstein_pair(clf, 1.0, Norm::L1, Norm::Linf),
              wasserstein_oracle(clf, 1.0, Norm::L1, Norm::Linf), 1e-12);
  EXPECT_NEAR(wasserstein_pair(clf, 1.0, Norm::L2, Norm::Linf), std::sqrt(0.2), 1e-12);
}

TEST(OptimalPerturbation, BeatsRandomCandidatesAtTheDualNorm) {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const auto clf = random_classifier(rng, 2 + rng() % 15);
    const double eps = uniform(rng, 0.1, 5);
    const int y = trial % 2 ? 1 : -1;
    for (Norm p : kNorms) {
      const auto delta = optimal_perturbation(clf, y, eps, p);
      double closed = 0;
      for (std::size_t i = 0; i < delta.size(); ++i) closed += -y * clf.w[i] * delta[i];
      EXPECT_NEAR(closed, eps * lp_norm(clf.w, dual(p)), 1e-3);
      EXPECT_LE(testing::brute_force_worst_margin(clf.w, y, eps, p, 200'000, rng), closed + 1e-9);
    }
  }
}

}  // namespace
}  // namespace gbnlab
