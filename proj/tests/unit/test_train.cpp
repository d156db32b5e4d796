#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "gbnlab/error.hpp"
#include "gbnlab/ops.hpp"
#include "gbnlab/train.hpp"
#include "support/tiny_model.hpp"

namespace gbnlab {
namespace {

using testing::tiny_images;
using testing::tiny_model;
using testing::tiny_training;

std::vector<double> flat_parameters(const LeNet& model, ParamGroup group = ParamGroup::All) {
  std::vector<double> out;
  for (const auto& p : model.parameters(group)) {
    out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  }
  return out;
}

TEST(Sgd, HandComputedStepWithWeightDecay) {
  Tensor w({2}, std::vector<double>{1.0, -2.0});
  w.set_requires_grad(true);
  Tensor untouched({1}, std::vector<double>{5.0});
  untouched.set_requires_grad(true);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(ops::sum(ops::mul(w, w)));  // grad = 2w = (2, -4)
  }
  const std::vector<NamedTensor> params{{"w", w}, {"u", untouched}};
  sgd_step(params, 0.1, 0.5);
  EXPECT_DOUBLE_EQ(w.data()[0], 1.0 - 0.1 * (2.0 + 0.5 * 1.0));
  EXPECT_DOUBLE_EQ(w.data()[1], -2.0 - 0.1 * (-4.0 + 0.5 * -2.0));
  EXPECT_FALSE(w.has_grad());
  EXPECT_EQ(untouched.data()[0], 5.0);
}

TEST(Train, SelectMaxLossPrefersLowestIndex) {
  const std::vector<double> losses{0.5, 2.0, 2.0, 1.0};
  EXPECT_EQ(select_max_loss(losses), 1u);
  const std::vector<double> one{3.0};
  EXPECT_EQ(select_max_loss(one), 0u);
}

TEST(Train, DomainNormsAndScaledSpecs) {
  EXPECT_EQ(domain_norm(1), Norm::L1);
  EXPECT_EQ(domain_norm(2), Norm::L2);
  EXPECT_EQ(domain_norm(3), Norm::Linf);
  EXPECT_THROW(domain_norm(0), IndexError);
  EXPECT_THROW(domain_norm(4), IndexError);
  const auto specs = scaled_attack_specs(10);
  ASSERT_EQ(specs.size(), 3u);
  const double eps[] = {10.0, 2.0, 0.3};
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(specs[i].norm, domain_norm(static_cast<int>(i + 1)));
    EXPECT_EQ(specs[i].epsilon, eps[i]);
    EXPECT_EQ(specs[i].iterations, 10);
    EXPECT_DOUBLE_EQ(specs[i].step_size, 0.25 * eps[i]);
  }
}

TEST(Train, ConfigValidationRejectsMismatches) {
  LeNet gated(tiny_model(NormKind::Gated));
  LeNet plain(tiny_model(NormKind::Batch));
  LeNet three(tiny_model(NormKind::Gated, 3));
  TrainConfig cfg = tiny_training();
  EXPECT_NO_THROW(cfg.validate(gated));
  EXPECT_THROW(cfg.validate(plain), ConfigError);
  EXPECT_THROW(cfg.validate(three), ConfigError);

  auto broken = [&](auto edit) {
    TrainConfig c = tiny_training();
    edit(c);
    return c;
  };
  EXPECT_THROW(broken([](TrainConfig& c) { c.epochs = 0; }).validate(gated), ConfigError);
  EXPECT_THROW(broken([](TrainConfig& c) { c.batch_size = 1; }).validate(gated), ConfigError);
  EXPECT_THROW(broken([](TrainConfig& c) { c.learning_rate = 0; }).validate(gated), ConfigError);
  EXPECT_THROW(broken([](TrainConfig& c) { c.domains = {0, 1, 1, 3}; }).validate(gated),
               ConfigError);
  EXPECT_THROW(broken([](TrainConfig& c) { c.domains = {1, 0, 2, 3}; }).validate(gated),
               ConfigError);
  EXPECT_THROW(broken([](TrainConfig& c) { std::swap(c.attack_specs[0], c.attack_specs[1]); })
                   .validate(gated),
               ConfigError);
  EXPECT_THROW(broken([](TrainConfig& c) { c.attack_specs.pop_back(); }).validate(gated),
               ConfigError);

  TrainConfig vanilla = tiny_training();
  vanilla.defense = Defense::Vanilla;
  EXPECT_NO_THROW(vanilla.validate(plain));
  EXPECT_THROW(vanilla.validate(gated), ConfigError);
}

TEST(Train, GbnStepRoutesOneBatchPerBranch) {
  LeNet model(tiny_model(NormKind::Gated));
  const Dataset data = tiny_images(26, 3);  // batches of 8, 8, 8, 2
  const auto result = train_gbn(model, data, tiny_training());
  ASSERT_EQ(result.epochs.size(), 1u);
  EXPECT_EQ(result.epochs[0].batches, 4u);
  EXPECT_EQ(result.rng.steps, 4u);
  for (const auto& block : model.norms()) {
    for (const auto& branch : block.branches()) EXPECT_EQ(branch.num_batches_seen, 4u);
  }
  EXPECT_TRUE(std::isfinite(result.epochs[0].classification_loss));
  EXPECT_GT(result.epochs[0].domain_prediction_loss, 0.0);
}

TEST(Train, GateAndMainGroupsMoveAtTheirOwnRates) {
  LeNet model(tiny_model(NormKind::Gated));
  const auto gate_before = flat_parameters(model, ParamGroup::Gate);
  const auto main_before = flat_parameters(model, ParamGroup::Main);
  TrainConfig cfg = tiny_training();
  cfg.gate_learning_rate = 1e-300;  // effectively frozen gates
  train_gbn(model, tiny_images(16, 4), cfg);
  // The zero-initialized head picks up steps of order 1e-300, nothing more.
  const auto gate_after = flat_parameters(model, ParamGroup::Gate);
  ASSERT_EQ(gate_after.size(), gate_before.size());
  for (std::size_t i = 0; i < gate_after.size(); ++i) EXPECT_NEAR(gate_after[i], gate_before[i], 1e-250);
  EXPECT_NE(flat_parameters(model, ParamGroup::Main), main_before);
}

TEST(Train, SameSeedSameModel) {
  LeNet a(tiny_model(NormKind::Gated)), b(tiny_model(NormKind::Gated));
  const Dataset data = tiny_images(24, 5);
  TrainConfig cfg = tiny_training();
  cfg.epochs = 2;
  std::vector<int> seen;
  const auto ra = train_gbn(a, data, cfg, [&](const EpochMetrics& m) { seen.push_back(m.epoch); });
  const auto rb = train_gbn(b, data, cfg);
  EXPECT_EQ(seen, (std::vector<int>{1, 2}));
  EXPECT_EQ(flat_parameters(a), flat_parameters(b));
  EXPECT_EQ(ra.epochs[1].classification_loss, rb.epochs[1].classification_loss);

  LeNet c(tiny_model(NormKind::Gated));
  cfg.seed = 1;
  train_gbn(c, data, cfg);
  EXPECT_NE(flat_parameters(a), flat_parameters(c));
}

// With a zero budget every adversarial copy equals the clean batch. BN over
// k identical copies has the statistics of one copy, so AVG over clean plus
// three copies is vanilla training with a four times larger step, and MAX
// (clean plus one copy) is vanilla with a doubled step.
TEST(Train, ZeroBudgetAvgAndMaxReduceToVanilla) {
  const Dataset data = tiny_images(24, 6);
  TrainConfig cfg = tiny_training();
  cfg.domains = {0, 1, 2, 3};
  for (auto& spec : cfg.attack_specs) spec.epsilon = 0.0;

  auto run = [&](Defense defense, double lr) {
    LeNet model(tiny_model(NormKind::Batch));
    TrainConfig c = cfg;
    c.defense = defense;
    c.learning_rate = lr;
    train(model, data, c);
    return flat_parameters(model);
  };
  const auto avg = run(Defense::AVG, 0.05), max = run(Defense::MAX, 0.05);
  const auto vanilla4 = run(Defense::Vanilla, 0.2), vanilla2 = run(Defense::Vanilla, 0.1);
  ASSERT_EQ(avg.size(), vanilla4.size());
  for (std::size_t i = 0; i < avg.size(); ++i) {
    EXPECT_NEAR(avg[i], vanilla4[i], 1e-9 * (1 + std::abs(avg[i]))) << i;
    EXPECT_NEAR(max[i], vanilla2[i], 1e-9 * (1 + std::abs(max[i]))) << i;
  }
}

TEST(Train, MaxNeedsAnAdversarialDomain) {
  LeNet model(tiny_model(NormKind::Batch));
  TrainConfig cfg = tiny_training();
  cfg.defense = Defense::MAX;
  cfg.domains = {0};
  EXPECT_THROW(train(model, tiny_images(16, 1), cfg), ConfigError);
}

TEST(Probe, SeparateBranchesReportEveryChannel) {
  LeNet model(tiny_model(NormKind::MultiBranch));
  TrainConfig cfg = tiny_training();
  const auto report = separate_bn_probe(model, tiny_images(24, 7), cfg);
  // slot 1 has 2 channels, slot 2 has 3; four branches each.
  EXPECT_EQ(report.records.size(), 4u * (2 + 3));
  ASSERT_EQ(report.divergence.size(), 2u);
  ASSERT_EQ(report.control.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_GT(report.divergence[i], 0.0);
    EXPECT_GE(report.control[i], 0.0);
  }
  LeNet gated(tiny_model(NormKind::Gated));
  EXPECT_THROW(separate_bn_probe(gated, tiny_images(24, 7), cfg), UsageError);
}

TEST(Probe, StatisticsWithoutLinfBranchHaveNoDivergence) {
  LeNet model(tiny_model(NormKind::MultiBranch, 2));
  const std::vector<int> domains{0, 1};
  const auto report = branch_statistics(model, domains);
  EXPECT_EQ(report.records.size(), 2u * (2 + 3));
  EXPECT_TRUE(report.divergence.empty());
}

}  // namespace
}  // namespace gbnlab
