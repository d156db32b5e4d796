#include <gtest/gtest.h>

#include <set>

#include "gbnlab/error.hpp"
#include "gbnlab/eval.hpp"
#include "support/tiny_model.hpp"

namespace gbnlab {
namespace {

using testing::tiny_images;
using testing::tiny_model;
using testing::tiny_training;

EvalReport report(double clean, std::map<std::string, double> attacks,
                  std::map<std::string, double> types, double all) {
  EvalReport r;
  r.samples = 10;
  r.clean_accuracy = clean;
  r.per_attack_accuracy = std::move(attacks);
  r.per_type_worst = std::move(types);
  r.all_attacks_accuracy = all;
  return r;
}

TEST(EvalReport, OrderingHolds) {
  EXPECT_TRUE(report(0.9, {{"a", 0.5}, {"b", 0.4}}, {{"L2", 0.3}}, 0.2).ordering_holds());
  EXPECT_TRUE(report(0.9, {{"a", 0.3}}, {{"L2", 0.3}}, 0.3).ordering_holds());
  EXPECT_FALSE(report(0.9, {{"a", 0.2}}, {{"L2", 0.3}}, 0.1).ordering_holds());
  EXPECT_FALSE(report(0.9, {{"a", 0.5}}, {{"L2", 0.3}}, 0.4).ordering_holds());
  EXPECT_FALSE(report(1.1, {{"a", 0.5}}, {{"L2", 0.3}}, 0.1).ordering_holds());
  EXPECT_FALSE(report(0.9, {{"a", -0.1}}, {{"L2", -0.2}}, -0.3).ordering_holds());
}

TEST(Suites, StandardAndAdaptiveContents) {
  const auto suite = standard_suite(10);
  std::vector<std::string> names;
  for (const auto& e : suite) names.push_back(e.name);
  EXPECT_EQ(names, (std::vector<std::string>{"PGD-L1", "PGD-L2", "Gaussian-L2", "PGD-Linf", "FGSM",
                                             "MI-FGSM"}));
  EXPECT_DOUBLE_EQ(suite[0].spec.step_size, 2.5 * 10.0 / 10);
  EXPECT_DOUBLE_EQ(suite[5].spec.step_size, 0.3 / 10);
  EXPECT_EQ(suite[4].kind, AttackKind::Fgsm);

  EXPECT_EQ(adaptive_suite(LeNet(tiny_model(NormKind::Gated)), 5).size(), 5u);
  const auto plain = adaptive_suite(LeNet(tiny_model(NormKind::Batch)), 5);
  ASSERT_EQ(plain.size(), 1u);
  EXPECT_EQ(plain[0].kind, AttackKind::BranchForced);

  for (auto kind : {AttackKind::Pgd, AttackKind::Fgsm, AttackKind::MiFgsm, AttackKind::GaussianNoise,
                    AttackKind::GateFooling, AttackKind::BranchForced}) {
    EXPECT_EQ(parse_attack_kind(to_string(kind)), kind);
  }
  EXPECT_THROW(parse_attack_kind("cw"), UsageError);
}

TEST(Evaluate, ErrorsOnEmptyInputs) {
  LeNet model(tiny_model(NormKind::Batch));
  const Dataset data = tiny_images(8, 1);
  EXPECT_THROW(evaluate(model, data, {}, GatingMode::soft()), UsageError);
  EXPECT_THROW(evaluate(model, data.head(0), standard_suite(2), GatingMode::soft()), UsageError);
  EXPECT_THROW(held_out_perturbation_eval(model, data, standard_suite(2), GatingMode::soft(), {}),
               UsageError);
}

TEST(Evaluate, TrainedGatedModelReportIsConsistentAndDeterministic) {
  LeNet model(tiny_model(NormKind::Gated));
  train_gbn(model, tiny_images(32, 2), tiny_training());
  const Dataset test = tiny_images(20, 3);
  AttackSuite suite = standard_suite(3);
  const auto adaptive = adaptive_suite(model, 3);
  suite.insert(suite.end(), adaptive.begin(), adaptive.end());
  EvalOptions options;
  options.batch_size = 7;  // ragged last batch
  options.seed = 11;

  const auto params_before = model.parameters();
  std::vector<double> before;
  for (const auto& p : params_before) before.insert(before.end(), p.tensor.data().begin(), p.tensor.data().end());

  for (GatingMode mode : {GatingMode::soft(), GatingMode::hard()}) {
    const EvalReport a = evaluate(model, test, suite, mode, options);
    const EvalReport b = evaluate(model, test, suite, mode, options);
    EXPECT_EQ(a.samples, 20u);
    EXPECT_TRUE(a.ordering_holds());
    EXPECT_EQ(a.per_attack_accuracy.size(), suite.size());
    EXPECT_EQ(a.per_type_worst.size(), 3u);
    EXPECT_EQ(a.per_attack_accuracy, b.per_attack_accuracy);
    EXPECT_EQ(a.clean_accuracy, b.clean_accuracy);
    EXPECT_EQ(a.all_attacks_accuracy, b.all_attacks_accuracy);
    ASSERT_TRUE(a.gate_accuracy_per_layer.has_value());
    EXPECT_EQ(a.gate_accuracy_per_layer->size(), 2u);
    for (const auto& [slot, per_domain] : *a.gate_accuracy_per_layer) {
      EXPECT_EQ(per_domain.size(), 4u) << slot;
      for (const auto& [domain, acc] : per_domain) {
        EXPECT_GE(acc, 0.0);
        EXPECT_LE(acc, 1.0);
      }
    }
  }
  EXPECT_EQ(model.gating_mode(), GatingMode::soft());
  std::vector<double> after;
  for (const auto& p : model.parameters()) after.insert(after.end(), p.tensor.data().begin(), p.tensor.data().end());
  EXPECT_EQ(after, before);
}

TEST(Evaluate, ZeroBudgetAttacksMatchCleanAccuracy) {
  LeNet model(tiny_model(NormKind::Batch));
  train_vanilla(model, tiny_images(32, 4), [] {
    TrainConfig c = tiny_training();
    c.defense = Defense::Vanilla;
    c.epochs = 2;
    return c;
  }());
  AttackSuite suite = standard_suite(3);
  for (auto& entry : suite) entry.spec.epsilon = 0.0;
  const EvalReport r = evaluate(model, tiny_images(30, 5), suite, GatingMode::soft());
  for (const auto& [name, acc] : r.per_attack_accuracy) EXPECT_EQ(acc, r.clean_accuracy) << name;
  EXPECT_EQ(r.all_attacks_accuracy, r.clean_accuracy);
  EXPECT_FALSE(r.gate_accuracy_per_layer.has_value());
}

TEST(GateAccuracy, ZeroHeadTiesGoToTheFirstBranch) {
  LeNet model(tiny_model(NormKind::Gated));
  const Dataset data = tiny_images(6, 1);
  EXPECT_EQ(gate_accuracy(model, 0, data.images, 0), 1.0);
  EXPECT_EQ(gate_accuracy(model, 1, data.images, 3), 0.0);
  EXPECT_THROW(gate_accuracy(model, 2, data.images, 0), UsageError);
  LeNet plain(tiny_model(NormKind::Batch));
  EXPECT_THROW(gate_accuracy(plain, 0, data.images, 0), UsageError);
}

}  // namespace
}  // namespace gbnlab
