#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "gbnlab/error.hpp"
#include "gbnlab/layers.hpp"
#include "gbnlab/model.hpp"
#include "gbnlab/ops.hpp"
#include "support/gradcheck.hpp"

namespace gbnlab {
namespace {

using testing::gradient_error;
using testing::random_tensor;
using testing::weighted_sum;

BnBranchState exact_state(std::size_t channels) {
  return BnBranchState::init(channels, BnOptions{0.0, 0.1});
}

TEST(BnForward, ThreeSampleHandValue) {
  auto state = exact_state(1);
  Tensor x({3, 1}, std::vector<double>{1, 2, 3});
  Tensor y = bn_forward(x, state, LayerMode::Train);
  EXPECT_NEAR(y.data()[0], -1.224744871391589, 1e-12);
  EXPECT_NEAR(y.data()[1], 0.0, 1e-12);
  EXPECT_NEAR(y.data()[2], 1.224744871391589, 1e-12);
  EXPECT_EQ(state.num_batches_seen, 1u);
}

TEST(BnForward, EvalInvertsWhenAffineMatchesStatistics) {
  BnBranchState state = BnBranchState::init(2);
  state.running_mean = {0.4, -1.5};
  state.running_var = {2.0, 0.3};
  for (std::size_t c = 0; c < 2; ++c) {
    state.gamma.mutable_data()[c] = std::sqrt(state.running_var[c] + state.xi);
    state.beta.mutable_data()[c] = state.running_mean[c];
  }
  Rng rng(4);
  Tensor x = random_tensor({3, 2, 2, 2}, rng);
  Tensor y = bn_forward(x, state, LayerMode::Eval);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-12);
}

TEST(BnForward, RunningUpdateSubstitution) {
  auto state = exact_state(1);
  state.update_running({1.0}, {1.0});
  EXPECT_NEAR(state.running_mean[0], 0.1, 1e-15);
  state.update_running({1.0}, {1.0});
  EXPECT_NEAR(state.running_mean[0], 0.19, 1e-15);
}

TEST(BnForward, Errors) {
  auto state = BnBranchState::init(3);
  EXPECT_THROW(bn_forward(Tensor({1, 3}), state, LayerMode::Train), BatchSizeError);
  EXPECT_THROW(bn_forward(Tensor({4, 2}), state, LayerMode::Train), DimensionError);
  EXPECT_THROW(bn_forward(Tensor({4, 2}), state, LayerMode::Eval), DimensionError);
  EXPECT_NO_THROW(bn_forward(Tensor({1, 3}), state, LayerMode::Eval));
}

TEST(BnForward, TrainOutputIsStandardized) {
  for (int seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const std::size_t n = 4 + seed % 5;
    Tensor x = random_tensor({n, 3, 2, 3}, rng, -5, 5);
    auto state = BnBranchState::init(3);
    const auto moments = channel_moments(x);
    const auto out = channel_moments(bn_forward(x, state, LayerMode::Train));
    for (std::size_t c = 0; c < 3; ++c) {
      const double target = moments.var[c] / (moments.var[c] + state.xi);
      EXPECT_LE(std::abs(out.mean[c]), 1e-10);
      EXPECT_NEAR(out.var[c], target, 1e-6);
    }
  }
}

TEST(BnForward, EvalNeverMutatesState) {
  Rng rng(8);
  auto state = BnBranchState::init(2);
  bn_forward(random_tensor({5, 2}, rng), state, LayerMode::Train);
  const auto mean = state.running_mean, var = state.running_var;
  const auto seen = state.num_batches_seen;
  Tensor x = random_tensor({5, 2}, rng);
  for (int i = 0; i < 1000; ++i) bn_forward(x, state, LayerMode::Eval);
  EXPECT_EQ(state.running_mean, mean);
  EXPECT_EQ(state.running_var, var);
  EXPECT_EQ(state.num_batches_seen, seen);
}

TEST(BnForward, RecurrenceMatchesClosedForm) {
  Rng rng(12);
  auto state = BnBranchState::init(1);
  const double alpha = state.alpha, mean0 = state.running_mean[0], var0 = state.running_var[0];
  std::vector<double> means, vars;
  for (int t = 0; t < 50; ++t) {
    Tensor x = random_tensor({6, 1}, rng, -2, 3);
    const auto m = channel_moments(x);
    means.push_back(m.mean[0]);
    vars.push_back(m.var[0]);
    bn_forward(x, state, LayerMode::Train);
  }
  double mean = std::pow(1 - alpha, 50) * mean0, var = std::pow(1 - alpha, 50) * var0;
  for (int i = 0; i < 50; ++i) {
    mean += alpha * std::pow(1 - alpha, 49 - i) * means[i];
    var += alpha * std::pow(1 - alpha, 49 - i) * vars[i];
  }
  EXPECT_NEAR(state.running_mean[0], mean, 1e-12);
  EXPECT_NEAR(state.running_var[0], var, 1e-12);
}

TEST(Dense, IdentityAndBias) {
  Dense d = Dense::zeros(3, 3);
  for (std::size_t i = 0; i < 3; ++i) d.weight.mutable_data()[i * 3 + i] = 1.0;
  Tensor x = Tensor::from_rows({{1, -2, 3}, {0.5, 0, 4}});
  Tensor y = d.forward(x);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()),
            std::vector<double>(x.data().begin(), x.data().end()));

  d.bias = Tensor::vector({7, 8, 9});
  Tensor z = d.forward(Tensor::zeros({2, 3}));
  EXPECT_EQ(std::vector<double>(z.data().begin(), z.data().end()),
            (std::vector<double>{7, 8, 9, 7, 8, 9}));
  EXPECT_THROW(d.forward(Tensor::zeros({2, 4})), DimensionError);
}

TEST(Dense, GradientCheck) {
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    Dense d = Dense::init(4, 3, rng);
    Tensor x = random_tensor({2, 4}, rng), w = random_tensor({2, 3}, rng);
    auto f = [&] { return weighted_sum(d.forward(x), w); };
    EXPECT_LE(gradient_error(f, {x, d.weight, d.bias}), 1e-4) << "seed " << seed;
  }
}

TEST(Conv2dLayer, GradientCheck) {
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    Conv2d conv = Conv2d::init(2, 3, 3, 1, 1, true, rng);
    Tensor x = random_tensor({2, 2, 5, 5}, rng), w = random_tensor({2, 3, 5, 5}, rng);
    auto f = [&] { return weighted_sum(conv.forward(x), w); };
    EXPECT_LE(gradient_error(f, {x, conv.weight, *conv.bias}), 1e-4) << "seed " << seed;
  }
}

TEST(BnLayer, GradientCheckTrainAndEval) {
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    auto state = BnBranchState::init(2);
    state.running_mean = {0.3, -0.1};
    state.running_var = {0.7, 1.9};
    Tensor x = random_tensor({3, 2, 2, 2}, rng), w = random_tensor({3, 2, 2, 2}, rng);
    // Train mode mutates the running statistics, so differentiate a copy.
    auto train = [&] {
      auto scratch = state;
      return weighted_sum(bn_forward(x, scratch, LayerMode::Train), w);
    };
    auto eval = [&] { return weighted_sum(bn_forward_eval(x, state), w); };
    EXPECT_LE(gradient_error(train, {x, state.gamma, state.beta}), 1e-4) << "seed " << seed;
    EXPECT_LE(gradient_error(eval, {x, state.gamma, state.beta}), 1e-4) << "seed " << seed;
  }
}

TEST(Kaiming, RespectsFanInBound) {
  Rng rng(1);
  Tensor w = kaiming_uniform({8, 25}, 25, rng);
  const double bound = std::sqrt(6.0 / 25);
  for (double v : w.data()) EXPECT_LE(std::abs(v), bound);
}

TEST(LeNet, OutputShape) {
  LeNet model(ModelConfig{});
  Rng rng(0);
  Tensor x = random_tensor({8, 1, 28, 28}, rng, 0, 1);
  EXPECT_EQ(model.forward(x, LayerMode::Train).shape(), (Shape{8, 10}));
  EXPECT_EQ(model.forward(x, LayerMode::Eval).shape(), (Shape{8, 10}));
  EXPECT_THROW(model.forward(Tensor({2, 1, 27, 28}), LayerMode::Eval), DimensionError);
}

void zero_final_layer(LeNet& model) {
  for (auto& p : model.parameters()) {
    if (p.name.rfind("fc2.", 0) == 0) {
      Tensor t = p.tensor;
      std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
    }
  }
}

TEST(LeNet, ZeroFinalLayerGivesLogTen) {
  for (NormKind kind : {NormKind::None, NormKind::Batch, NormKind::Gated}) {
    ModelConfig cfg;
    cfg.norm = kind;
    LeNet model(cfg);
    zero_final_layer(model);
    Rng rng(2);
    Tensor x = random_tensor({4, 1, 28, 28}, rng, 0, 1);
    std::vector<int> labels{0, 3, 9, 5};
    Tensor loss = ops::softmax_cross_entropy(model.forward(x, LayerMode::Train), labels);
    EXPECT_NEAR(loss.item(), std::log(10.0), 1e-12) << to_string(kind);
  }
}

// Small widths keep the full-network finite-difference sweep cheap.
ModelConfig tiny_config(NormKind kind, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.norm = kind;
  cfg.input_size = 12;
  cfg.kernel = 3;
  cfg.conv1_channels = 2;
  cfg.conv2_channels = 3;
  cfg.hidden = 5;
  cfg.classes = 4;
  cfg.gate_hidden_channels = 2;
  cfg.fc_gate_hidden = 6;
  cfg.init_seed = seed;
  return cfg;
}

std::vector<Tensor> tensors(const std::vector<NamedTensor>& named) {
  std::vector<Tensor> out;
  for (const auto& p : named) out.push_back(p.tensor);
  return out;
}

TEST(LeNet, FullGradientCheckTwoSamples) {
  for (int seed = 0; seed < 10; ++seed) {
    LeNet model(tiny_config(NormKind::Batch, seed));
    Rng rng(seed);
    Tensor x = random_tensor({2, 1, 12, 12}, rng, 0, 1);
    std::vector<int> labels{1, 3};
    auto inputs = tensors(model.parameters());
    inputs.push_back(x);
    auto f = [&] {
      // Throwaway copy of the running statistics so repeated evaluation sees
      // the same state.
      auto saved = model.norms();
      Tensor loss = ops::softmax_cross_entropy(model.forward(x, LayerMode::Train), labels);
      for (std::size_t i = 0; i < saved.size(); ++i) {
        for (std::size_t k = 0; k < saved[i].num_branches(); ++k) {
          auto& b = model.norms()[i].branches()[k];
          b.running_mean = saved[i].branches()[k].running_mean;
          b.running_var = saved[i].branches()[k].running_var;
          b.num_batches_seen = saved[i].branches()[k].num_batches_seen;
        }
      }
      return loss;
    };
    EXPECT_LE(gradient_error(f, inputs), 1e-4) << "seed " << seed;
  }
}

}  // namespace
}  // namespace gbnlab
