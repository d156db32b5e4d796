#include "gbnlab/layers.hpp"

#include <algorithm>
#include <cmath>

#include "gbnlab/error.hpp"
#include "gbnlab/ops.hpp"

namespace gbnlab {

BnBranchState BnBranchState::init(std::size_t channels, BnOptions options) {
  BnBranchState state;
  state.gamma = Tensor::ones({channels}).set_requires_grad(true);
  state.beta = Tensor::zeros({channels}).set_requires_grad(true);
  state.running_mean.assign(channels, 0.0);
  state.running_var.assign(channels, 1.0);
  state.xi = options.xi;
  state.alpha = options.alpha;
  return state;
}

void BnBranchState::update_running(const std::vector<double>& batch_mean,
                                   const std::vector<double>& batch_var) {
  for (std::size_t c = 0; c < channels(); ++c) {
    running_mean[c] = (1.0 - alpha) * running_mean[c] + alpha * batch_mean[c];
    running_var[c] = (1.0 - alpha) * running_var[c] + alpha * batch_var[c];
  }
  ++num_batches_seen;
}

namespace {

void check_channels(const Tensor& x, const BnBranchState& state) {
  if (x.rank() < 2 || x.dim(1) != state.channels()) {
    throw DimensionError("bn_forward: input " + shape_to_string(x.shape()) + " does not have " +
                         std::to_string(state.channels()) + " channels");
  }
}

}  // namespace

Tensor bn_forward(const Tensor& x, BnBranchState& state, LayerMode mode) {
  check_channels(x, state);
  if (mode == LayerMode::Eval) return bn_forward_eval(x, state);
  if (x.dim(0) < 2) {
    throw BatchSizeError("bn_forward: training mode needs at least 2 samples, got " +
                         std::to_string(x.dim(0)));
  }
  auto result = ops::batch_norm_train(x, state.gamma, state.beta, state.xi);
  state.update_running(result.batch_mean, result.batch_var);
  return result.output;
}

Tensor bn_forward_eval(const Tensor& x, const BnBranchState& state) {
  check_channels(x, state);
  return ops::batch_norm_eval(x, state.gamma, state.beta, state.running_mean, state.running_var,
                              state.xi);
}

ChannelMoments channel_moments(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("channel_moments: input needs a channel axis");
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.numel() / std::max<std::size_t>(n * c, 1);
  const double m = static_cast<double>(n * inner);
  ChannelMoments out{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  const double* xd = x.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t e = 0; e < inner; ++e) acc += xd[(s * c + ch) * inner + e];
    }
    out.mean[ch] = acc / m;
    double sq = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t e = 0; e < inner; ++e) {
        const double d = xd[(s * c + ch) * inner + e] - out.mean[ch];
        sq += d * d;
      }
    }
    out.var[ch] = sq / m;
  }
  return out;
}

Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = uniform(rng, -bound, bound);
  return t;
}

Dense Dense::init(std::size_t d_in, std::size_t d_out, Rng& rng) {
  Dense layer;
  layer.weight = kaiming_uniform({d_in, d_out}, d_in, rng).set_requires_grad(true);
  layer.bias = Tensor::zeros({d_out}).set_requires_grad(true);
  return layer;
}

Dense Dense::zeros(std::size_t d_in, std::size_t d_out) {
  Dense layer;
  layer.weight = Tensor::zeros({d_in, d_out}).set_requires_grad(true);
  layer.bias = Tensor::zeros({d_out}).set_requires_grad(true);
  return layer;
}

Tensor Dense::forward(const Tensor& x) const { return dense_forward(x, weight, bias); }

Tensor dense_forward(const Tensor& x, const Tensor& weights, const Tensor& bias) {
  if (x.rank() != 2 || weights.rank() != 2 || x.dim(1) != weights.dim(0)) {
    throw DimensionError("dense_forward: input " + shape_to_string(x.shape()) +
                         " incompatible with weights " + shape_to_string(weights.shape()));
  }
  return ops::add_row_bias(ops::matmul(x, weights), bias);
}

Conv2d Conv2d::init(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                    std::size_t stride, std::size_t padding, bool with_bias, Rng& rng) {
  Conv2d layer;
  const std::size_t fan_in = in_channels * kernel * kernel;
  layer.weight =
      kaiming_uniform({out_channels, in_channels, kernel, kernel}, fan_in, rng)
          .set_requires_grad(true);
  if (with_bias) layer.bias = Tensor::zeros({out_channels}).set_requires_grad(true);
  layer.stride = stride;
  layer.padding = padding;
  return layer;
}

Tensor Conv2d::forward(const Tensor& x) const {
  Tensor y = ops::conv2d(x, weight, stride, padding);
  return bias ? ops::add_channel_bias(y, *bias) : y;
}

}  // namespace gbnlab
