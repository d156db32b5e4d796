#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "gbnlab/rng.hpp"
#include "gbnlab/tensor.hpp"

namespace gbnlab {

enum class LayerMode { Train, Eval };

struct BnOptions {
  double xi = 1e-5;    // added to the variance before the square root
  double alpha = 0.1;  // running-average update factor
};

/// One complete batch-normalization state: affine parameters plus the
/// population statistics estimated by exponential averaging.
struct BnBranchState {
  Tensor gamma;
  Tensor beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double xi = 1e-5;
  double alpha = 0.1;
  std::uint64_t num_batches_seen = 0;

  static BnBranchState init(std::size_t channels, BnOptions options = {});

  std::size_t channels() const { return running_mean.size(); }

  // Folds one batch's (biased) statistics into the running averages.
  void update_running(const std::vector<double>& batch_mean, const std::vector<double>& batch_var);
};

/// Batch normalization over axis 1 of x[n x c x ...].
///
/// Train: normalizes with the batch mean and biased batch variance over all
/// non-channel axes, then updates the running statistics. Needs n >= 2.
/// Eval: normalizes with the running statistics and leaves state untouched.
Tensor bn_forward(const Tensor& x, BnBranchState& state, LayerMode mode);
Tensor bn_forward_eval(const Tensor& x, const BnBranchState& state);

struct ChannelMoments {
  std::vector<double> mean;
  std::vector<double> var;  // biased
};

// Per-channel mean and biased variance over every non-channel axis.
ChannelMoments channel_moments(const Tensor& x);

// Kaiming-uniform with fan-in: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng);

struct Dense {
  Tensor weight;  // [d_in x d_out]
  Tensor bias;    // [d_out]

  static Dense init(std::size_t d_in, std::size_t d_out, Rng& rng);
  static Dense zeros(std::size_t d_in, std::size_t d_out);
  Tensor forward(const Tensor& x) const;
};

Tensor dense_forward(const Tensor& x, const Tensor& weights, const Tensor& bias);

struct Conv2d {
  Tensor weight;               // [out x in x k x k]
  std::optional<Tensor> bias;  // [out]
  std::size_t stride = 1;
  std::size_t padding = 0;

  static Conv2d init(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                     std::size_t stride, std::size_t padding, bool with_bias, Rng& rng);
  Tensor forward(const Tensor& x) const;
};

}  // namespace gbnlab
