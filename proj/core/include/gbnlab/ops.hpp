#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "gbnlab/tensor.hpp"

// Differentiable tensor operations. Every function records a backward rule
// on the active tape when at least one input requires a gradient.
// All reductions accumulate sequentially in index order so results are
// bit-reproducible.
namespace gbnlab::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding);
Tensor max_pool2d(const Tensor& x, std::size_t window);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor relu(const Tensor& x);

// x[n x d] + bias[d]
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
// x[n x c x ...] + bias[c]
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

Tensor reshape(const Tensor& x, Shape shape);
// Collapses every axis after the first: [n x ...] -> [n x rest].
Tensor flatten(const Tensor& x);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Row-wise softmax of an [n x C] matrix.
Tensor softmax(const Tensor& logits);
// Mean over the batch of -log softmax(logits)[label].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
// Per-sample cross-entropy values; not differentiable.
std::vector<double> cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels);

struct BatchNormResult {
  Tensor output;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;  // biased (divide by m)
};

// Normalizes with the batch statistics of every channel (axis 1).
BatchNormResult batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                 double xi);
// Normalizes with fixed population statistics.
Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       std::span<const double> mean, std::span<const double> var, double xi);

// Per-sample convex combination: out[s] = sum_k weights[s, k] * branches[k][s].
Tensor mix(const std::vector<Tensor>& branches, const Tensor& weights);

std::vector<int> argmax_rows(const Tensor& matrix);

}  // namespace gbnlab::ops
