#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "gbnlab/ops.hpp"
#include "gbnlab/rng.hpp"
#include "gbnlab/tensor.hpp"

namespace gbnlab::testing {

struct GradientCheck {
  double error = 0.0;        // norm-wise relative error over checked coordinates
  std::size_t checked = 0;
  std::size_t kinks = 0;     // coordinates skipped because a ReLU/max kink lies within h
};

// Compares the analytic gradient of f w.r.t. every input with central
// differences. A coordinate whose one-sided slopes disagree by more than
// 1e-3 (relative) straddles a non-differentiable point of relu/max-pool
// within h and is skipped; smooth coordinates disagree by O(h * f'').
// f must build a scalar from the current contents of the inputs.
inline GradientCheck check_gradient(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                    double h = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor out = f();
    tape.backward(out);
  }
  GradientCheck result;
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto values = t.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      NoGradScope no_grad;
      const double mid = f().item();
      values[i] = saved + h;
      const double up = f().item();
      values[i] = saved - h;
      const double down = f().item();
      values[i] = saved;
      const double right = (up - mid) / h, left = (mid - down) / h;
      if (std::abs(right - left) > 1e-3 * std::max(1.0, std::abs(right) + std::abs(left))) {
        ++result.kinks;
        continue;
      }
      const double numeric = (up - down) / (2.0 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
      ++result.checked;
    }
    t.clear_grad();
  }
  const double scale = std::max(std::sqrt(a2), std::sqrt(n2));
  result.error = scale == 0.0 ? 0.0 : std::sqrt(diff2) / scale;
  return result;
}

// Relative error at the first of h, h/10, h/100 where at most 1% of the
// coordinates are kinks (a kink inside the stencil disappears as h shrinks);
// infinity if every step size leaves too few smooth coordinates.
inline double gradient_error(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                             double h = 1e-5) {
  for (int attempt = 0; attempt < 3; ++attempt, h /= 10.0) {
    const GradientCheck r = check_gradient(f, inputs, h);
    if (r.kinks * 100 <= r.checked + r.kinks) return r.error;
  }
  return std::numeric_limits<double>::infinity();
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = uniform(rng, lo, hi);
  return t;
}

// Scalar probe that depends on every entry of x.
inline Tensor weighted_sum(const Tensor& x, const Tensor& weights) {
  return ops::sum(ops::mul(x, weights));
}

}  // namespace gbnlab::testing
