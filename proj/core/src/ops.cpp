#include "gbnlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Core>

#include "gbnlab/error.hpp"

namespace gbnlab::ops {

namespace {

using detail::Node;
using detail::NodePtr;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

void check_finite(const std::vector<double>& values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(std::string("non-finite value produced by ") + op);
  }
}

// Wraps freshly computed data into a tensor and records the backward rule
// when the op participates in differentiation.
Tensor finish(const char* op, Shape shape, std::vector<double> data,
              std::initializer_list<const Tensor*> inputs, Tape::BackwardFn backward) {
  check_finite(data, op);
  Tensor out(std::move(shape), std::move(data));
  Tape* tape = Tape::active();
  if (tape != nullptr && any_requires_grad(inputs)) {
    std::vector<NodePtr> nodes;
    nodes.reserve(inputs.size());
    for (const Tensor* t : inputs) nodes.push_back(t->node());
    tape->record(std::move(nodes), out.node(), std::move(backward));
  }
  return out;
}

bool wants_grad(const NodePtr& node) { return node->requires_grad; }

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " +
                         std::to_string(rank) + ", got " + shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

// Number of elements per (sample, channel) pair for an [n x c x ...] tensor.
std::size_t inner_extent(const Shape& shape) {
  std::size_t inner = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) inner *= shape[i];
  return inner;
}

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, oh, ow, stride, padding;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

// Writes the patches of one sample into columns [0, positions) of a
// row-major patch x ld matrix.
void im2col(const double* x, const ConvGeometry& g, double* col, std::size_t ld) {
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    const double* plane = x + ci * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((ci * g.kh + ki) * g.kw + kj) * ld;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          double* dst = row + oy * g.ow;
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.padding);
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix =
                static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.padding);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : plane[iy * g.w + ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, std::size_t ld, const ConvGeometry& g, double* dx) {
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    double* plane = dx + ci * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((ci * g.kh + ki) * g.kw + kj) * ld;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.padding);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix =
                static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.padding);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            plane[iy * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

// Samples per GEMM so that a chunk spans roughly 2048 output positions.
std::size_t conv_chunk(const ConvGeometry& g) {
  return std::clamp<std::size_t>(2048 / std::max<std::size_t>(g.positions(), 1), 1, g.n);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul", "left operand");
  require_rank(b, 2, "matmul", "right operand");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n);
  MatrixMap(out.data(), m, n).noalias() = ConstMatrixMap(a.data().data(), m, k) *
                                          ConstMatrixMap(b.data().data(), k, n);
  NodePtr an = a.node(), bn = b.node();
  return finish("matmul", {m, n}, std::move(out), {&a, &b}, [an, bn, m, k, n](const Node& o) {
    ConstMatrixMap g(o.grad.data(), m, n);
    if (wants_grad(an)) {
      std::vector<double> ga(m * k);
      MatrixMap(ga.data(), m, k).noalias() = g * ConstMatrixMap(bn->data.data(), k, n).transpose();
      an->accumulate_grad(ga);
    }
    if (wants_grad(bn)) {
      std::vector<double> gb(k * n);
      MatrixMap(gb.data(), k, n).noalias() = ConstMatrixMap(an->data.data(), m, k).transpose() * g;
      bn->accumulate_grad(gb);
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  require_rank(x, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  if (stride == 0) throw UsageError("conv2d: stride must be positive");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0), kernel.dim(2),
                 kernel.dim(3), 0, 0, stride, padding};
  if (kernel.dim(1) != g.c) {
    throw DimensionError("conv2d: input channels " + shape_to_string(x.shape()) +
                         " do not match kernel " + shape_to_string(kernel.shape()));
  }
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) {
    throw DimensionError("conv2d: kernel " + shape_to_string(kernel.shape()) +
                         " larger than padded input " + shape_to_string(x.shape()));
  }
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t patch = g.patch(), positions = g.positions(), chunk = conv_chunk(g);
  std::vector<double> out(g.n * g.o * positions);
  std::vector<double> col(patch * chunk * positions), prod(g.o * chunk * positions);
  const double* xd = x.data().data();
  ConstMatrixMap weights(kernel.data().data(), g.o, patch);
  for (std::size_t s0 = 0; s0 < g.n; s0 += chunk) {
    const std::size_t cs = std::min(chunk, g.n - s0), ld = cs * positions;
    for (std::size_t s = 0; s < cs; ++s) {
      im2col(xd + (s0 + s) * g.c * g.h * g.w, g, col.data() + s * positions, ld);
    }
    MatrixMap(prod.data(), g.o, ld).noalias() = weights * ConstMatrixMap(col.data(), patch, ld);
    for (std::size_t s = 0; s < cs; ++s) {
      for (std::size_t oc = 0; oc < g.o; ++oc) {
        std::copy_n(prod.data() + oc * ld + s * positions, positions,
                    out.data() + ((s0 + s) * g.o + oc) * positions);
      }
    }
  }

  NodePtr xn = x.node(), kn = kernel.node();
  return finish("conv2d", {g.n, g.o, g.oh, g.ow}, std::move(out), {&x, &kernel},
                [xn, kn, g](const Node& o) {
                  const std::size_t patch = g.patch(), positions = g.positions();
                  const std::size_t chunk = conv_chunk(g);
                  const bool need_x = wants_grad(xn), need_k = wants_grad(kn);
                  std::vector<double> gk(need_k ? kn->data.size() : 0, 0.0);
                  std::vector<double> gx(need_x ? xn->data.size() : 0, 0.0);
                  std::vector<double> col(patch * chunk * positions);
                  std::vector<double> grad(g.o * chunk * positions);
                  ConstMatrixMap weights(kn->data.data(), g.o, patch);
                  for (std::size_t s0 = 0; s0 < g.n; s0 += chunk) {
                    const std::size_t cs = std::min(chunk, g.n - s0), ld = cs * positions;
                    for (std::size_t s = 0; s < cs; ++s) {
                      for (std::size_t oc = 0; oc < g.o; ++oc) {
                        std::copy_n(o.grad.data() + ((s0 + s) * g.o + oc) * positions, positions,
                                    grad.data() + oc * ld + s * positions);
                      }
                    }
                    ConstMatrixMap gm(grad.data(), g.o, ld);
                    if (need_k) {
                      for (std::size_t s = 0; s < cs; ++s) {
                        im2col(xn->data.data() + (s0 + s) * g.c * g.h * g.w, g,
                               col.data() + s * positions, ld);
                      }
                      MatrixMap(gk.data(), g.o, patch).noalias() +=
                          gm * ConstMatrixMap(col.data(), patch, ld).transpose();
                    }
                    if (need_x) {
                      MatrixMap(col.data(), patch, ld).noalias() = weights.transpose() * gm;
                      for (std::size_t s = 0; s < cs; ++s) {
                        col2im_add(col.data() + s * positions, ld, g,
                                   gx.data() + (s0 + s) * g.c * g.h * g.w);
                      }
                    }
                  }
                  if (need_k) kn->accumulate_grad(gk);
                  if (need_x) xn->accumulate_grad(gx);
                });
}

Tensor max_pool2d(const Tensor& x, std::size_t window) {
  require_rank(x, 4, "max_pool2d", "input");
  if (window == 0) throw UsageError("max_pool2d: window must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < window || w < window) {
    throw DimensionError("max_pool2d: window larger than input " + shape_to_string(x.shape()));
  }
  const std::size_t oh = h / window, ow = w / window;
  std::vector<double> out(n * c * oh * ow);
  std::vector<std::size_t> source(out.size());
  const double* xd = x.data().data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* in = xd + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (oy * window) * w + ox * window;
        for (std::size_t dy = 0; dy < window; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = (oy * window + dy) * w + ox * window + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (plane * oh + oy) * ow + ox;
        out[o] = in[best];
        source[o] = plane * h * w + best;
      }
    }
  }
  NodePtr xn = x.node();
  return finish("max_pool2d", {n, c, oh, ow}, std::move(out), {&x},
                [xn, source = std::move(source)](const Node& o) {
                  std::vector<double> gx(xn->data.size(), 0.0);
                  for (std::size_t i = 0; i < source.size(); ++i) gx[source[i]] += o.grad[i];
                  xn->accumulate_grad(gx);
                });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  NodePtr an = a.node(), bn = b.node();
  return finish("add", a.shape(), std::move(out), {&a, &b}, [an, bn](const Node& o) {
    if (wants_grad(an)) an->accumulate_grad(o.grad);
    if (wants_grad(bn)) bn->accumulate_grad(o.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  NodePtr an = a.node(), bn = b.node();
  return finish("sub", a.shape(), std::move(out), {&a, &b}, [an, bn](const Node& o) {
    if (wants_grad(an)) an->accumulate_grad(o.grad);
    if (wants_grad(bn)) {
      std::vector<double> neg(o.grad.size());
      for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -o.grad[i];
      bn->accumulate_grad(neg);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  NodePtr an = a.node(), bn = b.node();
  return finish("mul", a.shape(), std::move(out), {&a, &b}, [an, bn](const Node& o) {
    const std::size_t count = o.grad.size();
    if (wants_grad(an)) {
      std::vector<double> ga(count);
      for (std::size_t i = 0; i < count; ++i) ga[i] = o.grad[i] * bn->data[i];
      an->accumulate_grad(ga);
    }
    if (wants_grad(bn)) {
      std::vector<double> gb(count);
      for (std::size_t i = 0; i < count; ++i) gb[i] = o.grad[i] * an->data[i];
      bn->accumulate_grad(gb);
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  NodePtr xn = x.node();
  return finish("scale", x.shape(), std::move(out), {&x}, [xn, factor](const Node& o) {
    std::vector<double> gx(o.grad.size());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = o.grad[i] * factor;
    xn->accumulate_grad(gx);
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  NodePtr xn = x.node();
  return finish("relu", x.shape(), std::move(out), {&x}, [xn](const Node& o) {
    std::vector<double> gx(o.grad.size());
    // Subgradient at exactly zero is zero.
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = xn->data[i] > 0.0 ? o.grad[i] : 0.0;
    xn->accumulate_grad(gx);
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias", "input");
  require_rank(bias, 1, "add_row_bias", "bias");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (bias.dim(0) != d) {
    throw DimensionError("add_row_bias: bias " + shape_to_string(bias.shape()) +
                         " does not match input " + shape_to_string(x.shape()));
  }
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.data()[i * d + j] + bias.data()[j];
  }
  NodePtr xn = x.node(), bn = bias.node();
  return finish("add_row_bias", x.shape(), std::move(out), {&x, &bias},
                [xn, bn, n, d](const Node& o) {
                  if (wants_grad(xn)) xn->accumulate_grad(o.grad);
                  if (wants_grad(bn)) {
                    std::vector<double> gb(d, 0.0);
                    for (std::size_t i = 0; i < n; ++i) {
                      for (std::size_t j = 0; j < d; ++j) gb[j] += o.grad[i * d + j];
                    }
                    bn->accumulate_grad(gb);
                  }
                });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() < 2) throw DimensionError("add_channel_bias: input needs a channel axis");
  require_rank(bias, 1, "add_channel_bias", "bias");
  const std::size_t n = x.dim(0), c = x.dim(1), inner = inner_extent(x.shape());
  if (bias.dim(0) != c) {
    throw DimensionError("add_channel_bias: bias " + shape_to_string(bias.shape()) +
                         " does not match input " + shape_to_string(x.shape()));
  }
  std::vector<double> out(x.numel());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (s * c + ch) * inner;
      for (std::size_t e = 0; e < inner; ++e) out[base + e] = x.data()[base + e] + bias.data()[ch];
    }
  }
  NodePtr xn = x.node(), bn = bias.node();
  return finish("add_channel_bias", x.shape(), std::move(out), {&x, &bias},
                [xn, bn, n, c, inner](const Node& o) {
                  if (wants_grad(xn)) xn->accumulate_grad(o.grad);
                  if (wants_grad(bn)) {
                    std::vector<double> gb(c, 0.0);
                    for (std::size_t s = 0; s < n; ++s) {
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        const std::size_t base = (s * c + ch) * inner;
                        for (std::size_t e = 0; e < inner; ++e) gb[ch] += o.grad[base + e];
                      }
                    }
                    bn->accumulate_grad(gb);
                  }
                });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                         shape_to_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  NodePtr xn = x.node();
  return finish("reshape", std::move(shape), std::move(out), {&x},
                [xn](const Node& o) { xn->accumulate_grad(o.grad); });
}

Tensor flatten(const Tensor& x) {
  if (x.rank() < 1) throw DimensionError("flatten: scalar input");
  const std::size_t n = x.dim(0);
  return reshape(x, {n, n ? x.numel() / n : 0});
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_rows: no inputs");
  Shape shape = parts.front().shape();
  if (shape.empty()) throw DimensionError("concat_rows: scalar input");
  std::size_t rows = 0;
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  for (const Tensor& part : parts) {
    Shape tail(part.shape().begin() + 1, part.shape().end());
    if (part.rank() != shape.size() || tail != Shape(shape.begin() + 1, shape.end())) {
      throw DimensionError("concat_rows: mismatched shapes " + shape_to_string(shape) + " and " +
                           shape_to_string(part.shape()));
    }
    offsets.push_back(out.size());
    out.insert(out.end(), part.data().begin(), part.data().end());
    rows += part.dim(0);
  }
  shape[0] = rows;
  std::vector<NodePtr> nodes;
  bool any_grad = false;
  for (const Tensor& part : parts) {
    nodes.push_back(part.node());
    any_grad = any_grad || part.requires_grad();
  }
  check_finite(out, "concat_rows");
  Tensor result(shape, std::move(out));
  Tape* tape = Tape::active();
  if (tape != nullptr && any_grad) {
    auto inputs = nodes;
    tape->record(std::move(inputs), result.node(), [nodes, offsets](const Node& o) {
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (!wants_grad(nodes[i])) continue;
        const std::size_t count = nodes[i]->data.size();
        nodes[i]->accumulate_grad(std::span<const double>(o.grad.data() + offsets[i], count));
      }
    });
  }
  return result;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() < 1 || begin > end || end > x.dim(0)) {
    throw IndexError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_to_string(x.shape()));
  }
  Shape shape = x.shape();
  const std::size_t row = x.numel() / shape[0];
  shape[0] = end - begin;
  std::vector<double> out(x.data().begin() + begin * row, x.data().begin() + end * row);
  NodePtr xn = x.node();
  return finish("slice_rows", std::move(shape), std::move(out), {&x},
                [xn, begin, row](const Node& o) {
                  std::vector<double> gx(xn->data.size(), 0.0);
                  std::copy(o.grad.begin(), o.grad.end(), gx.begin() + begin * row);
                  xn->accumulate_grad(gx);
                });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  NodePtr xn = x.node();
  return finish("sum", {}, {acc}, {&x}, [xn](const Node& o) {
    std::vector<double> gx(xn->data.size(), o.grad[0]);
    xn->accumulate_grad(gx);
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor softmax(const Tensor& logits) {
  require_rank(logits, 2, "softmax", "logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * c;
    const double top = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(row[j] - top);
      z += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  NodePtr xn = logits.node();
  std::vector<double> probs = out;
  return finish("softmax", {n, c}, std::move(out), {&logits},
                [xn, probs = std::move(probs), n, c](const Node& o) {
                  std::vector<double> gx(n * c);
                  for (std::size_t i = 0; i < n; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < c; ++j) dot += o.grad[i * c + j] * probs[i * c + j];
                    for (std::size_t j = 0; j < c; ++j) {
                      gx[i * c + j] = probs[i * c + j] * (o.grad[i * c + j] - dot);
                    }
                  }
                  xn->accumulate_grad(gx);
                });
}

namespace {

void check_labels(const Tensor& logits, std::span<const int> labels, const char* op) {
  require_rank(logits, 2, op, "logits");
  if (labels.size() != logits.dim(0)) {
    throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) +
                         " labels for logits " + shape_to_string(logits.shape()));
  }
  const int classes = static_cast<int>(logits.dim(1));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw IndexError(std::string(op) + ": label " + std::to_string(labels[i]) +
                       " at position " + std::to_string(i) + " outside 0.." +
                       std::to_string(classes - 1));
    }
  }
}

// Returns log-sum-exp per row and fills softmax probabilities.
std::vector<double> stable_softmax(const double* data, std::size_t n, std::size_t c,
                                   std::vector<double>* probs) {
  std::vector<double> lse(n);
  if (probs) probs->resize(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = data + i * c;
    const double top = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - top);
    lse[i] = top + std::log(z);
    if (probs) {
      for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(row[j] - lse[i]);
    }
  }
  return lse;
}

}  // namespace

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  check_labels(logits, labels, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (n == 0) throw DimensionError("softmax_cross_entropy: empty batch");
  std::vector<double> probs;
  const auto lse = stable_softmax(logits.data().data(), n, c, &probs);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += lse[i] - logits.data()[i * c + labels[i]];
  const double loss = total / static_cast<double>(n);
  NodePtr xn = logits.node();
  std::vector<int> owned(labels.begin(), labels.end());
  return finish("softmax_cross_entropy", {}, {loss}, {&logits},
                [xn, probs = std::move(probs), owned = std::move(owned), n, c](const Node& o) {
                  const double factor = o.grad[0] / static_cast<double>(n);
                  std::vector<double> gx(n * c);
                  for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < c; ++j) {
                      const double target = static_cast<int>(j) == owned[i] ? 1.0 : 0.0;
                      gx[i * c + j] = (probs[i * c + j] - target) * factor;
                    }
                  }
                  xn->accumulate_grad(gx);
                });
}

std::vector<double> cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels) {
  check_labels(logits, labels, "cross_entropy_per_sample");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  const auto lse = stable_softmax(logits.data().data(), n, c, nullptr);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = lse[i] - logits.data()[i * c + labels[i]];
  return out;
}

BatchNormResult batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                 double xi) {
  if (x.rank() < 2) throw DimensionError("batch_norm: input needs a channel axis");
  const std::size_t n = x.dim(0), c = x.dim(1), inner = inner_extent(x.shape());
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("batch_norm: " + std::to_string(c) + " channels in input " +
                         shape_to_string(x.shape()) + " but affine parameters have " +
                         std::to_string(gamma.numel()));
  }
  const std::size_t m = n * inner;
  std::vector<double> mu(c, 0.0), var(c, 0.0), inv_std(c);
  const double* xd = x.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const double* p = xd + (s * c + ch) * inner;
      for (std::size_t e = 0; e < inner; ++e) acc += p[e];
    }
    mu[ch] = acc / static_cast<double>(m);
    double sq = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const double* p = xd + (s * c + ch) * inner;
      for (std::size_t e = 0; e < inner; ++e) {
        const double d = p[e] - mu[ch];
        sq += d * d;
      }
    }
    var[ch] = sq / static_cast<double>(m);
    inv_std[ch] = 1.0 / std::sqrt(var[ch] + xi);
  }
  std::vector<double> xhat(x.numel()), out(x.numel());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (s * c + ch) * inner;
      for (std::size_t e = 0; e < inner; ++e) {
        xhat[base + e] = (xd[base + e] - mu[ch]) * inv_std[ch];
        out[base + e] = gamma.data()[ch] * xhat[base + e] + beta.data()[ch];
      }
    }
  }
  NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node();
  Tensor y = finish(
      "batch_norm_train", x.shape(), std::move(out), {&x, &gamma, &beta},
      [xn, gn, bn, xhat = std::move(xhat), inv_std, n, c, inner, m](const Node& o) {
        std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t s = 0; s < n; ++s) {
            const std::size_t base = (s * c + ch) * inner;
            for (std::size_t e = 0; e < inner; ++e) {
              sum_g[ch] += o.grad[base + e];
              sum_gx[ch] += o.grad[base + e] * xhat[base + e];
            }
          }
        }
        if (wants_grad(gn)) gn->accumulate_grad(sum_gx);
        if (wants_grad(bn)) bn->accumulate_grad(sum_g);
        if (wants_grad(xn)) {
          const double md = static_cast<double>(m);
          std::vector<double> gx(xn->data.size());
          for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              const double k = gn->data[ch] * inv_std[ch] / md;
              const std::size_t base = (s * c + ch) * inner;
              for (std::size_t e = 0; e < inner; ++e) {
                gx[base + e] =
                    k * (md * o.grad[base + e] - sum_g[ch] - xhat[base + e] * sum_gx[ch]);
              }
            }
          }
          xn->accumulate_grad(gx);
        }
      });
  return BatchNormResult{std::move(y), std::move(mu), std::move(var)};
}

Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       std::span<const double> mean, std::span<const double> var, double xi) {
  if (x.rank() < 2) throw DimensionError("batch_norm: input needs a channel axis");
  const std::size_t n = x.dim(0), c = x.dim(1), inner = inner_extent(x.shape());
  if (gamma.numel() != c || beta.numel() != c || mean.size() != c || var.size() != c) {
    throw DimensionError("batch_norm: " + std::to_string(c) + " channels in input " +
                         shape_to_string(x.shape()) + " but branch state has " +
                         std::to_string(gamma.numel()));
  }
  std::vector<double> inv_std(c), out(x.numel());
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + xi);
  const double* xd = x.data().data();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (s * c + ch) * inner;
      for (std::size_t e = 0; e < inner; ++e) {
        out[base + e] =
            gamma.data()[ch] * (xd[base + e] - mean[ch]) * inv_std[ch] + beta.data()[ch];
      }
    }
  }
  NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node();
  std::vector<double> mu(mean.begin(), mean.end());
  return finish("batch_norm_eval", x.shape(), std::move(out), {&x, &gamma, &beta},
                [xn, gn, bn, mu = std::move(mu), inv_std, n, c, inner](const Node& o) {
                  std::vector<double> gx(wants_grad(xn) ? xn->data.size() : 0);
                  std::vector<double> gg(c, 0.0), gb(c, 0.0);
                  for (std::size_t s = 0; s < n; ++s) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      const std::size_t base = (s * c + ch) * inner;
                      for (std::size_t e = 0; e < inner; ++e) {
                        const double g = o.grad[base + e];
                        gb[ch] += g;
                        gg[ch] += g * (xn->data[base + e] - mu[ch]) * inv_std[ch];
                        if (!gx.empty()) gx[base + e] = g * gn->data[ch] * inv_std[ch];
                      }
                    }
                  }
                  if (wants_grad(gn)) gn->accumulate_grad(gg);
                  if (wants_grad(bn)) bn->accumulate_grad(gb);
                  if (!gx.empty()) xn->accumulate_grad(gx);
                });
}

Tensor mix(const std::vector<Tensor>& branches, const Tensor& weights) {
  if (branches.empty()) throw UsageError("mix: no branches");
  require_rank(weights, 2, "mix", "weights");
  const std::size_t k = branches.size();
  const Shape& shape = branches.front().shape();
  if (shape.empty()) throw DimensionError("mix: branch outputs need a batch axis");
  const std::size_t n = shape[0];
  if (weights.dim(0) != n || weights.dim(1) != k) {
    throw DimensionError("mix: weights " + shape_to_string(weights.shape()) + " for " +
                         std::to_string(k) + " branches of shape " + shape_to_string(shape));
  }
  for (const Tensor& b : branches) {
    if (b.shape() != shape) throw DimensionError("mix: branch shapes differ");
  }
  const std::size_t row = branches.front().numel() / std::max<std::size_t>(n, 1);
  std::vector<double> out(n * row, 0.0);
  const double* wd = weights.data().data();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t b = 0; b < k; ++b) {
      const double w = wd[s * k + b];
      const double* src = branches[b].data().data() + s * row;
      double* dst = out.data() + s * row;
      for (std::size_t e = 0; e < row; ++e) dst[e] += w * src[e];
    }
  }
  std::vector<NodePtr> nodes;
  bool any_grad = weights.requires_grad();
  for (const Tensor& b : branches) {
    nodes.push_back(b.node());
    any_grad = any_grad || b.requires_grad();
  }
  NodePtr wn = weights.node();
  check_finite(out, "mix");
  Tensor result(shape, std::move(out));
  Tape* tape = Tape::active();
  if (tape != nullptr && any_grad) {
    auto inputs = nodes;
    inputs.push_back(wn);
    tape->record(std::move(inputs), result.node(), [nodes, wn, n, k, row](const Node& o) {
      for (std::size_t b = 0; b < k; ++b) {
        if (!wants_grad(nodes[b])) continue;
        std::vector<double> gb(n * row);
        for (std::size_t s = 0; s < n; ++s) {
          const double w = wn->data[s * k + b];
          for (std::size_t e = 0; e < row; ++e) gb[s * row + e] = w * o.grad[s * row + e];
        }
        nodes[b]->accumulate_grad(gb);
      }
      if (wants_grad(wn)) {
        std::vector<double> gw(n * k, 0.0);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t b = 0; b < k; ++b) {
            const double* src = nodes[b]->data.data() + s * row;
            double acc = 0.0;
            for (std::size_t e = 0; e < row; ++e) acc += o.grad[s * row + e] * src[e];
            gw[s * k + b] = acc;
          }
        }
        wn->accumulate_grad(gw);
      }
    });
  }
  return result;
}

std::vector<int> argmax_rows(const Tensor& matrix) {
  require_rank(matrix, 2, "argmax_rows", "input");
  const std::size_t n = matrix.dim(0), c = matrix.dim(1);
  std::vector<int> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = matrix.data().data() + i * c;
    out[i] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

}  // namespace gbnlab::ops
