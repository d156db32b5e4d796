#include "gbnlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gbnlab/error.hpp"

namespace gbnlab {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::span<double> Node::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

void Node::accumulate_grad(std::span<const double> g) {
  auto dst = ensure_grad();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  touched = true;
}

}  // namespace detail

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<detail::Node>()) {
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : node_(std::make_shared<detail::Node>()) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n = rows.size();
  const std::size_t m = n ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(n * m);
  for (const auto& row : rows) {
    if (row.size() != m) throw DimensionError("ragged rows in Tensor::from_rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor({n, m}, std::move(values));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

const Shape& Tensor::shape() const {
  static const Shape empty;
  return node_ ? node_->shape : empty;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(shape()));
  }
  return shape()[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() requires a single-element tensor, got " +
                         shape_to_string(shape()));
  }
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= shape()[axis]) throw IndexError("index out of range");
    flat = flat * shape()[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) return {};
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::clear_grad() {
  if (node_) node_->grad.clear();
}

bool Tensor::is_leaf() const { return !node_ || node_->is_leaf; }

Tensor Tensor::detach() const {
  Tensor out(shape(), std::vector<double>(data().begin(), data().end()));
  return out;
}

Tensor Tensor::clone() const {
  Tensor out = detach();
  out.node_->requires_grad = requires_grad();
  return out;
}

void Tape::record(std::vector<detail::NodePtr> inputs, detail::NodePtr output,
                  BackwardFn backward) {
  output->is_leaf = false;
  output->requires_grad = true;
  records_.push_back(Record{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " +
                     shape_to_string(loss.shape()));
  }
  const auto& loss_node = loss.node();
  auto produced = std::find_if(records_.begin(), records_.end(),
                               [&](const Record& r) { return r.output == loss_node; });
  if (produced == records_.end()) {
    if (loss_node->is_leaf && loss_node->requires_grad) {
      // A leaf loss differentiates to one with respect to itself.
      const double one = 1.0;
      loss_node->accumulate_grad(std::span<const double>(&one, 1));
      return;
    }
    throw UsageError("backward() loss was not produced on the active tape");
  }

  for (auto& record : records_) {
    auto& out = *record.output;
    std::fill(out.grad.begin(), out.grad.end(), 0.0);
    out.touched = false;
  }
  loss_node->ensure_grad()[0] = 1.0;
  loss_node->touched = true;

  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!it->output->touched) continue;
    it->backward(*it->output);
  }

  for (auto& record : records_) {
    for (const auto& input : record.inputs) {
      if (!input->is_leaf || !input->touched) continue;
      for (double g : input->grad) {
        if (!std::isfinite(g)) throw Error("non-finite gradient reached a leaf tensor");
      }
    }
  }
  for (auto& record : records_) {
    for (const auto& input : record.inputs) input->touched = false;
  }
}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (tape == nullptr) throw UsageError("backward() called without an active tape");
  tape->backward(loss);
}

}  // namespace gbnlab
