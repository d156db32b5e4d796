#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gbnlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool is_leaf = true;
  bool touched = false;  // received gradient during the current backward pass

  void accumulate_grad(std::span<const double> g);
  std::span<double> ensure_grad();
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

/// Dense row-major array of doubles with an optional gradient record.
///
/// Tensor is a shared handle: copies alias the same storage, which is how
/// parameters are shared between a model and its optimizer. Use clone() for
/// an independent copy and detach() to cut a value out of the tape.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const {
    return node_ ? std::span<const double>(node_->data) : std::span<const double>();
  }
  std::span<double> mutable_data() {
    return node_ ? std::span<double>(node_->data) : std::span<double>();
  }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad();

  bool is_leaf() const;
  Tensor detach() const;
  Tensor clone() const;

  const detail::NodePtr& node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

/// Define-by-run record of differentiable operations.
///
/// Operations executed while a tape is active (see TapeScope) append a
/// record if any input requires a gradient. backward() replays the records
/// in reverse order; leaf gradients accumulate across calls, intermediate
/// gradients are reset at the start of each call.
class Tape {
 public:
  using BackwardFn = std::function<void(const detail::Node& output)>;

  struct Record {
    std::vector<detail::NodePtr> inputs;
    detail::NodePtr output;
    BackwardFn backward;
  };

  void record(std::vector<detail::NodePtr> inputs, detail::NodePtr output, BackwardFn backward);
  void backward(const Tensor& loss);
  void clear() { records_.clear(); }
  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }

  static Tape* active();

 private:
  friend class TapeScope;
  std::vector<Record> records_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording for the lifetime of the guard.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

/// Backpropagates a scalar loss recorded on the active tape.
void backward(const Tensor& loss);

}  // namespace gbnlab
