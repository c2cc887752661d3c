#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stgrit/common.hpp"

namespace stgrit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

/// Scans a buffer and reports the first non-finite entry. Ops that can
/// overflow call this on their forward output; the tape calls it on gradient
/// buffers it touched. The guard pass is branchless: x*0 is ±0 for finite x
/// and NaN otherwise, so the accumulator stays zero iff the buffer is clean.
inline void check_finite(const char* op, const std::vector<double>& v, const char* what = "value") {
  double guard = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) guard += v[i] * 0.0;
  if (guard == 0.0) return;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      std::ostringstream os;
      os << op << ": non-finite " << what << " at flat index " << i;
      throw NumericsError(os.str());
    }
  }
  throw NumericsError(std::string(op) + ": non-finite " + what);
}

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;    // empty until gradient flows into it
  bool requires_grad = false;  // leaf marker set by the user
  bool needs_grad = false;     // requires_grad, or derived from such a tensor

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

/// Dense row-major tensor of doubles. Copying a Tensor copies a handle; the
/// underlying buffer is shared. Ops never mutate existing buffers, so shared
/// handles are safe; only the optimizer writes into leaf values in place,
/// outside any recorded computation.
class Tensor {
public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> value, bool requires_grad = false)
      : node_(std::make_shared<detail::TensorNode>()) {
    if (shape.empty()) throw ShapeError("Tensor: rank-0 shapes are not supported, use {1}");
    for (std::size_t d : shape)
      if (d == 0) throw ShapeError("Tensor: zero extent in shape " + shape_str(shape));
    if (shape_numel(shape) != value.size()) {
      throw ShapeError("Tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(value.size()) + " values");
    }
    check_finite("Tensor", value);
    node_->shape = std::move(shape);
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->needs_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape), 0.0);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, double fill, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape), fill);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  /// I.i.d. uniform values in [lo, hi).
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  /// Internal factory for op results. `checked` skips the finiteness scan:
  /// ops whose output provably stays finite for finite inputs (copies,
  /// selections, softmax) pass true; ops that can overflow scan first and
  /// attribute the error to themselves.
  static Tensor from_op(const char* op, Shape shape, std::vector<double> value, bool checked) {
    if (shape_numel(shape) != value.size())
      throw ShapeError(std::string(op) + ": internal shape/value mismatch");
    if (!checked) check_finite(op, value);
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(value);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return ensure().shape; }
  std::size_t ndim() const { return ensure().shape.size(); }
  std::size_t size() const { return ensure().value.size(); }
  std::size_t extent(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw ShapeError("Tensor::extent: axis out of range");
    return s[axis];
  }

  const std::vector<double>& value() const { return ensure().value; }
  /// Mutable leaf access for optimizers. Must not be used on tensors that
  /// participate in a live tape.
  std::vector<double>& mutable_value() { return ensure().value; }

  bool has_grad() const { return defined() && !node_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (!has_grad()) throw ContractError("Tensor::grad: no gradient present");
    return node_->grad;
  }
  /// Mutable gradient access for optimizers (scaling, clipping).
  std::vector<double>& mutable_grad() {
    if (!has_grad()) throw ContractError("Tensor::mutable_grad: no gradient present");
    return node_->grad;
  }
  void zero_grad() {
    if (defined()) node_->grad.clear();
  }

  bool requires_grad() const { return defined() && node_->requires_grad; }
  bool needs_grad() const { return defined() && node_->needs_grad; }

  double item() const {
    if (size() != 1) throw ShapeError("Tensor::item: tensor is not scalar");
    return value()[0];
  }

  /// Element access by multi-index (tests and small-scale plumbing only).
  double at(std::initializer_list<std::size_t> idx) const {
    const auto& s = shape();
    if (idx.size() != s.size()) throw ShapeError("Tensor::at: rank mismatch");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= s[axis]) throw ShapeError("Tensor::at: index out of range");
      flat = flat * s[axis] + i;
      ++axis;
    }
    return value()[flat];
  }

  std::shared_ptr<detail::TensorNode> node() const { return node_; }

private:
  detail::TensorNode& ensure() const {
    if (!node_) throw ContractError("Tensor: undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::TensorNode> node_;
};

/// Records each differentiable operation in execution order; replaying the
/// backward rules in reverse accumulates gradients into every tensor that
/// needs one. One tape per training step; not shared across threads.
class Tape {
public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const char* op, std::vector<std::shared_ptr<detail::TensorNode>> inputs,
              std::shared_ptr<detail::TensorNode> output, BackwardFn fn) {
    output->needs_grad = true;
    records_.push_back({op, std::move(inputs), std::move(output), std::move(fn)});
  }

  std::size_t num_records() const { return records_.size(); }

  /// Reverse-topological gradient accumulation from a scalar loss. A second
  /// call on the same tape is an error; build a fresh tape per step instead.
  void backward(const Tensor& loss) {
    if (backward_done_) throw ContractError("Tape::backward: already called on this tape");
    if (records_.empty()) throw ContractError("Tape::backward: tape is empty");
    if (loss.size() != 1) {
      throw ContractError("Tape::backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    backward_done_ = true;
    auto loss_node = loss.node();
    loss_node->ensure_grad();
    loss_node->grad[0] = 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->output->grad.empty()) continue;  // no gradient flowed into this value
      it->fn();
      for (const auto& in : it->inputs) {
        if (in->needs_grad && !in->grad.empty()) {
          check_finite(it->op, in->grad, "gradient");
        }
      }
    }
  }

  static Tape* active() { return active_tape(); }

  /// RAII activation; ops record onto the innermost active tape.
  class Scope {
  public:
    explicit Scope(Tape& tape) : previous_(active_tape()) { active_tape() = &tape; }
    ~Scope() { active_tape() = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

  private:
    Tape* previous_;
  };

private:
  struct Record {
    const char* op;
    std::vector<std::shared_ptr<detail::TensorNode>> inputs;
    std::shared_ptr<detail::TensorNode> output;
    BackwardFn fn;
  };

  static Tape*& active_tape() {
    thread_local Tape* active = nullptr;
    return active;
  }

  std::vector<Record> records_;
  bool backward_done_ = false;
};

}  // namespace stgrit
