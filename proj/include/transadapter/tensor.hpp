#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace transadapter {

using Shape = std::vector<std::size_t>;

/// Incompatible extents between operands.
class DimensionError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Caller violated an operation precondition.
class ContractError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

/// Non-finite or out-of-domain numeric value.
class NumericError : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

/// Malformed or corrupted file contents.
class FormatError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape &shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i)
      out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

inline std::size_t shape_numel(const Shape &shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad; // empty when absent
  bool requires_grad = false;
  std::optional<std::size_t> tape_id;

  void ensure_grad() {
    if (grad.empty())
      grad.assign(data.size(), 0.0);
  }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

/// Shared handle to a dense row-major f64 array that can take part in
/// reverse-mode differentiation. Copies alias the same storage.
class Tensor {
public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl>()) {
    for (auto extent : shape)
      if (extent == 0)
        throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != data.size())
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " elements");
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    set_requires_grad(requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor from_impl(ImplPtr impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape &shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  std::vector<double> &values() { return impl_->data; }
  const std::vector<double> &values() const { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor &set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (on)
      impl_->ensure_grad();
    else
      impl_->grad.clear();
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<double> grad() { return impl_->grad; }
  std::span<const double> grad() const { return impl_->grad; }

  void zero_grad() {
    if (impl_->requires_grad)
      std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  double item() const {
    if (numel() != 1)
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  double operator[](std::size_t i) const { return impl_->data[i]; }

  double at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank())
      throw DimensionError("index rank mismatch for shape " + shape_str(shape()));
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
      if (i >= impl_->shape[axis])
        throw DimensionError("index out of range for shape " + shape_str(shape()));
      flat = flat * impl_->shape[axis] + i;
      ++axis;
    }
    return impl_->data[flat];
  }

  /// Independent copy of the values with no tape linkage.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(impl_->shape, impl_->data, requires_grad);
  }

  const ImplPtr &impl() const { return impl_; }

private:
  ImplPtr impl_;
};

/// Records differentiable operations in creation order. Backward replays
/// them in strict reverse order and then discards them.
class Tape {
public:
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  struct Node {
    std::string_view tag;
    std::vector<ImplPtr> inputs;
    ImplPtr output;
    BackwardFn backward;
  };

  static Tape &current() {
    thread_local Tape tape;
    return tape;
  }

  bool enabled() const { return enabled_; }
  void set_enabled(bool on) { enabled_ = on; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node> &nodes() const { return nodes_; }

  /// True when an op over `inputs` must be recorded.
  bool wants(std::initializer_list<const Tensor *> inputs) const {
    if (!enabled_)
      return false;
    for (const auto *t : inputs)
      if (t->requires_grad())
        return true;
    return false;
  }

  void record(std::string_view tag, std::vector<ImplPtr> inputs, Tensor &output, BackwardFn fn) {
    output.impl()->requires_grad = true;
    output.impl()->tape_id = nodes_.size();
    nodes_.push_back(Node{tag, std::move(inputs), output.impl(), std::move(fn)});
  }

  void backward(const Tensor &loss) {
    if (loss.numel() != 1)
      throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) {
      clear();
      return;
    }
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output->grad.empty())
        continue;
      for (auto &in : it->inputs)
        if (in->requires_grad)
          in->ensure_grad();
      it->backward(it->output->grad);
      // Intermediate gradients are dead once propagated; releasing them lets
      // the allocator recycle the buffers for the rest of the sweep.
      if (it->output != loss.impl())
        std::vector<double>().swap(it->output->grad);
    }
    clear();
  }

  void clear() {
    for (auto &node : nodes_)
      node.output->tape_id.reset();
    nodes_.clear();
  }

private:
  std::vector<Node> nodes_;
  bool enabled_ = true;
};

inline void backward(const Tensor &loss) { Tape::current().backward(loss); }

/// Disables recording on the current thread's tape for its lifetime.
class NoGradGuard {
public:
  NoGradGuard() : previous_(Tape::current().enabled()) { Tape::current().set_enabled(false); }
  ~NoGradGuard() { Tape::current().set_enabled(previous_); }
  NoGradGuard(const NoGradGuard &) = delete;
  NoGradGuard &operator=(const NoGradGuard &) = delete;

private:
  bool previous_;
};

} // namespace transadapter
