#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tabscope::nd {

using Shape = std::vector<std::size_t>;

// Fixed alignment keeps vectorized reductions in the same order on every run.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MaskingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when a primitive produces NaN/Inf; the message names the op.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool tracked = false;  // leaf with requires_grad, or produced by a recorded op

  std::span<T> ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Handle to a dense row-major array. Copies share storage; use clone() for a
/// deep copy.
template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value) { return from({1}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Only parameters are mutated in place (optimizer updates, initialization).
  std::span<T> mutable_data() { return node_->data; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool tracked() const { return node_->tracked; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();

  Tensor clone() const;
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Define-by-run record of primitive applications. Entries are appended in
/// execution order, so walking them backwards is a reverse topological order.
template <typename T>
class GradTape {
 public:
  using Backward = std::function<void()>;

  void record(std::shared_ptr<TensorNode<T>> output, Backward backward);
  // Seeds d(loss)/d(loss) = 1 and replays the tape; clears it afterwards.
  // Gradients accumulate into leaves, so several backward() calls sum.
  void backward(const Tensor<T>& loss);
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::shared_ptr<TensorNode<T>> output;
    Backward backward;
  };
  std::vector<Entry> entries_;
};

/// Makes a tape the recording target for the current thread while alive.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(GradTape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape<T>* previous_;
};

template <typename T>
GradTape<T>* active_tape();

}  // namespace tabscope::nd
