#include "tabscope/nd/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace tabscope::nd {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return filled(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::filled(Shape shape, T value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->data.assign(numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  node->tracked = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_string(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data.assign(values.begin(), values.end());
  node->requires_grad = requires_grad;
  node->tracked = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ContractError("item(): tensor is not a scalar " + shape_string(shape()));
  return node_->data[0];
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto node = std::make_shared<Node>(*node_);
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), std::vector<T>(node_->data.begin(), node_->data.end()), false);
}

template <typename T>
void GradTape<T>::record(std::shared_ptr<TensorNode<T>> output, Backward backward) {
  entries_.push_back({std::move(output), std::move(backward)});
}

template <typename T>
void GradTape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward(): loss must be a scalar tensor");
  }
  if (!loss.tracked()) throw ContractError("backward(): loss is not reachable from the tape");
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not reachable from the loss
    it->backward();
  }
  entries_.clear();
}

namespace {
template <typename T>
thread_local GradTape<T>* g_active_tape = nullptr;
}  // namespace

template <typename T>
GradTape<T>* active_tape() {
  return g_active_tape<T>;
}

template <typename T>
TapeScope<T>::TapeScope(GradTape<T>& tape) : previous_(g_active_tape<T>) {
  g_active_tape<T> = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  g_active_tape<T> = previous_;
}

template class Tensor<float>;
template class Tensor<double>;
template class GradTape<float>;
template class GradTape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template GradTape<float>* active_tape<float>();
template GradTape<double>* active_tape<double>();

}  // namespace tabscope::nd
