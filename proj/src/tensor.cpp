#include "dupl/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <utility>

#include "dupl/error.hpp"

namespace dupl {

Shape::Shape(std::initializer_list<int> dims) : dims_(dims) {
  for (int d : dims_) {
    if (d < 0) throw ConfigError("negative extent in shape");
  }
}

Shape::Shape(std::vector<int> dims) : dims_(std::move(dims)) {
  for (int d : dims_) {
    if (d < 0) throw ConfigError("negative extent in shape");
  }
}

std::size_t Shape::numel() const {
  std::size_t n = 1;
  for (int d : dims_) n *= static_cast<std::size_t>(d);
  return n;
}

std::string Shape::to_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims_.size(); ++i) {
    if (i) os << 'x';
    os << dims_[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T fill, bool requires_grad) {
  return from(shape, std::vector<T>(shape.numel(), fill), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(const Shape& shape, std::vector<T> values,
                          bool requires_grad) {
  if (values.size() != shape.numel()) {
    throw ConfigError("value count " + std::to_string(values.size()) +
                      " does not match shape " + shape.to_string());
  }
  Tensor t;
  t.storage_ = std::make_shared<TensorStorage<T>>();
  t.storage_->shape = shape;
  t.storage_->value = std::move(values);
  t.storage_->requires_grad = requires_grad;
  if (requires_grad) t.storage_->grad.assign(shape.numel(), T(0));
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from(Shape{}, {value}, requires_grad);
}

template <typename T>
std::span<T> Tensor<T>::grad() const {
  if (!storage_->requires_grad) throw UsageError("tensor does not track grad");
  return storage_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() const {
  std::fill(storage_->grad.begin(), storage_->grad.end(), T(0));
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw UsageError("item() on tensor of shape " + shape().to_string());
  }
  return storage_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return from(shape(), storage_->value, false);
}

template <typename T>
void Graph<T>::record(std::function<void()> backward_fn) {
  tape_.push_back(std::move(backward_fn));
  consumed_ = false;
}

template <typename T>
void Graph<T>::backward(Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " +
                     loss.shape().to_string());
  }
  if (consumed_) throw UsageError("graph already consumed by backward()");
  consumed_ = true;
  if (!loss.requires_grad()) {
    tape_.clear();
    return;
  }
  loss.grad()[0] += T(1);
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  tape_.clear();
}

template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace dupl
