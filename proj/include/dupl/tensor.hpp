#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dupl {

class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int> dims);
  explicit Shape(std::vector<int> dims);

  int rank() const { return static_cast<int>(dims_.size()); }
  int operator[](int axis) const { return dims_[static_cast<std::size_t>(axis)]; }
  std::size_t numel() const;
  const std::vector<int>& dims() const { return dims_; }
  std::string to_string() const;

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  std::vector<int> dims_;
};

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // sized like value iff requires_grad
  bool requires_grad = false;
};

// Reference-semantics handle to a dense row-major array. Copies alias the
// same storage; use clone() for an independent copy. Constness is shallow,
// as with shared_ptr.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, T fill, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<T> values,
                     bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return storage_->shape; }
  int dim(int axis) const { return storage_->shape[axis]; }
  std::size_t numel() const { return storage_->value.size(); }

  std::span<T> data() const { return storage_->value; }
  std::span<T> grad() const;

  bool requires_grad() const { return storage_->requires_grad; }
  void zero_grad() const;

  // Value of a one-element tensor.
  T item() const;

  // Independent copy of the values; never tracks gradients.
  Tensor clone() const;

  // Identity of the underlying storage, for aliasing checks.
  const void* id() const { return storage_.get(); }

 private:
  std::shared_ptr<TensorStorage<T>> storage_;
};

// Ordered record of executed ops. Each entry propagates adjoints from an
// op's output to its inputs; backward() replays them newest-first.
template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // When disabled, ops neither record nor produce grad-tracking outputs.
  void set_enabled(bool enabled) { enabled_ = enabled; }
  bool enabled() const { return enabled_; }

  void record(std::function<void()> backward_fn);
  std::size_t size() const { return tape_.size(); }

  // Seeds d(loss)/d(loss) = 1, accumulates (+=) into every grad-tracking
  // tensor reachable through the tape, then clears it. A second call
  // without new ops throws UsageError.
  void backward(Tensor<T>& loss);

 private:
  std::vector<std::function<void()>> tape_;
  bool enabled_ = true;
  bool consumed_ = false;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace dupl
