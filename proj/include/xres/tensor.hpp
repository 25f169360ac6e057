#pragma once

// Dense row-major tensor with a reverse-mode tape.
//
// A Tensor is a cheap handle onto shared storage. Ops that consume a tensor
// with requires_grad() record a backward closure on the thread's active
// Tape<T>; without an active tape they run forward only. backward() replays
// the tape in reverse and clears it.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "xres/errors.hpp"

namespace xres {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <class T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient arrives
  bool requires_grad = false;
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : s_(std::make_shared<TensorStorage<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0)) : s_(std::make_shared<TensorStorage<T>>()) {
    s_->data.assign(shape_numel(shape), fill);
    s_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) : s_(std::make_shared<TensorStorage<T>>()) {
    if (shape_numel(shape) != data.size())
      throw DimensionError("tensor shape " + shape_str(shape) + " does not match payload of " +
                           std::to_string(data.size()));
    s_->shape = std::move(shape);
    s_->data = std::move(data);
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->data.size(); }

  std::span<const T> data() const { return s_->data; }
  // Parameters are the only tensors mutated in place (optimizer, checkpoint load).
  std::span<T> mutable_data() { return s_->data; }

  std::span<const T> grad() const { return s_->grad; }
  std::span<T> mutable_grad() { return s_->grad; }
  bool has_grad() const { return !s_->grad.empty(); }
  void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), T(0)); }
  void clear_grad() { s_->grad.clear(); }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    s_->requires_grad = on;
    return *this;
  }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
  }
  T operator[](std::size_t i) const { return s_->data[i]; }

  // Deep copy, detached from any graph.
  Tensor clone() const { return Tensor(shape(), s_->data); }

  bool same_storage(const Tensor& o) const { return s_ == o.s_; }

  // Internal handle used by ops to capture storage in backward closures.
  const std::shared_ptr<TensorStorage<T>>& impl() const { return s_; }

 private:
  std::shared_ptr<TensorStorage<T>> s_;
};

// Ordered record of backward closures. Recording order is forward execution
// order, so every node's inputs were recorded before it.
template <class T>
class Tape {
 public:
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
  }

  static Tape*& active() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

 private:
  std::vector<std::function<void()>> nodes_;
};

// Installs a tape as the thread's active tape for the lifetime of the scope.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::active()) { Tape<T>::active() = &tape; }
  ~TapeScope() { Tape<T>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

// Suspends recording (forward-only evaluation, e.g. finite differences).
template <class T>
class NoGradScope {
 public:
  NoGradScope() : prev_(Tape<T>::active()) { Tape<T>::active() = nullptr; }
  ~NoGradScope() { Tape<T>::active() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* prev_;
};

namespace detail {

template <class T>
std::vector<T>& grad_buffer(TensorStorage<T>& s) {
  if (s.grad.empty()) s.grad.assign(s.data.size(), T(0));
  return s.grad;
}

template <class T, class... Ts>
bool any_requires_grad(const Tensor<T>& first, const Ts&... rest) {
  return (first.requires_grad() || ... || rest.requires_grad());
}

// Marks `out` as differentiable and records `fn` if any input needs a
// gradient and a tape is active. Returns true when recorded.
template <class T, class F, class... Ins>
bool record(Tensor<T>& out, F&& fn, const Ins&... inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr || !any_requires_grad(inputs...)) return false;
  out.set_requires_grad(true);
  // Leaves receive a (possibly zero) gradient buffer as soon as they are used.
  (void(inputs.requires_grad() ? (grad_buffer(*inputs.impl()), 0) : 0), ...);
  tape->record(std::forward<F>(fn));
  return true;
}

}  // namespace detail

// Seeds d(loss)/d(loss) = 1 and replays the active tape. The tape is cleared.
template <class T>
void backward(Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr || tape->empty())
    throw ContractError("backward() called with an empty or inactive tape");
  auto& g = detail::grad_buffer(*loss.impl());
  g[0] += T(1);
  tape->run_backward();
}

}  // namespace xres
