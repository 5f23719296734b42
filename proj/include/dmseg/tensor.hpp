#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dmseg/error.hpp"

namespace dmseg {

using index_t = std::int64_t;
using Shape = std::vector<index_t>;

inline index_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), index_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
struct TensorImpl;

// Backward closure of one recorded operation. It receives the gradient of the
// operation's output and accumulates into the gradients of `inputs`.
template <typename T>
struct GradFn {
  const char* name = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(const std::vector<T>&)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::shared_ptr<GradFn<T>> grad_fn;

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
    return grad;
  }
};

namespace detail {
inline thread_local bool grad_mode = true;
}

inline bool grad_enabled() { return detail::grad_mode; }

// Disables graph recording for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Dense row-major N-d array with optional reverse-mode gradient tracking.
// Copies share storage; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : impl_(std::make_shared<TensorImpl<T>>()) {}

  explicit Tensor(Shape shape, T fill = T{0}) : impl_(std::make_shared<TensorImpl<T>>()) {
    for (auto d : shape) {
      if (d <= 0) throw InvalidInput("tensor dims must be positive, got " + to_string(shape));
    }
    impl_->data.assign(static_cast<std::size_t>(dmseg::numel(shape)), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<TensorImpl<T>>()) {
    if (static_cast<index_t>(values.size()) != dmseg::numel(shape)) {
      throw InvalidInput("value count " + std::to_string(values.size()) + " does not match shape " +
                         to_string(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const { return impl_->shape; }
  index_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  index_t numel() const { return static_cast<index_t>(impl_->data.size()); }
  bool empty() const { return impl_->data.empty(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  std::vector<T>& values() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }
  T& operator[](index_t i) { return impl_->data[static_cast<std::size_t>(i)]; }
  const T& operator[](index_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }
  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return impl_->grad_fn == nullptr; }
  bool has_grad() const { return impl_->grad.size() == impl_->data.size() && !impl_->data.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> grad() { return impl_->grad; }
  void zero_grad() { impl_->grad.assign(impl_->data.size(), T{0}); }
  const GradFn<T>* grad_fn() const { return impl_->grad_fn.get(); }

  // Same values, cut from the graph.
  Tensor detach() const {
    Tensor out;
    out.impl_->shape = impl_->shape;
    out.impl_->data = impl_->data;
    return out;
  }
  Tensor clone() const { return detach(); }

  TensorImpl<T>* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl<T>>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

namespace detail {

// Creates the output tensor of an operation and, when any input is tracked,
// records `backward` so gradients reach the inputs.
template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* name,
                      std::initializer_list<const Tensor<T>*> inputs, Backward&& backward) {
  Tensor<T> out(std::move(shape), std::move(values));
  if (!dmseg::grad_enabled()) return out;
  bool tracked = false;
  for (const auto* in : inputs) tracked = tracked || in->requires_grad();
  if (!tracked) return out;
  auto fn = std::make_shared<GradFn<T>>();
  fn->name = name;
  for (const auto* in : inputs) fn->inputs.push_back(in->impl_ptr());
  fn->backward = std::forward<Backward>(backward);
  out.impl()->grad_fn = std::move(fn);
  out.impl()->requires_grad = true;
  return out;
}

template <typename T>
Tensor<T> make_result_multi(Shape shape, std::vector<T> values, const char* name,
                            const std::vector<Tensor<T>>& inputs,
                            std::function<void(const std::vector<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(values));
  if (!dmseg::grad_enabled()) return out;
  bool tracked = false;
  for (const auto& in : inputs) tracked = tracked || in.requires_grad();
  if (!tracked) return out;
  auto fn = std::make_shared<GradFn<T>>();
  fn->name = name;
  for (const auto& in : inputs) fn->inputs.push_back(in.impl_ptr());
  fn->backward = std::move(backward);
  out.impl()->grad_fn = std::move(fn);
  out.impl()->requires_grad = true;
  return out;
}

// Gradient buffer of an input if it participates in differentiation.
template <typename T>
std::vector<T>* grad_of(const std::shared_ptr<TensorImpl<T>>& impl) {
  return impl->requires_grad ? &impl->ensure_grad() : nullptr;
}

}  // namespace detail

// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
// intermediate gradients are recomputed from scratch on every call.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw UsageError("backward() needs a scalar, got " + to_string(loss.shape()));
  if (!loss.requires_grad()) {
    throw UsageError("backward() on a tensor that was not produced by recorded operations");
  }
  using Impl = TensorImpl<T>;
  std::vector<Impl*> order;
  std::unordered_set<Impl*> seen;
  std::vector<std::pair<Impl*, std::size_t>> stack;
  stack.emplace_back(loss.impl(), 0);
  seen.insert(loss.impl());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* fn = node->grad_fn.get();
    if (fn && next < fn->inputs.size()) {
      Impl* child = fn->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // Intermediate gradient buffers are created on first contribution; a node
  // that receives none has nothing to propagate.
  for (Impl* node : order) {
    if (node->grad_fn) std::vector<T>().swap(node->grad);
  }
  loss.impl()->ensure_grad()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* node = *it;
    if (!node->grad_fn) continue;
    if (node->grad.size() == node->data.size()) node->grad_fn->backward(node->grad);
    if (node != loss.impl()) std::vector<T>().swap(node->grad);
  }
}

}  // namespace dmseg
