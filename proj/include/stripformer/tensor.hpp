// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stripformer/common.hpp"

namespace stripformer {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) { return join_ints(s); }

// Thread-local gauge of live tensor elements (data + allocated gradients).
// Attention blocks sample it to report peak activation footprint.
struct MemoryGauge {
  static int64_t& live() {
    thread_local int64_t v = 0;
    return v;
  }
  static int64_t& peak() {
    thread_local int64_t v = 0;
    return v;
  }
  static void add(int64_t n) {
    live() += n;
    if (live() > peak()) peak() = live();
  }
  static void remove(int64_t n) { live() -= n; }
  static void reset_peak() { peak() = live(); }
};

// Dense row-major N-d tensor. A Tensor is a cheap shared handle; the
// underlying buffer is written only while constructing a value, by gradient
// accumulation, or by the optimizer (single writer).
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor is float or double");

 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : n_(std::make_shared<Node>(std::move(shape))) {}

  Tensor(Shape shape, std::vector<T> values) : n_(std::make_shared<Node>(std::move(shape))) {
    if (static_cast<int64_t>(values.size()) != n_->numel) {
      throw ShapeError("tensor init: " + std::to_string(values.size()) + " values for shape " +
                       shape_str(n_->shape));
    }
    n_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.n_->data.begin(), t.n_->data.end(), value);
    return t;
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  static Tensor uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    fill_uniform<T>(t.data_mut(), rng, lo, hi);
    return t;
  }

  static Tensor trunc_normal(Shape shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    fill_trunc_normal<T>(t.data_mut(), rng, stddev);
    return t;
  }

  bool valid() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int64_t numel() const { return n_->numel; }
  int64_t extent(int axis) const { return n_->shape[static_cast<size_t>(axis)]; }

  // The handle is a shared reference; buffer mutation goes through the
  // handle regardless of its own constness (single-writer by contract).
  std::span<const T> data() const { return n_->data; }
  std::span<T> data_mut() const { return n_->data; }

  T item() const {
    if (numel() != 1) throw UsageError("item(): tensor has " + std::to_string(numel()) + " elements");
    return n_->data[0];
  }

  bool requires_grad() const { return n_ && n_->requires_grad; }
  const Tensor& set_requires_grad(bool v = true) const {
    n_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return n_ && !n_->grad.empty(); }

  std::span<const T> grad() const {
    if (!has_grad()) throw UsageError("grad(): no gradient accumulated");
    return n_->grad;
  }

  // Gradient buffer, allocated zero-filled on first use.
  std::span<T> grad_mut() const {
    if (n_->grad.empty()) {
      n_->grad.assign(static_cast<size_t>(n_->numel), T(0));
      MemoryGauge::add(n_->numel);
      n_->grad_counted = true;
    }
    return n_->grad;
  }

  void zero_grad() const {
    if (has_grad()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  Tensor grad_tensor() const {
    Tensor g(n_->shape);
    if (has_grad()) std::copy(n_->grad.begin(), n_->grad.end(), g.n_->data.begin());
    return g;
  }

  Tensor clone() const {
    Tensor c(n_->shape);
    std::copy(n_->data.begin(), n_->data.end(), c.n_->data.begin());
    return c;
  }

  bool same_node(const Tensor& other) const { return n_ == other.n_; }
  const void* node_id() const { return n_.get(); }

 private:
  struct Node {
    Shape shape;
    int64_t numel;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool grad_counted = false;

    explicit Node(Shape s) : shape(std::move(s)), numel(numel_of(shape)) {
      for (int64_t e : shape) {
        if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
      }
      data.assign(static_cast<size_t>(numel), T(0));
      MemoryGauge::add(numel);
    }
    ~Node() { MemoryGauge::remove(numel + (grad_counted ? numel : 0)); }
    Node(const Node&) = delete;
    Node& operator=(const Node&) = delete;
  };

  std::shared_ptr<Node> n_;
};

template <typename T>
void debug_check_finite(const Tensor<T>& t, const char* op) {
  if (!strict_finite_enabled()) return;
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw Error(std::string("non-finite value after op '") + op + "'");
  }
}

// Execution-ordered record of differentiable ops. Records are appended in
// forward order, which is a topological order by construction, so one
// reverse sweep propagates gradients to every reachable leaf. Gradients
// accumulate across backward() calls until the tensors are zeroed.
template <typename T>
class GradTape {
 public:
  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  int64_t size() const { return static_cast<int64_t>(records_.size()); }
  void clear() { records_.clear(); }

  void record(std::function<void()> backward_fn) { records_.push_back(std::move(backward_fn)); }

  void backward(Tensor<T> loss) {
    if (loss.numel() != 1) {
      throw UsageError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    loss.grad_mut()[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> records_;
};

template <typename T>
inline GradTape<T>*& active_tape_slot() {
  thread_local GradTape<T>* tape = nullptr;
  return tape;
}

template <typename T>
GradTape<T>* active_tape() {
  return active_tape_slot<T>();
}

// One tape, one thread of control: activate a tape for the current thread
// for the lifetime of the scope.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(GradTape<T>& tape) : prev_(active_tape_slot<T>()) { active_tape_slot<T>() = &tape; }
  ~TapeScope() { active_tape_slot<T>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape<T>* prev_;
};

}  // namespace stripformer
