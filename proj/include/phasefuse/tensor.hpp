#pragma once

// Minimal reverse-mode differentiation. A tensor is a shared handle to dense
// row-major storage; ops that see a grad-requiring input record a node holding
// their inputs and a hand-written backward rule. backward() orders the graph
// topologically from the loss, runs each rule once in reverse order, and
// releases the nodes (a graph is consumed by its first backward).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <vector>

#include "phasefuse/error.hpp"

namespace phasefuse {

using shape_t = std::vector<std::size_t>;

inline std::size_t shape_numel(const shape_t& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const shape_t& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

template <class T>
class tensor;

namespace detail {

/// 64-byte aligned allocation. Eigen's vectorized kernels peel loops by
/// address, so a fixed alignment keeps float results bit-reproducible.
template <class T>
struct aligned_allocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};
  aligned_allocator() = default;
  template <class U>
  aligned_allocator(const aligned_allocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }
  template <class U>
  bool operator==(const aligned_allocator<U>&) const noexcept { return true; }
};

}  // namespace detail

template <class T>
using aligned_vector = std::vector<T, detail::aligned_allocator<T>>;

namespace detail {

template <class T>
struct graph_node {
  std::vector<tensor<T>> inputs;
  std::function<void(std::span<const T> grad_out)> backward;
};

template <class T>
struct tensor_state {
  shape_t shape;
  aligned_vector<T> data;
  aligned_vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool consumed = false;
  std::shared_ptr<graph_node<T>> node;  // null for leaves
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

/// When set, piecewise-linear ops append one byte per element recording
/// which linear piece was taken (used by grad_check to detect kink crossings).
inline std::vector<std::uint8_t>*& branch_log() {
  thread_local std::vector<std::uint8_t>* log = nullptr;
  return log;
}

inline bool& finite_check_flag() {
#ifdef NDEBUG
  thread_local bool enabled = false;
#else
  thread_local bool enabled = true;
#endif
  return enabled;
}

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class no_grad_guard {
 public:
  no_grad_guard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~no_grad_guard() { detail::grad_mode_flag() = prev_; }
  no_grad_guard(const no_grad_guard&) = delete;
  no_grad_guard& operator=(const no_grad_guard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Per-op NaN/Inf checks; on by default in debug builds.
inline void set_finite_checks(bool on) { detail::finite_check_flag() = on; }

template <class T>
class tensor {
 public:
  using value_type = T;

  tensor() = default;

  explicit tensor(shape_t shape, T fill = T{0}, bool requires_grad = false)
      : st_(std::make_shared<detail::tensor_state<T>>()) {
    for (std::size_t e : shape) detail::require(e > 0, "tensor: extents must be positive, got " + shape_str(shape));
    st_->data.assign(shape_numel(shape), fill);
    st_->shape = std::move(shape);
    st_->requires_grad = requires_grad;
  }

  tensor(shape_t shape, std::vector<T> data, bool requires_grad = false)
      : st_(std::make_shared<detail::tensor_state<T>>()) {
    for (std::size_t e : shape) detail::require(e > 0, "tensor: extents must be positive, got " + shape_str(shape));
    detail::require(data.size() == shape_numel(shape), "tensor: data length " + std::to_string(data.size()) +
                                                           " does not match shape " + shape_str(shape));
    st_->shape = std::move(shape);
    st_->data.assign(data.begin(), data.end());
    st_->requires_grad = requires_grad;
  }

  tensor(shape_t shape, aligned_vector<T> data, bool requires_grad = false)
      : st_(std::make_shared<detail::tensor_state<T>>()) {
    for (std::size_t e : shape) detail::require(e > 0, "tensor: extents must be positive, got " + shape_str(shape));
    detail::require(data.size() == shape_numel(shape), "tensor: data length " + std::to_string(data.size()) +
                                                           " does not match shape " + shape_str(shape));
    st_->shape = std::move(shape);
    st_->data = std::move(data);
    st_->requires_grad = requires_grad;
  }

  bool defined() const { return st_ != nullptr; }
  const shape_t& shape() const { return st_->shape; }
  std::size_t dim(std::size_t i) const { return st_->shape.at(i); }
  std::size_t ndim() const { return st_->shape.size(); }
  std::size_t numel() const { return st_->data.size(); }

  std::span<T> data() { return st_->data; }
  std::span<const T> data() const { return st_->data; }
  T item() const {
    detail::require(numel() == 1, "item() on non-scalar tensor " + shape_str(shape()));
    return st_->data[0];
  }

  bool requires_grad() const { return st_->requires_grad; }
  void set_requires_grad(bool on) const { st_->requires_grad = on; }
  bool is_leaf() const { return st_->node == nullptr; }

  /// Gradient accumulator; zero-filled on first access. Tensors are handles,
  /// so this is available through const references.
  std::span<T> grad() const {
    if (st_->grad.empty()) st_->grad.assign(st_->data.size(), T{0});
    return st_->grad;
  }
  bool has_grad() const { return !st_->grad.empty(); }
  void zero_grad() const { st_->grad.clear(); }

  /// Detached deep copy.
  tensor clone(bool requires_grad = false) const { return tensor(shape(), st_->data, requires_grad); }

  bool same_as(const tensor& o) const { return st_ == o.st_; }

  detail::tensor_state<T>* state() const { return st_.get(); }

 private:
  std::shared_ptr<detail::tensor_state<T>> st_;
};

using tensorf = tensor<float>;
using tensord = tensor<double>;

template <class To, class From>
tensor<To> tensor_cast(const tensor<From>& t, bool requires_grad = false) {
  std::vector<To> d(t.numel());
  std::transform(t.data().begin(), t.data().end(), d.begin(), [](From v) { return static_cast<To>(v); });
  return tensor<To>(t.shape(), std::move(d), requires_grad);
}

namespace detail {

/// Wires `out` into the graph when recording is on and some input needs grads.
template <class T>
tensor<T> record(tensor<T> out, std::type_identity_t<std::vector<tensor<T>>> inputs,
                 std::type_identity_t<std::function<void(std::span<const T> grad_out)>> backward) {
  if (finite_check_flag())
    for (T v : out.data())
      if (!std::isfinite(v)) fail("non-finite value produced by op with output " + shape_str(out.shape()));
  if (!grad_mode_flag()) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const tensor<T>& t) { return t.requires_grad(); });
  if (!any) return out;
  for (const auto& in : inputs)
    require(!in.state()->consumed, "op input belongs to a graph already consumed by backward()");
  auto node = std::make_shared<graph_node<T>>();
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.state()->node = std::move(node);
  out.set_requires_grad(true);
  return out;
}

/// Adds src into t.grad() when t takes gradients.
template <class T>
void accumulate(const tensor<T>& t, std::span<const T> src) {
  if (!t.requires_grad()) return;
  auto g = t.grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

}  // namespace detail

/// Accumulates d(loss)/d(leaf) into every grad-requiring leaf reachable from
/// `loss`, then releases the graph.
template <class T>
void backward(tensor<T>& loss) {
  detail::require(loss.numel() == 1, "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  detail::require(!loss.state()->consumed, "backward: graph already consumed (double backward)");
  detail::require(loss.requires_grad(), "backward: loss does not depend on any grad-requiring tensor");

  // Iterative post-order DFS over interior states.
  std::vector<detail::tensor_state<T>*> order;
  std::vector<tensor<T>> keep;  // holds interior states alive during the sweep
  std::unordered_set<detail::tensor_state<T>*> seen;
  struct frame {
    tensor<T> t;
    std::size_t next;
  };
  std::vector<frame> stack;
  stack.push_back({loss, 0});
  seen.insert(loss.state());
  while (!stack.empty()) {
    auto& f = stack.back();
    auto* node = f.t.state()->node.get();
    if (node && f.next < node->inputs.size()) {
      const tensor<T>& in = node->inputs[f.next++];
      if (in.state()->node && seen.insert(in.state()).second) stack.push_back({in, 0});
      continue;
    }
    if (node) {
      order.push_back(f.t.state());
      keep.push_back(f.t);
    }
    stack.pop_back();
  }

  loss.grad()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* st = *it;
    if (st->grad.empty()) st->grad.assign(st->data.size(), T{0});
    st->node->backward(std::span<const T>(st->grad));
    st->node.reset();
    st->consumed = true;
    if (st != loss.state()) aligned_vector<T>().swap(st->grad);
  }
}

/// Ordered name -> parameter map. Iteration follows insertion order, which
/// fixes checkpoint layout and optimizer state order.
template <class T>
class param_store {
 public:
  tensor<T>& add(const std::string& name, tensor<T> t) {
    detail::require(!index_.count(name), "param_store: duplicate parameter name '" + name + "'");
    t.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    detail::require(it != index_.end(), "param_store: no parameter named '" + name + "'");
    return entries_[it->second].second;
  }
  const tensor<T>& at(const std::string& name) const { return const_cast<param_store*>(this)->at(name); }

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  /// Deep copy, optionally converting the scalar type (e.g. a float64 shadow).
  template <class U = T>
  param_store<U> cast() const {
    param_store<U> out;
    for (const auto& [name, t] : entries_) out.add(name, tensor_cast<U>(t, true));
    return out;
  }

 private:
  std::vector<std::pair<std::string, tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace phasefuse
