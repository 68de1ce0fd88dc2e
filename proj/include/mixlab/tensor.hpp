#pragma once

// Reverse-mode autodiff tensor. A Tensor is a cheap handle onto a shared
// Node; nodes record their parents and a backward closure when gradient
// recording is enabled and at least one input requires a gradient.
//
// Every node receives a monotonically increasing sequence number at
// creation, so insertion order is a topological order of the graph and
// backward() simply visits reachable nodes in descending sequence order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mixlab/errors.hpp"

namespace mixlab {

using Shape = std::vector<std::size_t>;

enum class Precision { train32, check64 };

template <class T>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "float or double only");
  return std::is_same_v<T, float> ? Precision::train32 : Precision::check64;
}

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline std::uint64_t next_sequence() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables graph recording for its lifetime (inference, optimiser updates,
// finite-difference probes).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::uint64_t sequence = detail::next_sequence();
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  T* grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad.data();
  }
  bool is_leaf() const { return !backward; }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    if (numel_of(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                           shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> data, bool requires_grad = false) {
    return Tensor(Shape{rows, cols}, std::move(data), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::size_t rows() const {
    expect_rank2("rows");
    return node_->shape[0];
  }
  std::size_t cols() const {
    expect_rank2("cols");
    return node_->shape[1];
  }

  std::span<const T> data() const { return node_->data; }
  // Mutation is reserved for leaves (parameters and probe inputs); interior
  // nodes are immutable once created.
  std::span<T> mutable_data() {
    if (!node_->is_leaf()) throw ContractError("mutable_data on a non-leaf tensor");
    return node_->data;
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }
  void clear_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) {
    if (!node_->is_leaf()) throw ContractError("requires_grad can only be set on leaves");
    node_->requires_grad = value;
  }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  T operator()(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  T operator[](std::size_t i) const { return node_->data[i]; }

  // Fresh leaf holding a copy of the values, disconnected from any graph.
  Tensor detach(bool requires_grad = false) const { return Tensor(shape(), node_->data, requires_grad); }

  std::uint64_t sequence() const { return node_->sequence; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape(), std::vector<U>(node_->data.begin(), node_->data.end()));
  }

 private:
  void expect_rank2(const char* what) const {
    if (rank() != 2) throw DimensionError(std::string(what) + "() needs a 2-D tensor, got " + shape_str(shape()));
  }

  std::shared_ptr<Node<T>> node_;
};

// Builds the result node of an operation. The backward closure is attached
// only when recording is enabled and some input needs a gradient.
template <class T, class Backward>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs, Backward&& bw) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward = std::forward<Backward>(bw);
  return out;
}

template <class T, class Backward>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs, Backward&& bw) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward = std::forward<Backward>(bw);
  return out;
}

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires a
// gradient. Interior gradients are recomputed on each call; leaf gradients
// are summed across calls until zero_grad().
template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " + (loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{loss.node().get()};
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(), [](const Node<T>* a, const Node<T>* b) { return a->sequence > b->sequence; });

  for (Node<T>* n : order)
    if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
  loss.node()->grad_buffer()[0] += T(1);
  for (Node<T>* n : order)
    if (!n->is_leaf()) n->backward(*n);
}

namespace detail {

template <class T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatrixRM<T>>;
template <class T>
using CMapRM = Eigen::Map<const MatrixRM<T>>;

template <class T>
CMapRM<T> view(const std::vector<T>& v, std::size_t r, std::size_t c) {
  return CMapRM<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <class T>
MapRM<T> view(std::vector<T>& v, std::size_t r, std::size_t c) {
  return MapRM<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <class T>
MapRM<T> view(T* p, std::size_t r, std::size_t c) {
  return MapRM<T>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <class T>
CMapRM<T> view(const T* p, std::size_t r, std::size_t c) {
  return CMapRM<T>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

}  // namespace detail

template <class T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace mixlab
