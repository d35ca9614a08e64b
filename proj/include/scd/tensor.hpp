#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "scd/errors.hpp"

namespace scd {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

struct TensorData;

// One recorded operation. `backward` scatters the output gradient into the
// gradients of the parents it captured.
struct GraphNode {
  std::int64_t seq = 0;
  std::function<void()> backward;
  std::vector<std::shared_ptr<TensorData>> parents;
};

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated lazily; same length as values when present
  bool requires_grad = false;
  std::shared_ptr<GraphNode> node;  // null for leaves
  bool backward_done = false;       // only meaningful on a backward root

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};

namespace detail {
inline std::atomic<std::int64_t>& node_counter() {
  static std::atomic<std::int64_t> counter{0};
  return counter;
}
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// RAII guard disabling graph recording (inference / finite differences).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

// Shared handle to a dense float64 array with optional gradient slot.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorData> data) : data_(std::move(data)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return full(shape, 0.0, requires_grad);
  }

  static Tensor full(const Shape& shape, double value, bool requires_grad = false) {
    check_shape(shape);
    auto d = std::make_shared<TensorData>();
    d->shape = shape;
    d->values.assign(static_cast<std::size_t>(numel(shape)), value);
    d->requires_grad = requires_grad;
    if (requires_grad) d->ensure_grad();
    return Tensor(std::move(d));
  }

  static Tensor from_values(const Shape& shape, std::vector<double> values,
                            bool requires_grad = false) {
    check_shape(shape);
    if (static_cast<std::int64_t>(values.size()) != numel(shape))
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    auto d = std::make_shared<TensorData>();
    d->shape = shape;
    d->values = std::move(values);
    d->requires_grad = requires_grad;
    if (requires_grad) d->ensure_grad();
    return Tensor(std::move(d));
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from_values({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return data_->shape; }
  int ndim() const { return static_cast<int>(data_->shape.size()); }
  std::int64_t dim(int i) const { return data_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_->values.size()); }

  std::vector<double>& values() { return data_->values; }
  const std::vector<double>& values() const { return data_->values; }
  double* ptr() { return data_->values.data(); }
  const double* ptr() const { return data_->values.data(); }

  double item() const {
    if (size() != 1) throw ShapeError("item() requires a single-element tensor");
    return data_->values[0];
  }

  bool requires_grad() const { return data_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    data_->requires_grad = flag;
    if (flag) data_->ensure_grad();
    return *this;
  }

  std::vector<double>& grad() {
    data_->ensure_grad();
    return data_->grad;
  }
  const std::vector<double>& grad_view() const { return data_->grad; }
  void zero_grad() {
    data_->ensure_grad();
    std::fill(data_->grad.begin(), data_->grad.end(), 0.0);
  }

  std::shared_ptr<TensorData> data() const { return data_; }
  TensorData* raw() const { return data_.get(); }

  bool same_storage(const Tensor& other) const { return data_ == other.data_; }

  // Deep copy of the values; drops graph history and gradient.
  Tensor detached_copy() const {
    return Tensor::from_values(data_->shape, data_->values, false);
  }

 private:
  static void check_shape(const Shape& shape) {
    for (auto d : shape)
      if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
  }

  std::shared_ptr<TensorData> data_;
};

namespace detail {

// True when an op consuming `t` must be recorded.
inline bool track(const Tensor& t) {
  return grad_enabled() && (t.requires_grad() || t.raw()->node != nullptr);
}

inline void attach(Tensor& out, std::vector<Tensor> parents,
                   std::function<void()> backward) {
  auto node = std::make_shared<GraphNode>();
  node->seq = node_counter().fetch_add(1, std::memory_order_relaxed);
  node->backward = std::move(backward);
  node->parents.reserve(parents.size());
  for (auto& p : parents) node->parents.push_back(p.data());
  out.raw()->node = std::move(node);
}

}  // namespace detail

// Runs reverse-mode accumulation from a scalar loss. Every tensor reachable
// through the recorded graph receives its gradient; leaves keep whatever was
// already accumulated (call zero_grad between steps). Deterministic: nodes
// run in strictly decreasing creation order.
inline void backward(Tensor loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ShapeError("backward expects a scalar loss tensor");
  TensorData* root = loss.raw();
  if (root->backward_done)
    throw StateError("backward already ran on this record");
  root->backward_done = true;
  root->ensure_grad();
  root->grad[0] += 1.0;
  if (!root->node) return;

  // Collect reachable nodes.
  std::vector<std::shared_ptr<GraphNode>> nodes;
  std::vector<GraphNode*> stack{root->node.get()};
  std::unordered_set<const GraphNode*> seen;
  auto mark = [&](GraphNode* n) { return seen.insert(n).second; };
  nodes.push_back(root->node);
  mark(root->node.get());
  while (!stack.empty()) {
    GraphNode* n = stack.back();
    stack.pop_back();
    for (auto& parent : n->parents) {
      if (parent->node && mark(parent->node.get())) {
        nodes.push_back(parent->node);
        stack.push_back(parent->node.get());
      }
    }
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const auto& a, const auto& b) { return a->seq > b->seq; });
  for (auto& n : nodes) n->backward();
}

}  // namespace scd
