#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "spm/tensor.hpp"

namespace spm {

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// One recorded value in the computation graph. `backward` reads this node's
/// grad and accumulates into the grads of `parents`.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
  }

  /// Gradient buffer of parent i, or nullptr when that parent is a constant.
  Tensor* parent_grad(std::size_t i) {
    Node& p = *parents[i];
    return p.requires_grad ? &p.grad_buffer() : nullptr;
  }
  const Tensor& parent_value(std::size_t i) const { return parents[i]->value; }
};

/// Handle to a graph node. Copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  /// Records the result of a differentiable op. Throws NumericError when the
  /// value contains NaN or Inf.
  static Var from_op(const char* op, Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
    if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite value");
    Var out(std::move(value));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const Var& p : parents) any = any || p.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (Var& p : parents) out.node_->parents.push_back(std::move(p.node_));
    out.node_->backward = std::move(backward);
    return out;
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  explicit operator bool() const noexcept { return defined(); }

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  std::size_t size() const { return node_->value.size(); }

  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.fill(0.0);
  }

  Node* node() const { return node_.get(); }

 private:
  std::shared_ptr<Node> node_;
};

/// Reverse-mode sweep from a single-element root. Gradients accumulate into
/// every reachable node that requires them.
inline void backward(const Var& root) {
  if (!root.defined() || root.size() != 1) throw DimensionError("backward: root must hold exactly one element");
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

/// Named learnable tensors in insertion order.
class ParamStore {
 public:
  Var add(const std::string& name, Tensor init) {
    if (name.empty() || name.front() == '.' || name.back() == '.' || name.find("..") != std::string::npos) {
      throw ConfigError("invalid parameter name '" + name + "'");
    }
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    Var v(std::move(init), true);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, v);
    return v;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Var get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }

  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& [_, v] : entries_) n += v.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : entries_) v.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Var>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace spm
