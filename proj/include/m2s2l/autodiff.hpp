// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

// Tape-free reverse-mode autodiff over whole-tensor operations.
//
// Every op returns a Var that owns its value and, when any input requires a
// gradient, a backward closure plus references to its parents. Calling
// backward() on a scalar Var topologically orders the reachable graph and
// runs the closures in reverse. Graphs are rebuilt on every forward pass and
// freed when the last Var referencing them goes away.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "m2s2l/tensor.hpp"

namespace m2s2l {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && !value.empty(); }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return Var(std::move(n));
  }
  static Var leaf(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const& { return node_->value; }
  Tensor<T> value() const&& { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  // Gradient accumulated by backward(); zeros if this node never received one.
  Tensor<T> grad() const {
    if (node_->has_grad()) return node_->grad;
    return Tensor<T>(node_->value.shape());
  }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds a graph node. When no parent requires a gradient the result is a
// plain constant and the closure is dropped.
template <typename T>
Var<T> make_op(Tensor<T> value, const std::vector<Var<T>>& parents,
               std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward = std::move(backward);
  }
  return Var<T>(std::move(n));
}

// Parent i's gradient buffer if it takes part in differentiation, else null.
template <typename T>
Tensor<T>* parent_grad(Node<T>& self, std::size_t i) {
  auto& p = self.parents[i];
  return p->requires_grad ? &p->grad_buffer() : nullptr;
}

template <typename T>
void backward(const Var<T>& root) {
  require(root.size() == 1, "backward: root must be a scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->has_grad()) n->backward(*n);
  }
}

using ParamId = std::size_t;

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

// Named, ordered collection of trainable tensors. Registration order is the
// canonical order used for checkpoints and gradient accumulation.
template <typename T>
class ParamStore {
 public:
  ParamId add(const std::string& name, Tensor<T> init) {
    require(!index_.contains(name), "ParamStore: duplicate parameter " + name);
    Parameter<T> p{name, std::move(init), {}};
    p.grad = Tensor<T>(p.value.shape());
    params_.push_back(std::move(p));
    index_.emplace(name, params_.size() - 1);
    return params_.size() - 1;
  }

  std::size_t count() const { return params_.size(); }
  Parameter<T>& operator[](ParamId id) { return params_[id]; }
  const Parameter<T>& operator[](ParamId id) const { return params_[id]; }
  Parameter<T>& get(const std::string& name) { return params_.at(id_of(name)); }
  const Parameter<T>& get(const std::string& name) const { return params_.at(id_of(name)); }
  bool contains(const std::string& name) const { return index_.contains(name); }
  ParamId id_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("ParamStore: unknown parameter " + name);
    return it->second;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(T(0));
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, ParamId> index_;
};

// One forward pass over a parameter store. Parameters are materialized as
// leaves on first use; after backward() the leaf gradients are folded back
// into the store in registration order.
template <typename T>
class Session {
 public:
  Session(const ParamStore<T>& store, bool track_grad)
      : store_(store), track_grad_(track_grad), leaves_(store.count()) {}

  const Var<T>& param(ParamId id) {
    auto& v = leaves_.at(id);
    if (!v.defined()) {
      v = track_grad_ ? Var<T>::leaf(store_[id].value) : Var<T>::constant(store_[id].value);
    }
    return v;
  }

  bool track_grad() const { return track_grad_; }

  void accumulate_grads(ParamStore<T>& into, T scale = T(1)) const {
    for (ParamId id = 0; id < leaves_.size(); ++id) {
      const auto& v = leaves_[id];
      if (!v.defined() || !v.node()->has_grad()) continue;
      auto& g = into[id].grad;
      const auto& src = v.node()->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * src[i];
    }
  }

 private:
  const ParamStore<T>& store_;
  bool track_grad_;
  std::vector<Var<T>> leaves_;
};

}  // namespace m2s2l
