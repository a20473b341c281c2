// SPDX-License-Identifier: Apache-2.0

#include "vikdf/tensor.hpp"

#include <unordered_set>

namespace vikdf {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) {
    if (d < 0) throw DimensionError("negative extent in shape " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor Tensor::zeros(Shape s, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->data.assign(shape_numel(s), 0.0);
  n->shape = std::move(s);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape s, double v, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->data.assign(shape_numel(s), v);
  n->shape = std::move(s);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_vector(Shape s, std::vector<double> v, bool requires_grad) {
  if (shape_numel(s) != v.size())
    throw DimensionError("from_vector: shape " + shape_str(s) + " does not match " +
                         std::to_string(v.size()) + " values");
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(s);
  n->data.assign(v.begin(), v.end());
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_vector(Shape{}, std::vector<double>{v}, requires_grad);
}

std::int64_t Tensor::dim(int i) const {
  int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r)
    throw DimensionError("dim index " + std::to_string(i) + " out of range for " +
                         shape_str(node_->shape));
  return node_->shape[static_cast<std::size_t>(i)];
}

double Tensor::item() const {
  if (numel() != 1)
    throw DimensionError("item() requires a single-element tensor, got " + shape_str(node_->shape));
  return node_->data[0];
}

void Tensor::backward() {
  if (numel() != 1)
    throw DimensionError("backward() requires a scalar root, got " + shape_str(node_->shape));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS over the requires_grad subgraph.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  struct Frame {
    TensorNode* n;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({node_.get(), 0});
  visited.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      TensorNode* p = f.n->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop) {
      n->ensure_grad();
      n->backprop(*n);
    }
  }
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<TensorNode>();
  n->shape = node_->shape;
  n->data = node_->data;
  n->requires_grad = false;
  return Tensor(std::move(n));
}

BoolMask BoolMask::full(Shape s, bool value) {
  BoolMask m;
  m.v.assign(shape_numel(s), value ? 1 : 0);
  m.shape = std::move(s);
  return m;
}

}  // namespace vikdf
