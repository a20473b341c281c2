// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a node in an implicit tape. Operators
// record their inputs and a backprop closure on the output node; calling
// backward() on a scalar runs the closures in reverse topological order.
// Nodes whose requires_grad flag is false never receive gradient buffers,
// and constant subgraphs are never traversed.
//
// Tensors are treated as immutable once they are produced by an operator.
// Leaf data may be mutated in place between graph constructions (this is
// how the optimizer applies updates).

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace vikdf {

// Error taxonomy. `category()` is stable and machine-parsable.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& msg)
      : std::runtime_error(msg), category_(std::move(category)) {}
  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& m) : Error("dimension", m) {}
};
struct InputError : Error {
  explicit InputError(const std::string& m) : Error("input", m) {}
};
struct DegenerateMaskError : Error {
  explicit DegenerateMaskError(const std::string& m) : Error("degenerate-mask", m) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("numeric", m) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& m) : Error("contract", m) {}
};
struct ParseError : Error {
  explicit ParseError(const std::string& m) : Error("parse", m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};
struct VersionError : Error {
  explicit VersionError(const std::string& m) : Error("version", m) {}
};
struct IntegrityError : Error {
  explicit IntegrityError(const std::string& m) : Error("integrity", m) {}
};
struct TruncationError : Error {
  explicit TruncationError(const std::string& m) : Error("truncation", m) {}
};
struct UsageError : Error {
  explicit UsageError(const std::string& m) : Error("usage", m) {}
};

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Allocator whose default construction is a no-op, so resize() leaves new
// elements uninitialized. Operators allocate their output through this and
// then overwrite every element; explicit fills (assign, fill) still work.
template <class T>
class NoInitAllocator : public std::allocator<T> {
 public:
  using std::allocator<T>::allocator;
  template <class U>
  struct rebind {
    using other = NoInitAllocator<U>;
  };
  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

using DBuf = std::vector<double, NoInitAllocator<double>>;

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
  Shape shape;
  DBuf data;
  bool requires_grad = false;
  DBuf grad;  // allocated lazily during backward
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> backprop;

  std::size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(Shape s, bool requires_grad = false);
  static Tensor full(Shape s, double v, bool requires_grad = false);
  static Tensor from_vector(Shape s, std::vector<double> v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  // Extent of dimension i; negative i counts from the end.
  std::int64_t dim(int i) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  double* raw() { return node_->data.data(); }
  const double* raw() const { return node_->data.data(); }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  double* grad_raw() { return node_->grad.data(); }
  void zero_grad() { node_->grad.clear(); }

  // Reverse-mode sweep from a scalar root.
  void backward();

  // New constant leaf with a copy of this tensor's values.
  Tensor detach() const;

  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

// Boolean mask helper used by attention and the masked losses. Not a Tensor:
// masks are never differentiated.
struct BoolMask {
  Shape shape;
  std::vector<std::uint8_t> v;

  static BoolMask full(Shape s, bool value);
  std::size_t numel() const { return v.size(); }
  bool at(std::size_t i) const { return v[i] != 0; }
};

// Integer id matrix (token ids and similar). Row-major [rows, cols].
struct IdMatrix {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<std::int32_t> v;

  static IdMatrix zeros(std::int64_t r, std::int64_t c) {
    return IdMatrix{r, c, std::vector<std::int32_t>(static_cast<std::size_t>(r * c), 0)};
  }
  std::int32_t& at(std::int64_t r, std::int64_t c) { return v[static_cast<std::size_t>(r * cols + c)]; }
  std::int32_t at(std::int64_t r, std::int64_t c) const { return v[static_cast<std::size_t>(r * cols + c)]; }
};

}  // namespace vikdf
