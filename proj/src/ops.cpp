// SPDX-License-Identifier: Apache-2.0

#include "vikdf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "vikdf/kernels.hpp"

namespace vikdf::ops {
namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// Output buffers are uninitialized: every operator overwrites all elements
// (the masked softmaxes and mean_dim1 zero-fill explicitly first).
NodePtr fresh(Shape s) {
  auto n = std::make_shared<TensorNode>();
  n->data.resize(shape_numel(s));
  n->shape = std::move(s);
  return n;
}

bool any_rg(std::initializer_list<const Tensor*> ts) {
  for (auto* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// grad[i] += coeff for all i (broadcast scalar accumulate).
void accumulate_const(std::span<double> grad, double coeff) {
  for (auto& g : grad) g += coeff;
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  auto out = fresh(a.shape());
  kern::add(a.raw(), b.raw(), out->data.data(), out->numel());
  if (any_rg({&a, &b})) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    out->backprop = [pa = a.node(), pb = b.node()](TensorNode& n) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        kern::axpy(1.0, n.grad.data(), pa->grad.data(), n.numel());
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        kern::axpy(1.0, n.grad.data(), pb->grad.data(), n.numel());
      }
    };
  }
  return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  auto out = fresh(a.shape());
  kern::sub(a.raw(), b.raw(), out->data.data(), out->numel());
  if (any_rg({&a, &b})) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    out->backprop = [pa = a.node(), pb = b.node()](TensorNode& n) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        kern::axpy(1.0, n.grad.data(), pa->grad.data(), n.numel());
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        kern::axpy(-1.0, n.grad.data(), pb->grad.data(), n.numel());
      }
    };
  }
  return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  auto out = fresh(a.shape());
  kern::mul(a.raw(), b.raw(), out->data.data(), out->numel());
  if (any_rg({&a, &b})) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    out->backprop = [pa = a.node(), pb = b.node()](TensorNode& n) {
      std::size_t m = n.numel();
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          pa->grad[i] = std::fma(n.grad[i], pb->data[i], pa->grad[i]);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          pb->grad[i] = std::fma(n.grad[i], pa->data[i], pb->grad[i]);
      }
    };
  }
  return Tensor(out);
}

Tensor scale(const Tensor& x, double s) {
  auto out = fresh(x.shape());
  kern::scale(x.raw(), s, out->data.data(), out->numel());
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node(), s](TensorNode& n) {
      px->ensure_grad();
      kern::axpy(s, n.grad.data(), px->grad.data(), n.numel());
    };
  }
  return Tensor(out);
}

Tensor add_scalar(const Tensor& x, double c) {
  auto out = fresh(x.shape());
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = x.raw()[i] + c;
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node()](TensorNode& n) {
      px->ensure_grad();
      kern::axpy(1.0, n.grad.data(), px->grad.data(), n.numel());
    };
  }
  return Tensor(out);
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor exp_elem(const Tensor& x) {
  auto out = fresh(x.shape());
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = std::exp(x.raw()[i]);
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node()](TensorNode& n) {
      px->ensure_grad();
      for (std::size_t i = 0; i < n.numel(); ++i)
        px->grad[i] = std::fma(n.grad[i], n.data[i], px->grad[i]);
    };
  }
  return Tensor(out);
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw InputError("clamp: lo > hi");
  auto out = fresh(x.shape());
  for (std::size_t i = 0; i < out->numel(); ++i) {
    double v = x.raw()[i];
    out->data[i] = v < lo ? lo : (v > hi ? hi : v);
  }
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node(), lo, hi](TensorNode& n) {
      px->ensure_grad();
      for (std::size_t i = 0; i < n.numel(); ++i) {
        double v = px->data[i];
        if (v >= lo && v <= hi) px->grad[i] += n.grad[i];
      }
    };
  }
  return Tensor(out);
}

Tensor gelu(const Tensor& x) {
  auto out = fresh(x.shape());
  for (std::size_t i = 0; i < out->numel(); ++i) {
    double v = x.raw()[i];
    out->data[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node()](TensorNode& n) {
      px->ensure_grad();
      for (std::size_t i = 0; i < n.numel(); ++i) {
        double v = px->data[i];
        double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        px->grad[i] = std::fma(n.grad[i], cdf + v * pdf, px->grad[i]);
      }
    };
  }
  return Tensor(out);
}

Tensor mul_scalar_tensor(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("mul_scalar_tensor: scalar operand has " +
                                           std::to_string(s.numel()) + " elements");
  auto out = fresh(x.shape());
  kern::scale(x.raw(), s.raw()[0], out->data.data(), out->numel());
  if (any_rg({&x, &s})) {
    out->requires_grad = true;
    out->parents = {x.node(), s.node()};
    out->backprop = [px = x.node(), ps = s.node()](TensorNode& n) {
      if (px->requires_grad) {
        px->ensure_grad();
        kern::axpy(ps->data[0], n.grad.data(), px->grad.data(), n.numel());
      }
      if (ps->requires_grad) {
        ps->ensure_grad();
        ps->grad[0] += kern::dot(n.grad.data(), px->data.data(), n.numel());
      }
    };
  }
  return Tensor(out);
}

Tensor div_scalar_tensor(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("div_scalar_tensor: scalar operand has " +
                                           std::to_string(s.numel()) + " elements");
  double sv = s.raw()[0];
  if (sv == 0.0) throw NumericError("div_scalar_tensor: division by zero");
  auto out = fresh(x.shape());
  kern::scale(x.raw(), 1.0 / sv, out->data.data(), out->numel());
  if (any_rg({&x, &s})) {
    out->requires_grad = true;
    out->parents = {x.node(), s.node()};
    out->backprop = [px = x.node(), ps = s.node()](TensorNode& n) {
      double inv = 1.0 / ps->data[0];
      if (px->requires_grad) {
        px->ensure_grad();
        kern::axpy(inv, n.grad.data(), px->grad.data(), n.numel());
      }
      if (ps->requires_grad) {
        ps->ensure_grad();
        double gx = kern::dot(n.grad.data(), px->data.data(), n.numel());
        ps->grad[0] -= gx * inv * inv;
      }
    };
  }
  return Tensor(out);
}

// ---- shape -----------------------------------------------------------------

Tensor split_heads(const Tensor& x, std::int64_t heads) {
  if (x.rank() != 3) throw DimensionError("split_heads: expected rank 3, got " + shape_str(x.shape()));
  std::int64_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (heads <= 0 || D % heads != 0)
    throw DimensionError("split_heads: model dim " + std::to_string(D) + " not divisible by " +
                         std::to_string(heads) + " heads");
  std::int64_t dh = D / heads;
  auto out = fresh({B, heads, L, dh});
  const double* src = x.raw();
  double* dst = out->data.data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t l = 0; l < L; ++l)
      for (std::int64_t h = 0; h < heads; ++h)
        std::memcpy(dst + ((b * heads + h) * L + l) * dh, src + (b * L + l) * D + h * dh,
                    static_cast<std::size_t>(dh) * sizeof(double));
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node(), B, L, heads, dh, D](TensorNode& n) {
      px->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t l = 0; l < L; ++l)
          for (std::int64_t h = 0; h < heads; ++h)
            kern::axpy(1.0, n.grad.data() + ((b * heads + h) * L + l) * dh,
                       px->grad.data() + (b * L + l) * D + h * dh, static_cast<std::size_t>(dh));
    };
  }
  return Tensor(out);
}

Tensor merge_heads(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("merge_heads: expected rank 4, got " + shape_str(x.shape()));
  std::int64_t B = x.dim(0), H = x.dim(1), L = x.dim(2), dh = x.dim(3);
  std::int64_t D = H * dh;
  auto out = fresh({B, L, D});
  const double* src = x.raw();
  double* dst = out->data.data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t l = 0; l < L; ++l)
        std::memcpy(dst + (b * L + l) * D + h * dh, src + ((b * H + h) * L + l) * dh,
                    static_cast<std::size_t>(dh) * sizeof(double));
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node(), B, H, L, dh, D](TensorNode& n) {
      px->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t h = 0; h < H; ++h)
          for (std::int64_t l = 0; l < L; ++l)
            kern::axpy(1.0, n.grad.data() + (b * L + l) * D + h * dh,
                       px->grad.data() + ((b * H + h) * L + l) * dh, static_cast<std::size_t>(dh));
    };
  }
  return Tensor(out);
}

Tensor concat_dim1(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_dim1: no inputs");
  std::int64_t B = parts[0].dim(0), D = parts[0].dim(2), Ltot = 0;
  for (const auto& p : parts) {
    if (p.rank() != 3 || p.dim(0) != B || p.dim(2) != D)
      throw DimensionError("concat_dim1: incompatible part shape " + shape_str(p.shape()));
    Ltot += p.dim(1);
  }
  auto out = fresh({B, Ltot, D});
  double* dst = out->data.data();
  std::int64_t off = 0;
  bool rg = false;
  for (const auto& p : parts) {
    std::int64_t L = p.dim(1);
    for (std::int64_t b = 0; b < B; ++b)
      std::memcpy(dst + (b * Ltot + off) * D, p.raw() + b * L * D,
                  static_cast<std::size_t>(L * D) * sizeof(double));
    off += L;
    rg = rg || p.requires_grad();
  }
  if (rg) {
    out->requires_grad = true;
    std::vector<NodePtr> ps;
    for (const auto& p : parts) ps.push_back(p.node());
    out->parents = ps;
    out->backprop = [ps, B, Ltot, D](TensorNode& n) {
      std::int64_t off = 0;
      for (const auto& p : ps) {
        std::int64_t L = p->shape[1];
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::int64_t b = 0; b < B; ++b)
            kern::axpy(1.0, n.grad.data() + (b * Ltot + off) * D, p->grad.data() + b * L * D,
                       static_cast<std::size_t>(L * D));
        }
        off += L;
      }
    };
  }
  return Tensor(out);
}

Tensor slice_dim1(const Tensor& x, std::int64_t start, std::int64_t len) {
  if (x.rank() != 3) throw DimensionError("slice_dim1: expected rank 3, got " + shape_str(x.shape()));
  std::int64_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (start < 0 || len < 0 || start + len > L)
    throw DimensionError("slice_dim1: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of bounds for length " +
                         std::to_string(L));
  auto out = fresh({B, len, D});
  for (std::int64_t b = 0; b < B; ++b)
    std::memcpy(out->data.data() + b * len * D, x.raw() + (b * L + start) * D,
                static_cast<std::size_t>(len * D) * sizeof(double));
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node(), B, L, D, start, len](TensorNode& n) {
      px->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b)
        kern::axpy(1.0, n.grad.data() + b * len * D, px->grad.data() + (b * L + start) * D,
                   static_cast<std::size_t>(len * D));
    };
  }
  return Tensor(out);
}

Tensor broadcast_rows(const Tensor& x, std::int64_t batch) {
  if (x.rank() != 2) throw DimensionError("broadcast_rows: expected rank 2, got " + shape_str(x.shape()));
  if (batch <= 0) throw DimensionError("broadcast_rows: batch must be positive");
  std::int64_t n = x.dim(0), d = x.dim(1);
  auto out = fresh({batch, n, d});
  for (std::int64_t b = 0; b < batch; ++b)
    std::memcpy(out->data.data() + b * n * d, x.raw(), static_cast<std::size_t>(n * d) * sizeof(double));
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node(), batch, n, d](TensorNode& nn) {
      px->ensure_grad();
      for (std::int64_t b = 0; b < batch; ++b)
        kern::axpy(1.0, nn.grad.data() + b * n * d, px->grad.data(), static_cast<std::size_t>(n * d));
    };
  }
  return Tensor(out);
}

Tensor reshape(const Tensor& x, Shape s) {
  if (shape_numel(s) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(s));
  auto out = fresh(std::move(s));
  std::memcpy(out->data.data(), x.raw(), x.numel() * sizeof(double));
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node()](TensorNode& n) {
      px->ensure_grad();
      kern::axpy(1.0, n.grad.data(), px->grad.data(), n.numel());
    };
  }
  return Tensor(out);
}

Tensor transpose_12(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("transpose_12: expected rank 3, got " + shape_str(x.shape()));
  std::int64_t B = x.dim(0), M = x.dim(1), N = x.dim(2);
  auto out = fresh({B, N, M});
  const double* src = x.raw();
  double* dst = out->data.data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < M; ++i)
      for (std::int64_t j = 0; j < N; ++j) dst[(b * N + j) * M + i] = src[(b * M + i) * N + j];
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node(), B, M, N](TensorNode& n) {
      px->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < M; ++i)
          for (std::int64_t j = 0; j < N; ++j)
            px->grad[static_cast<std::size_t>((b * M + i) * N + j)] +=
                n.grad[static_cast<std::size_t>((b * N + j) * M + i)];
    };
  }
  return Tensor(out);
}

Tensor gather_rows(const Tensor& x, const IdMatrix& idx) {
  if (x.rank() != 3) throw DimensionError("gather_rows: expected rank 3, got " + shape_str(x.shape()));
  std::int64_t B = x.dim(0), L = x.dim(1), d = x.dim(2);
  if (idx.rows != B)
    throw DimensionError("gather_rows: index rows " + std::to_string(idx.rows) +
                         " do not match batch " + std::to_string(B));
  std::int64_t n = idx.cols;
  for (const auto id : idx.v)
    if (id < 0 || id >= L)
      throw InputError("gather_rows: row index " + std::to_string(id) + " outside [0," +
                       std::to_string(L) + ")");
  auto out = fresh({B, n, d});
  const double* src = x.raw();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t j = 0; j < n; ++j)
      std::copy_n(src + (b * L + idx.at(b, j)) * d, d, out->data.data() + (b * n + j) * d);
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node(), idx, B, n, d, L](TensorNode& nd) {
      px->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t j = 0; j < n; ++j) {
          double* dst = px->grad.data() + (b * L + idx.at(b, j)) * d;
          const double* g = nd.grad.data() + (b * n + j) * d;
          for (std::int64_t t = 0; t < d; ++t) dst[t] += g[t];
        }
    };
  }
  return Tensor(out);
}

// ---- linear algebra --------------------------------------------------------

namespace {

struct MatDims {
  std::int64_t batch;  // product of leading dims (1 when rank 2)
  std::int64_t m, k;
};

MatDims mat_dims(const Tensor& a) {
  if (a.rank() < 2) throw DimensionError("matmul: operand rank < 2: " + shape_str(a.shape()));
  std::int64_t m = a.dim(-2), k = a.dim(-1);
  std::int64_t batch = 1;
  for (int i = 0; i < a.rank() - 2; ++i) batch *= a.dim(i);
  return {batch, m, k};
}

Shape result_shape(const Tensor& a, std::int64_t m, std::int64_t n) {
  Shape s(a.shape().begin(), a.shape().end() - 2);
  s.push_back(m);
  s.push_back(n);
  return s;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  MatDims da = mat_dims(a);
  if (b.rank() == 2) {
    // Shared right operand: flatten all leading axes of a into rows.
    if (b.dim(0) != da.k)
      throw DimensionError("matmul: inner extents differ: " + shape_str(a.shape()) + " x " +
                           shape_str(b.shape()));
    std::int64_t R = da.batch * da.m, K = da.k, N = b.dim(1);
    auto out = fresh(result_shape(a, da.m, N));
    kern::gemm_nn(R, N, K, a.raw(), K, b.raw(), N, out->data.data(), N, false);
    if (any_rg({&a, &b})) {
      out->requires_grad = true;
      out->parents = {a.node(), b.node()};
      out->backprop = [pa = a.node(), pb = b.node(), R, K, N](TensorNode& n) {
        if (pa->requires_grad) {
          pa->ensure_grad();
          // dA += dC * B^T
          kern::gemm_nt(R, K, N, n.grad.data(), N, pb->data.data(), N, pa->grad.data(), K, true);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          // dB += A^T * dC
          kern::gemm_tn(K, N, R, pa->data.data(), K, n.grad.data(), N, pb->grad.data(), N, true);
        }
      };
    }
    return Tensor(out);
  }
  MatDims db = mat_dims(b);
  if (b.rank() != a.rank() || db.batch != da.batch || db.m != da.k ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  std::int64_t M = da.m, K = da.k, N = db.k, BT = da.batch;
  auto out = fresh(result_shape(a, M, N));
  for (std::int64_t t = 0; t < BT; ++t)
    kern::gemm_nn(M, N, K, a.raw() + t * M * K, K, b.raw() + t * K * N, N,
                  out->data.data() + t * M * N, N, false);
  if (any_rg({&a, &b})) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    out->backprop = [pa = a.node(), pb = b.node(), M, K, N, BT](TensorNode& n) {
      for (std::int64_t t = 0; t < BT; ++t) {
        const double* g = n.grad.data() + t * M * N;
        if (pa->requires_grad) {
          pa->ensure_grad();
          kern::gemm_nt(M, K, N, g, N, pb->data.data() + t * K * N, N,
                        pa->grad.data() + t * M * K, K, true);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          kern::gemm_tn(K, N, M, pa->data.data() + t * M * K, K, g, N,
                        pb->grad.data() + t * K * N, N, true);
        }
      }
    };
  }
  return Tensor(out);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  MatDims da = mat_dims(a);
  MatDims db = mat_dims(b);
  bool shared = b.rank() == 2 && a.rank() == 2;
  if (!shared) {
    if (db.batch != da.batch ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
      throw DimensionError("matmul_nt: incompatible batch dims " + shape_str(a.shape()) + " x " +
                           shape_str(b.shape()));
  }
  if (da.k != db.k)
    throw DimensionError("matmul_nt: trailing extents differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  std::int64_t M = da.m, K = da.k, N = db.m, BT = da.batch;
  auto out = fresh(result_shape(a, M, N));
  for (std::int64_t t = 0; t < BT; ++t)
    kern::gemm_nt(M, N, K, a.raw() + t * M * K, K, b.raw() + t * N * K, K,
                  out->data.data() + t * M * N, N, false);
  if (any_rg({&a, &b})) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    out->backprop = [pa = a.node(), pb = b.node(), M, K, N, BT](TensorNode& n) {
      for (std::int64_t t = 0; t < BT; ++t) {
        const double* g = n.grad.data() + t * M * N;
        if (pa->requires_grad) {
          pa->ensure_grad();
          // dA += dC * B  (dC: [M,N], B: [N,K])
          kern::gemm_nn(M, K, N, g, N, pb->data.data() + t * N * K, K,
                        pa->grad.data() + t * M * K, K, true);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          // dB += dC^T * A  (dB: [N,K])
          kern::gemm_tn(N, K, M, g, N, pa->data.data() + t * M * K, K,
                        pb->grad.data() + t * N * K, K, true);
        }
      }
    };
  }
  return Tensor(out);
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (b.rank() != 1 || x.rank() < 1 || x.dim(-1) != b.dim(0))
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match " +
                         shape_str(x.shape()));
  std::int64_t d = b.dim(0);
  std::int64_t rows = static_cast<std::int64_t>(x.numel()) / d;
  auto out = fresh(x.shape());
  for (std::int64_t r = 0; r < rows; ++r)
    kern::add(x.raw() + r * d, b.raw(), out->data.data() + r * d, static_cast<std::size_t>(d));
  if (any_rg({&x, &b})) {
    out->requires_grad = true;
    out->parents = {x.node(), b.node()};
    out->backprop = [px = x.node(), pb = b.node(), rows, d](TensorNode& n) {
      if (px->requires_grad) {
        px->ensure_grad();
        kern::axpy(1.0, n.grad.data(), px->grad.data(), n.numel());
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r)
          kern::axpy(1.0, n.grad.data() + r * d, pb->grad.data(), static_cast<std::size_t>(d));
      }
    };
  }
  return Tensor(out);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) throw DimensionError("linear: weight must be rank 2, got " + shape_str(w.shape()));
  if (x.rank() < 2 || x.dim(-1) != w.dim(0))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  if (b.rank() != 1 || b.dim(0) != w.dim(1))
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  std::int64_t K = w.dim(0), N = w.dim(1);
  std::int64_t R = static_cast<std::int64_t>(x.numel()) / K;
  Shape os(x.shape());
  os.back() = N;
  auto out = fresh(std::move(os));
  kern::gemm_nn(R, N, K, x.raw(), K, w.raw(), N, out->data.data(), N, false);
  for (std::int64_t r = 0; r < R; ++r)
    kern::add(out->data.data() + r * N, b.raw(), out->data.data() + r * N,
              static_cast<std::size_t>(N));
  if (any_rg({&x, &w, &b})) {
    out->requires_grad = true;
    out->parents = {x.node(), w.node(), b.node()};
    out->backprop = [px = x.node(), pw = w.node(), pb = b.node(), R, K, N](TensorNode& n) {
      if (px->requires_grad) {
        px->ensure_grad();
        kern::gemm_nt(R, K, N, n.grad.data(), N, pw->data.data(), N, px->grad.data(), K, true);
      }
      if (pw->requires_grad) {
        pw->ensure_grad();
        kern::gemm_tn(K, N, R, px->data.data(), K, n.grad.data(), N, pw->grad.data(), N, true);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::int64_t r = 0; r < R; ++r)
          kern::axpy(1.0, n.grad.data() + r * N, pb->grad.data(), static_cast<std::size_t>(N));
      }
    };
  }
  return Tensor(out);
}

// ---- normalization and attention -------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm: scalar input");
  std::int64_t d = x.dim(-1);
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
    throw DimensionError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
  std::int64_t rows = static_cast<std::int64_t>(x.numel()) / d;
  auto out = fresh(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  std::vector<double> t(static_cast<std::size_t>(d));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.raw() + r * d;
    double m = kern::sum(xr, static_cast<std::size_t>(d)) / static_cast<double>(d);
    for (std::int64_t i = 0; i < d; ++i) t[static_cast<std::size_t>(i)] = xr[i] - m;
    double var = kern::dot(t.data(), t.data(), static_cast<std::size_t>(d)) / static_cast<double>(d);
    double iv = 1.0 / std::sqrt(var + eps);
    (*inv)[static_cast<std::size_t>(r)] = iv;
    double* xh = xhat->data() + r * d;
    double* o = out->data.data() + r * d;
    for (std::int64_t i = 0; i < d; ++i) {
      double h = t[static_cast<std::size_t>(i)] * iv;
      xh[i] = h;
      o[i] = std::fma(gain.raw()[i], h, bias.raw()[i]);
    }
  }
  if (any_rg({&x, &gain, &bias})) {
    out->requires_grad = true;
    out->parents = {x.node(), gain.node(), bias.node()};
    out->backprop = [px = x.node(), pg = gain.node(), pb = bias.node(), xhat, inv, rows, d](TensorNode& n) {
      std::vector<double> gg(static_cast<std::size_t>(d));
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* g = n.grad.data() + r * d;
        const double* xh = xhat->data() + r * d;
        if (pg->requires_grad) {
          pg->ensure_grad();
          for (std::int64_t i = 0; i < d; ++i)
            pg->grad[static_cast<std::size_t>(i)] = std::fma(g[i], xh[i], pg->grad[static_cast<std::size_t>(i)]);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          kern::axpy(1.0, g, pb->grad.data(), static_cast<std::size_t>(d));
        }
        if (px->requires_grad) {
          px->ensure_grad();
          for (std::int64_t i = 0; i < d; ++i) gg[static_cast<std::size_t>(i)] = g[i] * pg->data[static_cast<std::size_t>(i)];
          double mg = kern::sum(gg.data(), static_cast<std::size_t>(d)) / static_cast<double>(d);
          double mgx = kern::dot(gg.data(), xh, static_cast<std::size_t>(d)) / static_cast<double>(d);
          double iv = (*inv)[static_cast<std::size_t>(r)];
          double* gx = px->grad.data() + r * d;
          for (std::int64_t i = 0; i < d; ++i)
            gx[i] += iv * (gg[static_cast<std::size_t>(i)] - mg - xh[i] * mgx);
        }
      }
    };
  }
  return Tensor(out);
}

namespace {

// Shared softmax backward: dx = y * (g - sum(g*y)) per row.
void softmax_backward_rows(TensorNode& n, TensorNode* px, std::int64_t rows, std::int64_t cols) {
  px->ensure_grad();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* y = n.data.data() + r * cols;
    const double* g = n.grad.data() + r * cols;
    double dotgy = kern::dot(g, y, static_cast<std::size_t>(cols));
    double* gx = px->grad.data() + r * cols;
    for (std::int64_t j = 0; j < cols; ++j) gx[j] = std::fma(y[j], g[j] - dotgy, gx[j]);
  }
}

}  // namespace

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() < 1) throw DimensionError("softmax: scalar input");
  std::int64_t cols = x.dim(-1);
  std::int64_t rows = static_cast<std::int64_t>(x.numel()) / cols;
  auto out = fresh(x.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.raw() + r * cols;
    double* o = out->data.data() + r * cols;
    double m = kern::max(xr, static_cast<std::size_t>(cols));
    for (std::int64_t j = 0; j < cols; ++j) o[j] = std::exp(xr[j] - m);
    double s = kern::sum(o, static_cast<std::size_t>(cols));
    kern::scale(o, 1.0 / s, o, static_cast<std::size_t>(cols));
  }
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node(), rows, cols](TensorNode& n) {
      softmax_backward_rows(n, px.get(), rows, cols);
    };
  }
  return Tensor(out);
}

Tensor masked_softmax(const Tensor& x, const BoolMask* key_mask, std::int64_t causal_offset,
                      bool allow_self) {
  if (x.rank() != 4) throw DimensionError("masked_softmax: expected [B,h,Lq,Lk], got " + shape_str(x.shape()));
  std::int64_t B = x.dim(0), H = x.dim(1), Lq = x.dim(2), Lk = x.dim(3);
  if (key_mask) {
    if (key_mask->shape != Shape{B, Lk})
      throw DimensionError("masked_softmax: key mask " + shape_str(key_mask->shape) +
                           " does not match keys [" + std::to_string(B) + "," + std::to_string(Lk) + "]");
  }
  auto out = fresh(x.shape());
  // Masked-out weights must be exactly zero.
  std::fill(out->data.begin(), out->data.end(), 0.0);
  for (std::int64_t b = 0; b < B; ++b) {
    const std::uint8_t* km = key_mask ? key_mask->v.data() + b * Lk : nullptr;
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t q = 0; q < Lq; ++q) {
        const double* xr = x.raw() + ((b * H + h) * Lq + q) * Lk;
        double* o = out->data.data() + ((b * H + h) * Lq + q) * Lk;
        std::int64_t kmaxex = causal_offset >= 0 ? std::min(Lk, q + causal_offset + 1) : Lk;
        double m = -1e308;
        bool any = false;
        for (std::int64_t k = 0; k < kmaxex; ++k) {
          if (km && !km[k]) continue;
          any = true;
          if (xr[k] > m) m = xr[k];
        }
        std::int64_t self = causal_offset >= 0 ? q + causal_offset : -1;
        if (!any && allow_self && self >= 0 && self < Lk) {
          // A position whose own key is masked may still attend to itself.
          o[self] = 1.0;
          continue;
        }
        if (!any)
          throw DegenerateMaskError("masked_softmax: no admissible key for batch " +
                                    std::to_string(b) + " query " + std::to_string(q));
        double s = 0.0;
        for (std::int64_t k = 0; k < kmaxex; ++k) {
          if (km && !km[k]) continue;
          double e = std::exp(xr[k] - m);
          o[k] = e;
          s += e;
        }
        double invs = 1.0 / s;
        for (std::int64_t k = 0; k < kmaxex; ++k)
          if (!km || km[k]) o[k] *= invs;
      }
  }
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    std::int64_t rows = B * H * Lq;
    out->backprop = [px = x.node(), rows, Lk](TensorNode& n) {
      softmax_backward_rows(n, px.get(), rows, Lk);
    };
  }
  return Tensor(out);
}

Tensor masked_softmax_full(const Tensor& x, const BoolMask& mask) {
  if (x.rank() != 4) throw DimensionError("masked_softmax_full: expected [B,h,Lq,Lk], got " + shape_str(x.shape()));
  std::int64_t B = x.dim(0), H = x.dim(1), Lq = x.dim(2), Lk = x.dim(3);
  if (mask.shape != Shape{B, Lq, Lk})
    throw DimensionError("masked_softmax_full: mask " + shape_str(mask.shape) +
                         " does not match scores " + shape_str(x.shape()));
  auto out = fresh(x.shape());
  // Masked-out weights must be exactly zero.
  std::fill(out->data.begin(), out->data.end(), 0.0);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t q = 0; q < Lq; ++q) {
        const std::uint8_t* mr = mask.v.data() + (b * Lq + q) * Lk;
        const double* xr = x.raw() + ((b * H + h) * Lq + q) * Lk;
        double* o = out->data.data() + ((b * H + h) * Lq + q) * Lk;
        double m = -1e308;
        bool any = false;
        for (std::int64_t k = 0; k < Lk; ++k)
          if (mr[k]) {
            any = true;
            if (xr[k] > m) m = xr[k];
          }
        if (!any)
          throw DegenerateMaskError("masked_softmax_full: all keys masked for batch " +
                                    std::to_string(b) + " query " + std::to_string(q));
        double s = 0.0;
        for (std::int64_t k = 0; k < Lk; ++k)
          if (mr[k]) {
            double e = std::exp(xr[k] - m);
            o[k] = e;
            s += e;
          }
        double invs = 1.0 / s;
        for (std::int64_t k = 0; k < Lk; ++k)
          if (mr[k]) o[k] *= invs;
      }
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node(), rows = B * H * Lq, Lk](TensorNode& n) {
      softmax_backward_rows(n, px.get(), rows, Lk);
    };
  }
  return Tensor(out);
}

namespace {

void check_attention_inputs(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 4 || k.rank() != 4 || v.rank() != 4)
    throw DimensionError("attention: q/k/v must be rank 4");
  if (q.dim(0) != k.dim(0) || q.dim(1) != k.dim(1) || q.dim(3) != k.dim(3))
    throw DimensionError("attention: q " + shape_str(q.shape()) + " incompatible with k " +
                         shape_str(k.shape()));
  if (k.shape() != v.shape() && !(k.dim(0) == v.dim(0) && k.dim(1) == v.dim(1) && k.dim(2) == v.dim(2)))
    throw DimensionError("attention: k " + shape_str(k.shape()) + " incompatible with v " +
                         shape_str(v.shape()));
}

}  // namespace

Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    const BoolMask* mask) {
  check_attention_inputs(q, k, v);
  double inv = 1.0 / std::sqrt(static_cast<double>(q.dim(3)));
  Tensor s = scale(matmul_nt(q, k), inv);
  Tensor w = mask ? masked_softmax_full(s, *mask) : softmax_lastdim(s);
  return matmul(w, v);
}

Tensor attention_masked(const Tensor& q, const Tensor& k, const Tensor& v,
                        const BoolMask* key_mask, std::int64_t causal_offset, bool allow_self) {
  check_attention_inputs(q, k, v);
  double inv = 1.0 / std::sqrt(static_cast<double>(q.dim(3)));
  Tensor s = scale(matmul_nt(q, k), inv);
  Tensor w = masked_softmax(s, key_mask, causal_offset, allow_self);
  return matmul(w, v);
}

// ---- embeddings and reductions ---------------------------------------------

Tensor embedding(const Tensor& table, const IdMatrix& ids) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be rank 2");
  std::int64_t V = table.dim(0), d = table.dim(1);
  auto out = fresh({ids.rows, ids.cols, d});
  for (std::int64_t r = 0; r < ids.rows; ++r)
    for (std::int64_t c = 0; c < ids.cols; ++c) {
      std::int32_t id = ids.at(r, c);
      if (id < 0 || id >= V)
        throw InputError("embedding: id " + std::to_string(id) + " out of range [0, " +
                         std::to_string(V) + ")");
      std::memcpy(out->data.data() + (r * ids.cols + c) * d, table.raw() + id * d,
                  static_cast<std::size_t>(d) * sizeof(double));
    }
  if (table.requires_grad()) {
    out->requires_grad = true;
    out->parents = {table.node()};
    out->backprop = [pt = table.node(), ids, d](TensorNode& n) {
      pt->ensure_grad();
      for (std::int64_t r = 0; r < ids.rows; ++r)
        for (std::int64_t c = 0; c < ids.cols; ++c)
          kern::axpy(1.0, n.grad.data() + (r * ids.cols + c) * d,
                     pt->grad.data() + ids.at(r, c) * d, static_cast<std::size_t>(d));
    };
  }
  return Tensor(out);
}

Tensor sum_all(const Tensor& x) {
  auto out = fresh(Shape{});
  out->data[0] = kern::sum(x.raw(), x.numel());
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node()](TensorNode& n) {
      px->ensure_grad();
      accumulate_const(px->grad, n.grad[0]);
    };
  }
  return Tensor(out);
}

Tensor mean_all(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean_all: empty tensor");
  double invn = 1.0 / static_cast<double>(x.numel());
  auto out = fresh(Shape{});
  out->data[0] = kern::sum(x.raw(), x.numel()) * invn;
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node(), invn](TensorNode& n) {
      px->ensure_grad();
      accumulate_const(px->grad, n.grad[0] * invn);
    };
  }
  return Tensor(out);
}

Tensor mean_dim1(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("mean_dim1: expected rank 3, got " + shape_str(x.shape()));
  std::int64_t B = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (n == 0) throw DimensionError("mean_dim1: empty middle axis");
  double invn = 1.0 / static_cast<double>(n);
  auto out = fresh({B, d});
  std::fill(out->data.begin(), out->data.end(), 0.0);  // accumulated below
  for (std::int64_t b = 0; b < B; ++b) {
    double* o = out->data.data() + b * d;
    for (std::int64_t i = 0; i < n; ++i)
      kern::axpy(invn, x.raw() + (b * n + i) * d, o, static_cast<std::size_t>(d));
  }
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node(), B, n, d, invn](TensorNode& nn) {
      px->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < n; ++i)
          kern::axpy(invn, nn.grad.data() + b * d, px->grad.data() + (b * n + i) * d,
                     static_cast<std::size_t>(d));
    };
  }
  return Tensor(out);
}

Tensor l2_normalize_lastdim(const Tensor& x, double min_norm) {
  if (x.rank() < 1) throw DimensionError("l2_normalize: scalar input");
  std::int64_t d = x.dim(-1);
  std::int64_t rows = static_cast<std::int64_t>(x.numel()) / d;
  auto out = fresh(x.shape());
  auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.raw() + r * d;
    double nrm = std::sqrt(kern::dot(xr, xr, static_cast<std::size_t>(d)));
    if (!(nrm > min_norm))
      throw NumericError("l2_normalize: zero-norm row " + std::to_string(r));
    (*norms)[static_cast<std::size_t>(r)] = nrm;
    kern::scale(xr, 1.0 / nrm, out->data.data() + r * d, static_cast<std::size_t>(d));
  }
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node(), norms, rows, d](TensorNode& n) {
      px->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* y = n.data.data() + r * d;
        const double* g = n.grad.data() + r * d;
        double gy = kern::dot(g, y, static_cast<std::size_t>(d));
        double inv = 1.0 / (*norms)[static_cast<std::size_t>(r)];
        double* gx = px->grad.data() + r * d;
        for (std::int64_t i = 0; i < d; ++i) gx[i] += inv * (g[i] - y[i] * gy);
      }
    };
  }
  return Tensor(out);
}

// ---- image layout ----------------------------------------------------------

namespace {

struct ShuffleDims {
  std::int64_t B, C, H, W;  // dims of the r^2-packed side
  bool batched;
};

ShuffleDims shuffle_dims(const Tensor& x, std::int64_t r, bool packed_side) {
  if (r <= 0) throw DimensionError("pixel_shuffle: r must be positive");
  ShuffleDims d{};
  if (x.rank() == 4) {
    d = {x.dim(0), x.dim(1), x.dim(2), x.dim(3), true};
  } else if (x.rank() == 3) {
    d = {1, x.dim(0), x.dim(1), x.dim(2), false};
  } else {
    throw DimensionError("pixel_shuffle: expected rank 3 or 4, got " + shape_str(x.shape()));
  }
  if (packed_side && d.C % (r * r) != 0)
    throw DimensionError("pixel_shuffle: channels " + std::to_string(d.C) +
                         " not divisible by r^2 = " + std::to_string(r * r));
  if (!packed_side && (d.H % r != 0 || d.W % r != 0))
    throw DimensionError("pixel_unshuffle: spatial dims " + std::to_string(d.H) + "x" +
                         std::to_string(d.W) + " not divisible by r = " + std::to_string(r));
  return d;
}

}  // namespace

Tensor pixel_shuffle(const Tensor& x, std::int64_t r) {
  ShuffleDims dd = shuffle_dims(x, r, true);
  std::int64_t C = dd.C / (r * r), H = dd.H, W = dd.W;
  Shape os = dd.batched ? Shape{dd.B, C, H * r, W * r} : Shape{C, H * r, W * r};
  auto out = fresh(os);
  std::int64_t HW = H * W, OH = H * r, OW = W * r;
  for (std::int64_t b = 0; b < dd.B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t dy = 0; dy < r; ++dy)
        for (std::int64_t dx = 0; dx < r; ++dx) {
          const double* src = x.raw() + ((b * dd.C) + (c * r * r + dy * r + dx)) * HW;
          for (std::int64_t h = 0; h < H; ++h) {
            double* dst = out->data.data() + ((b * C + c) * OH + (h * r + dy)) * OW + dx;
            for (std::int64_t w = 0; w < W; ++w) dst[w * r] = src[h * W + w];
          }
        }
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node(), dd, C, H, W, r, HW, OH, OW](TensorNode& n) {
      px->ensure_grad();
      for (std::int64_t b = 0; b < dd.B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t dy = 0; dy < r; ++dy)
            for (std::int64_t dx = 0; dx < r; ++dx) {
              double* gsrc = px->grad.data() + ((b * dd.C) + (c * r * r + dy * r + dx)) * HW;
              for (std::int64_t h = 0; h < H; ++h) {
                const double* gdst = n.grad.data() + ((b * C + c) * OH + (h * r + dy)) * OW + dx;
                for (std::int64_t w = 0; w < W; ++w) gsrc[h * W + w] += gdst[w * r];
              }
            }
    };
  }
  return Tensor(out);
}

Tensor pixel_unshuffle(const Tensor& x, std::int64_t r) {
  ShuffleDims dd = shuffle_dims(x, r, false);
  std::int64_t C = dd.C, H = dd.H / r, W = dd.W / r;
  Shape os = dd.batched ? Shape{dd.B, C * r * r, H, W} : Shape{C * r * r, H, W};
  auto out = fresh(os);
  std::int64_t HW = H * W, IH = dd.H, IW = dd.W;
  for (std::int64_t b = 0; b < dd.B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t dy = 0; dy < r; ++dy)
        for (std::int64_t dx = 0; dx < r; ++dx) {
          double* dst = out->data.data() + (b * C * r * r + (c * r * r + dy * r + dx)) * HW;
          for (std::int64_t h = 0; h < H; ++h) {
            const double* src = x.raw() + ((b * C + c) * IH + (h * r + dy)) * IW + dx;
            for (std::int64_t w = 0; w < W; ++w) dst[h * W + w] = src[w * r];
          }
        }
  if (x.requires_grad()) {
    out->requires_grad = true;
    out->parents = {x.node()};
    out->backprop = [px = x.node(), dd, C, H, W, r, HW, IH, IW](TensorNode& n) {
      px->ensure_grad();
      for (std::int64_t b = 0; b < dd.B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t dy = 0; dy < r; ++dy)
            for (std::int64_t dx = 0; dx < r; ++dx) {
              const double* gdst = n.grad.data() + (b * C * r * r + (c * r * r + dy * r + dx)) * HW;
              for (std::int64_t h = 0; h < H; ++h) {
                double* gsrc = px->grad.data() + ((b * C + c) * IH + (h * r + dy)) * IW + dx;
                for (std::int64_t w = 0; w < W; ++w) gsrc[w * r] += gdst[h * W + w];
              }
            }
    };
  }
  return Tensor(out);
}

namespace {

struct ConvDims {
  std::int64_t B, Cin, H, W, Cout, kh, kw, OH, OW, ckk;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b, std::int64_t stride,
                   std::int64_t pad) {
  if (x.rank() != 4) throw DimensionError("conv2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
  if (w.rank() != 4) throw DimensionError("conv2d: weight must be [Cout,Cin,kh,kw], got " + shape_str(w.shape()));
  if (stride <= 0) throw DimensionError("conv2d: stride must be positive");
  if (pad < 0) throw DimensionError("conv2d: negative padding");
  ConvDims d{};
  d.B = x.dim(0);
  d.Cin = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.Cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  if (w.dim(1) != d.Cin)
    throw DimensionError("conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels, got " +
                         std::to_string(d.Cin));
  if (b.rank() != 1 || b.dim(0) != d.Cout)
    throw DimensionError("conv2d: bias must be [" + std::to_string(d.Cout) + "]");
  d.OH = (d.H + 2 * pad - d.kh) / stride + 1;
  d.OW = (d.W + 2 * pad - d.kw) / stride + 1;
  if (d.OH <= 0 || d.OW <= 0) throw DimensionError("conv2d: kernel larger than padded input");
  d.ckk = d.Cin * d.kh * d.kw;
  return d;
}

void im2col(const double* x, const ConvDims& d, std::int64_t stride, std::int64_t pad, double* col) {
  // col: [ckk, OH*OW]
  for (std::int64_t c = 0; c < d.Cin; ++c)
    for (std::int64_t ky = 0; ky < d.kh; ++ky)
      for (std::int64_t kx = 0; kx < d.kw; ++kx) {
        double* crow = col + ((c * d.kh + ky) * d.kw + kx) * (d.OH * d.OW);
        for (std::int64_t oy = 0; oy < d.OH; ++oy) {
          std::int64_t iy = oy * stride + ky - pad;
          for (std::int64_t ox = 0; ox < d.OW; ++ox) {
            std::int64_t ix = ox * stride + kx - pad;
            crow[oy * d.OW + ox] = (iy >= 0 && iy < d.H && ix >= 0 && ix < d.W)
                                       ? x[(c * d.H + iy) * d.W + ix]
                                       : 0.0;
          }
        }
      }
}

void col2im_accum(const double* col, const ConvDims& d, std::int64_t stride, std::int64_t pad,
                  double* gx) {
  for (std::int64_t c = 0; c < d.Cin; ++c)
    for (std::int64_t ky = 0; ky < d.kh; ++ky)
      for (std::int64_t kx = 0; kx < d.kw; ++kx) {
        const double* crow = col + ((c * d.kh + ky) * d.kw + kx) * (d.OH * d.OW);
        for (std::int64_t oy = 0; oy < d.OH; ++oy) {
          std::int64_t iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= d.H) continue;
          for (std::int64_t ox = 0; ox < d.OW; ++ox) {
            std::int64_t ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= d.W) continue;
            gx[(c * d.H + iy) * d.W + ix] += crow[oy * d.OW + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::int64_t stride,
              std::int64_t pad) {
  ConvDims d = conv_dims(x, w, b, stride, pad);
  auto out = fresh({d.B, d.Cout, d.OH, d.OW});
  std::vector<double> col(static_cast<std::size_t>(d.ckk * d.OH * d.OW));
  std::int64_t spatial = d.OH * d.OW;
  for (std::int64_t bi = 0; bi < d.B; ++bi) {
    im2col(x.raw() + bi * d.Cin * d.H * d.W, d, stride, pad, col.data());
    double* o = out->data.data() + bi * d.Cout * spatial;
    kern::gemm_nn(d.Cout, spatial, d.ckk, w.raw(), d.ckk, col.data(), spatial, o, spatial, false);
    for (std::int64_t c = 0; c < d.Cout; ++c) {
      double bias = b.raw()[c];
      double* oc = o + c * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) oc[i] += bias;
    }
  }
  if (any_rg({&x, &w, &b})) {
    out->requires_grad = true;
    out->parents = {x.node(), w.node(), b.node()};
    out->backprop = [px = x.node(), pw = w.node(), pb = b.node(), d, stride, pad,
                     spatial](TensorNode& n) {
      std::vector<double> col(static_cast<std::size_t>(d.ckk * spatial));
      std::vector<double> gcol(static_cast<std::size_t>(d.ckk * spatial));
      for (std::int64_t bi = 0; bi < d.B; ++bi) {
        const double* g = n.grad.data() + bi * d.Cout * spatial;
        if (pw->requires_grad || px->requires_grad)
          im2col(px->data.data() + bi * d.Cin * d.H * d.W, d, stride, pad, col.data());
        if (pw->requires_grad) {
          pw->ensure_grad();
          kern::gemm_nt(d.Cout, d.ckk, spatial, g, spatial, col.data(), spatial, pw->grad.data(),
                        d.ckk, true);
        }
        if (px->requires_grad) {
          px->ensure_grad();
          kern::gemm_tn(d.ckk, spatial, d.Cout, pw->data.data(), d.ckk, g, spatial, gcol.data(),
                        spatial, false);
          col2im_accum(gcol.data(), d, stride, pad, px->grad.data() + bi * d.Cin * d.H * d.W);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::int64_t c = 0; c < d.Cout; ++c)
            pb->grad[static_cast<std::size_t>(c)] +=
                kern::sum(g + c * spatial, static_cast<std::size_t>(spatial));
        }
      }
    };
  }
  return Tensor(out);
}

// ---- losses ----------------------------------------------------------------

namespace {

// Stable log-sum-exp of a strided sequence.
double lse_strided(const double* x, std::int64_t n, std::int64_t stride) {
  double m = x[0];
  for (std::int64_t i = 1; i < n; ++i)
    if (x[i * stride] > m) m = x[i * stride];
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += std::exp(x[i * stride] - m);
  return m + std::log(s);
}

}  // namespace

Tensor info_nce_sym(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(0) != logits.dim(1))
    throw DimensionError("info_nce_sym: expected square [N,N] logits, got " + shape_str(logits.shape()));
  std::int64_t N = logits.dim(0);
  const double* S = logits.raw();
  double loss = 0.0;
  for (std::int64_t i = 0; i < N; ++i) {
    double lr = lse_strided(S + i * N, N, 1);
    double lc = lse_strided(S + i, N, N);
    loss += (lr - S[i * N + i]) + (lc - S[i * N + i]);
  }
  auto out = fresh(Shape{});
  out->data[0] = loss;
  if (logits.requires_grad()) {
    out->requires_grad = true;
    out->parents = {logits.node()};
    out->backprop = [pl = logits.node(), N](TensorNode& n) {
      pl->ensure_grad();
      double g = n.grad[0];
      const double* S = pl->data.data();
      std::vector<double> p(static_cast<std::size_t>(N));
      for (std::int64_t i = 0; i < N; ++i) {
        // row softmax
        double m = kern::max(S + i * N, static_cast<std::size_t>(N));
        double s = 0.0;
        for (std::int64_t j = 0; j < N; ++j) {
          p[static_cast<std::size_t>(j)] = std::exp(S[i * N + j] - m);
          s += p[static_cast<std::size_t>(j)];
        }
        for (std::int64_t j = 0; j < N; ++j)
          pl->grad[static_cast<std::size_t>(i * N + j)] += g * p[static_cast<std::size_t>(j)] / s;
        // column softmax
        double mc = S[i];
        for (std::int64_t r = 1; r < N; ++r)
          if (S[r * N + i] > mc) mc = S[r * N + i];
        double sc = 0.0;
        for (std::int64_t r = 0; r < N; ++r) {
          p[static_cast<std::size_t>(r)] = std::exp(S[r * N + i] - mc);
          sc += p[static_cast<std::size_t>(r)];
        }
        for (std::int64_t r = 0; r < N; ++r)
          pl->grad[static_cast<std::size_t>(r * N + i)] += g * p[static_cast<std::size_t>(r)] / sc;
        pl->grad[static_cast<std::size_t>(i * N + i)] -= 2.0 * g;
      }
    };
  }
  return Tensor(out);
}

Tensor masked_mae(const Tensor& pred, const Tensor& target, const BoolMask& mask) {
  check_same_shape("masked_mae", pred, target);
  if (mask.shape != pred.shape())
    throw DimensionError("masked_mae: mask " + shape_str(mask.shape) + " does not match " +
                         shape_str(pred.shape()));
  std::size_t count = 0;
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i)
    if (mask.v[i]) {
      acc += std::abs(pred.raw()[i] - target.raw()[i]);
      ++count;
    }
  if (count == 0) throw DegenerateMaskError("masked_mae: mask selects no elements");
  auto out = fresh(Shape{});
  out->data[0] = acc / static_cast<double>(count);
  if (pred.requires_grad()) {
    out->requires_grad = true;
    out->parents = {pred.node()};
    // target participates as a constant reference signal
    out->backprop = [pp = pred.node(), pt = target.node(), mask, count](TensorNode& n) {
      pp->ensure_grad();
      double c = n.grad[0] / static_cast<double>(count);
      for (std::size_t i = 0; i < pp->data.size(); ++i)
        if (mask.v[i]) {
          double diff = pp->data[i] - pt->data[i];
          if (diff > 0)
            pp->grad[i] += c;
          else if (diff < 0)
            pp->grad[i] -= c;
        }
    };
  }
  return Tensor(out);
}

Tensor masked_cross_entropy(const Tensor& logits, const IdMatrix& targets, const BoolMask& mask) {
  if (logits.rank() != 3)
    throw DimensionError("masked_cross_entropy: logits must be [B,L,V], got " + shape_str(logits.shape()));
  std::int64_t B = logits.dim(0), L = logits.dim(1), V = logits.dim(2);
  if (targets.rows != B || targets.cols != L)
    throw DimensionError("masked_cross_entropy: targets [" + std::to_string(targets.rows) + "," +
                         std::to_string(targets.cols) + "] do not match logits " +
                         shape_str(logits.shape()));
  if (mask.shape != Shape{B, L})
    throw DimensionError("masked_cross_entropy: mask " + shape_str(mask.shape) +
                         " does not match [B,L]");
  std::int64_t count = 0;
  double acc = 0.0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t l = 0; l < L; ++l) {
      if (!mask.v[static_cast<std::size_t>(b * L + l)]) continue;
      std::int32_t t = targets.at(b, l);
      if (t < 0 || t >= V)
        throw InputError("masked_cross_entropy: target id " + std::to_string(t) +
                         " out of range [0, " + std::to_string(V) + ")");
      const double* row = logits.raw() + (b * L + l) * V;
      double m = kern::max(row, static_cast<std::size_t>(V));
      double s = 0.0;
      for (std::int64_t j = 0; j < V; ++j) s += std::exp(row[j] - m);
      acc += (m + std::log(s)) - row[t];
      ++count;
    }
  if (count == 0) throw DegenerateMaskError("masked_cross_entropy: mask selects no positions");
  auto out = fresh(Shape{});
  out->data[0] = acc / static_cast<double>(count);
  if (logits.requires_grad()) {
    out->requires_grad = true;
    out->parents = {logits.node()};
    out->backprop = [pl = logits.node(), targets, mask, B, L, V, count](TensorNode& n) {
      pl->ensure_grad();
      double c = n.grad[0] / static_cast<double>(count);
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t l = 0; l < L; ++l) {
          if (!mask.v[static_cast<std::size_t>(b * L + l)]) continue;
          const double* row = pl->data.data() + (b * L + l) * V;
          double* grow = pl->grad.data() + (b * L + l) * V;
          double m = kern::max(row, static_cast<std::size_t>(V));
          double s = 0.0;
          for (std::int64_t j = 0; j < V; ++j) s += std::exp(row[j] - m);
          double invs = 1.0 / s;
          for (std::int64_t j = 0; j < V; ++j)
            grow[j] += c * std::exp(row[j] - m) * invs;
          grow[targets.at(b, l)] -= c;
        }
    };
  }
  return Tensor(out);
}

Tensor mse_mean(const Tensor& a, const Tensor& b) {
  check_same_shape("mse_mean", a, b);
  if (a.numel() == 0) throw DimensionError("mse_mean: empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    double d = a.raw()[i] - b.raw()[i];
    acc += d * d;
  }
  auto out = fresh(Shape{});
  double invn = 1.0 / static_cast<double>(a.numel());
  out->data[0] = acc * invn;
  if (any_rg({&a, &b})) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    out->backprop = [pa = a.node(), pb = b.node(), invn](TensorNode& n) {
      double c = 2.0 * n.grad[0] * invn;
      if (pa->requires_grad) pa->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (std::size_t i = 0; i < pa->data.size(); ++i) {
        double d = pa->data[i] - pb->data[i];
        if (pa->requires_grad) pa->grad[i] += c * d;
        if (pb->requires_grad) pb->grad[i] -= c * d;
      }
    };
  }
  return Tensor(out);
}

}  // namespace vikdf::ops
