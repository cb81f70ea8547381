// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

// Differentiable tensor operations. Each op computes its forward value eagerly
// and registers a closure computing the vector-Jacobian product.

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "m2s2l/autodiff.hpp"
#include "m2s2l/tensor.hpp"

namespace m2s2l::ops {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

namespace detail {

inline void same_shape(const Shape& a, const Shape& b, const char* op) {
  require(a == b, std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
void axpy(Tensor<T>* dst, const Tensor<T>& src, T alpha = T(1)) {
  if (!dst) return;
  T* d = dst->data();
  const T* s = src.data();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += alpha * s[i];
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    detail::axpy(parent_grad(self, 0), self.grad);
    detail::axpy(parent_grad(self, 1), self.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    detail::axpy(parent_grad(self, 0), self.grad);
    detail::axpy(parent_grad(self, 1), self.grad, T(-1));
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* ga = parent_grad(self, 0))
      for (std::size_t i = 0; i < av.size(); ++i) (*ga)[i] += self.grad[i] * bv[i];
    if (auto* gb = parent_grad(self, 1))
      for (std::size_t i = 0; i < av.size(); ++i) (*gb)[i] += self.grad[i] * av[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v *= s;
  return make_op<T>(std::move(out), {a}, [s](Node<T>& self) {
    detail::axpy(parent_grad(self, 0), self.grad, s);
  });
}

// x (..., C) + b (C)
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& b) {
  const std::size_t c = x.value().cols();
  require(b.size() == c, "add_bias: bias length " + std::to_string(b.size()) + " != " +
                             std::to_string(c));
  Tensor<T> out = x.value();
  const std::size_t rows = out.rows();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] += b.value()[j];
  return make_op<T>(std::move(out), {x, b}, [rows, c](Node<T>& self) {
    detail::axpy(parent_grad(self, 0), self.grad);
    if (auto* gb = parent_grad(self, 1))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) (*gb)[j] += self.grad[r * c + j];
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v = v * detail::sigmoid(v);
  return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const T s = detail::sigmoid(xv[i]);
      (*g)[i] += self.grad[i] * (s * (T(1) + xv[i] * (T(1) - s)));
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v = detail::sigmoid(v);
  return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      const T s = self.value[i];
      (*g)[i] += self.grad[i] * s * (T(1) - s);
    }
  });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v = std::tanh(v);
  return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      const T t = self.value[i];
      (*g)[i] += self.grad[i] * (T(1) - t * t);
    }
  });
}

// ------------------------------------------------------------------ reductions

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().vec()) s += v;
  return make_op<T>(Tensor<T>({1}, s), {x}, [](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (auto& v : g->vec()) v += self.grad[0];
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  require(x.size() > 0, "mean_all: empty tensor");
  return scale(sum_all(x), T(1) / static_cast<T>(x.size()));
}

// mean((x)^2) over all elements
template <typename T>
Var<T> mean_square(const Var<T>& x) {
  const std::size_t n = x.size();
  require(n > 0, "mean_square: empty tensor");
  T s = 0;
  for (T v : x.value().vec()) s += v * v;
  return make_op<T>(Tensor<T>({1}, s / static_cast<T>(n)), {x}, [n](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    const auto& xv = self.parents[0]->value;
    const T k = T(2) * self.grad[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) (*g)[i] += k * xv[i];
  });
}

// mean(|x|); subgradient 0 at the kink.
template <typename T>
Var<T> mean_abs(const Var<T>& x) {
  const std::size_t n = x.size();
  require(n > 0, "mean_abs: empty tensor");
  T s = 0;
  for (T v : x.value().vec()) s += std::abs(v);
  return make_op<T>(Tensor<T>({1}, s / static_cast<T>(n)), {x}, [n](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    const auto& xv = self.parents[0]->value;
    const T k = self.grad[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) (*g)[i] += k * static_cast<T>((xv[i] > 0) - (xv[i] < 0));
  });
}

// x (..., C) -> (...): sum over the channel axis
template <typename T>
Var<T> sum_lastdim(const Var<T>& x) {
  const std::size_t c = x.value().cols(), rows = x.value().rows();
  Shape s = x.shape();
  s.pop_back();
  if (s.empty()) s = {1};
  Tensor<T> out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::size_t j = 0; j < c; ++j) acc += x.value()[r * c + j];
    out[r] = acc;
  }
  return make_op<T>(std::move(out), {x}, [rows, c](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) (*g)[r * c + j] += self.grad[r];
  });
}

// x (..., C) -> (C): mean over every leading axis
template <typename T>
Var<T> mean_rows(const Var<T>& x) {
  const std::size_t c = x.value().cols(), rows = x.value().rows();
  Tensor<T> out({c});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[j] += x.value()[r * c + j];
  const T inv = T(1) / static_cast<T>(rows);
  for (auto& v : out.vec()) v *= inv;
  return make_op<T>(std::move(out), {x}, [rows, c, inv](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) (*g)[r * c + j] += self.grad[j] * inv;
  });
}

// ---------------------------------------------------------------- linear maps

// x (..., K) . W (K x N) -> (..., N)
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w) {
  require(w.value().rank() == 2, "linear: weight must be 2-D");
  const std::size_t k = w.dim(0), n = w.dim(1);
  require(x.value().cols() == k, "linear: input width " + std::to_string(x.value().cols()) +
                                     " != weight rows " + std::to_string(k));
  const std::size_t m = x.value().rows();
  Shape s = x.shape();
  s.back() = n;
  Tensor<T> out(s);
  MapMat<T>(out.data(), m, n).noalias() =
      CMapMat<T>(x.value().data(), m, k) * CMapMat<T>(w.value().data(), k, n);
  return make_op<T>(std::move(out), {x, w}, [m, k, n](Node<T>& self) {
    CMapMat<T> gy(self.grad.data(), m, n);
    if (auto* gx = parent_grad(self, 0))
      MapMat<T>(gx->data(), m, k).noalias() +=
          gy * CMapMat<T>(self.parents[1]->value.data(), k, n).transpose();
    if (auto* gw = parent_grad(self, 1))
      MapMat<T>(gw->data(), k, n).noalias() +=
          CMapMat<T>(self.parents[0]->value.data(), m, k).transpose() * gy;
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return add_bias(linear(x, w), b);
}

// A (M x K) . B^T with B (N x K) -> (M x N)
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2, "matmul_nt: operands must be 2-D");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  require(b.dim(1) == k, "matmul_nt: inner dimension mismatch");
  Tensor<T> out({m, n});
  MapMat<T>(out.data(), m, n).noalias() =
      CMapMat<T>(a.value().data(), m, k) * CMapMat<T>(b.value().data(), n, k).transpose();
  return make_op<T>(std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    CMapMat<T> gy(self.grad.data(), m, n);
    if (auto* ga = parent_grad(self, 0))
      MapMat<T>(ga->data(), m, k).noalias() += gy * CMapMat<T>(self.parents[1]->value.data(), n, k);
    if (auto* gb = parent_grad(self, 1))
      MapMat<T>(gb->data(), n, k).noalias() +=
          gy.transpose() * CMapMat<T>(self.parents[0]->value.data(), m, k);
  });
}

// R (P x Q) constant . x (Q x ...) -> (P x ...), mixing along axis 0.
template <typename T>
Var<T> left_matmul_const(const Tensor<T>& r, const Var<T>& x) {
  require(r.rank() == 2 && x.value().rank() >= 1 && x.dim(0) == r.dim(1),
          "left_matmul_const: shape mismatch");
  const std::size_t p = r.dim(0), q = r.dim(1), rest = x.size() / q;
  Shape s = x.shape();
  s[0] = p;
  Tensor<T> out(s);
  MapMat<T>(out.data(), p, rest).noalias() =
      CMapMat<T>(r.data(), p, q) * CMapMat<T>(x.value().data(), q, rest);
  return make_op<T>(std::move(out), {x}, [r, p, q, rest](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    MapMat<T>(g->data(), q, rest).noalias() +=
        CMapMat<T>(r.data(), p, q).transpose() * CMapMat<T>(self.grad.data(), p, rest);
  });
}

// ------------------------------------------------------------- normalization

// Layer normalization over the channel axis with affine gamma/beta (C).
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const std::size_t c = x.value().cols(), rows = x.value().rows();
  require(gamma.size() == c && beta.size() == c, "layer_norm: affine size mismatch");
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.size()), rstd(rows);
  const T* xv = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += xv[r * c + j];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const T d = xv[r * c + j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (xv[r * c + j] - mean) * rstd[r];
      xhat[r * c + j] = h;
      out[r * c + j] = h * gamma.value()[j] + beta.value()[j];
    }
  }
  return make_op<T>(std::move(out), {x, gamma, beta},
                    [xhat = std::move(xhat), rstd = std::move(rstd), rows, c](Node<T>& self) {
                      const auto& gm = self.parents[1]->value;
                      const T* gy = self.grad.data();
                      if (auto* gg = parent_grad(self, 1))
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t j = 0; j < c; ++j)
                            (*gg)[j] += gy[r * c + j] * xhat[r * c + j];
                      if (auto* gb = parent_grad(self, 2))
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t j = 0; j < c; ++j) (*gb)[j] += gy[r * c + j];
                      if (auto* gx = parent_grad(self, 0)) {
                        const T inv_c = T(1) / static_cast<T>(c);
                        for (std::size_t r = 0; r < rows; ++r) {
                          T s1 = 0, s2 = 0;
                          for (std::size_t j = 0; j < c; ++j) {
                            const T gh = gy[r * c + j] * gm[j];
                            s1 += gh;
                            s2 += gh * xhat[r * c + j];
                          }
                          for (std::size_t j = 0; j < c; ++j) {
                            const T gh = gy[r * c + j] * gm[j];
                            (*gx)[r * c + j] +=
                                rstd[r] * (gh - inv_c * s1 - xhat[r * c + j] * inv_c * s2);
                          }
                        }
                      }
                    });
}

// Softmax over the channel axis.
template <typename T>
Var<T> softmax(const Var<T>& x) {
  const std::size_t c = x.value().cols(), rows = x.value().rows();
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().data() + r * c;
    T* yr = out.data() + r * c;
    const T mx = *std::max_element(xr, xr + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < c; ++j) yr[j] /= s;
  }
  return make_op<T>(std::move(out), {x}, [rows, c](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * c;
      const T* gy = self.grad.data() + r * c;
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) (*g)[r * c + j] += y[j] * (gy[j] - dot);
    }
  });
}

// Rows scaled to unit L2 norm: x / sqrt(|x|^2 + eps).
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-12)) {
  const std::size_t c = x.value().cols(), rows = x.value().rows();
  Tensor<T> out(x.shape());
  std::vector<T> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().data() + r * c;
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += xr[j] * xr[j];
    inv[r] = T(1) / std::sqrt(s + eps);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xr[j] * inv[r];
  }
  return make_op<T>(std::move(out), {x}, [inv = std::move(inv), rows, c](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * c;
      const T* gy = self.grad.data() + r * c;
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) (*g)[r * c + j] += inv[r] * (gy[j] - y[j] * dot);
    }
  });
}

// ---------------------------------------------------------------- reshaping

template <typename T>
Var<T> reshape(const Var<T>& x, Shape s) {
  Tensor<T> out = x.value().reshaped(std::move(s));
  return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
    detail::axpy(parent_grad(self, 0), self.grad);
  });
}

// Concatenate along the channel axis; all leading dims must agree.
template <typename T>
Var<T> concat_lastdim(const std::vector<Var<T>>& xs) {
  require(!xs.empty(), "concat_lastdim: no inputs");
  const std::size_t rows = xs[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& x : xs) {
    require(x.value().rows() == rows, "concat_lastdim: leading dims differ");
    widths.push_back(x.value().cols());
    total += widths.back();
  }
  Shape s = xs[0].shape();
  s.back() = total;
  Tensor<T> out(s);
  std::size_t off = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const T* src = xs[i].value().data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(src + r * widths[i], widths[i], out.data() + r * total + off);
    off += widths[i];
  }
  return make_op<T>(std::move(out), xs, [widths, rows, total](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (auto* g = parent_grad(self, i))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < widths[i]; ++j)
            (*g)[r * widths[i] + j] += self.grad[r * total + off + j];
      off += widths[i];
    }
  });
}

// Channels [start, start+len) of x (..., C).
template <typename T>
Var<T> slice_lastdim(const Var<T>& x, std::size_t start, std::size_t len) {
  const std::size_t c = x.value().cols(), rows = x.value().rows();
  require(start + len <= c, "slice_lastdim: range out of bounds");
  Shape s = x.shape();
  s.back() = len;
  Tensor<T> out(s);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.value().data() + r * c + start, len, out.data() + r * len);
  return make_op<T>(std::move(out), {x}, [rows, c, start, len](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < len; ++j) (*g)[r * c + start + j] += self.grad[r * len + j];
  });
}

// Entries [start, start+len) along axis 0.
template <typename T>
Var<T> slice_axis0(const Var<T>& x, std::size_t start, std::size_t len) {
  require(x.value().rank() >= 1 && start + len <= x.dim(0), "slice_axis0: range out of bounds");
  const std::size_t inner = x.size() / x.dim(0);
  Shape s = x.shape();
  s[0] = len;
  Tensor<T> out(s);
  std::copy_n(x.value().data() + start * inner, len * inner, out.data());
  return make_op<T>(std::move(out), {x}, [start, inner](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[start * inner + i] += self.grad[i];
  });
}

// (A x B x rest) -> (B x A x rest)
template <typename T>
Var<T> swap_axes01(const Var<T>& x) {
  require(x.value().rank() >= 2, "swap_axes01: rank < 2");
  const std::size_t a = x.dim(0), b = x.dim(1), inner = x.size() / (a * b);
  Shape s = x.shape();
  std::swap(s[0], s[1]);
  Tensor<T> out(s);
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j)
      std::copy_n(x.value().data() + (i * b + j) * inner, inner, out.data() + (j * a + i) * inner);
  return make_op<T>(std::move(out), {x}, [a, b, inner](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j)
        for (std::size_t q = 0; q < inner; ++q)
          (*g)[(i * b + j) * inner + q] += self.grad[(j * a + i) * inner + q];
  });
}

// sum_i w[i] * xs[i]; w is a vector with one weight per input.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& xs, const Var<T>& w) {
  require(!xs.empty() && w.size() == xs.size(), "weighted_sum: weight count mismatch");
  Tensor<T> out(xs[0].shape());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    detail::same_shape(xs[i].shape(), xs[0].shape(), "weighted_sum");
    detail::axpy(&out, xs[i].value(), w.value()[i]);
  }
  std::vector<Var<T>> parents = xs;
  parents.push_back(w);
  const std::size_t n = xs.size();
  return make_op<T>(std::move(out), parents, [n](Node<T>& self) {
    const auto& wv = self.parents[n]->value;
    auto* gw = parent_grad(self, n);
    for (std::size_t i = 0; i < n; ++i) {
      detail::axpy(parent_grad(self, i), self.grad, wv[i]);
      if (gw) {
        const auto& xv = self.parents[i]->value;
        T dot = 0;
        for (std::size_t q = 0; q < xv.size(); ++q) dot += xv[q] * self.grad[q];
        (*gw)[i] += dot;
      }
    }
  });
}

// ------------------------------------------------------------ spatial filters

// Depthwise k x k convolution over a (F x h x w x C) grid with same-size
// output and replicate border. kernel is (k x k x C).
template <typename T>
Var<T> dwconv2d(const Var<T>& x, const Var<T>& kernel) {
  require(x.value().rank() == 4, "dwconv2d: input must be (F x h x w x C)");
  const std::size_t f = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  require(kernel.value().rank() == 3 && kernel.dim(0) == kernel.dim(1) && kernel.dim(2) == c,
          "dwconv2d: kernel must be (k x k x C)");
  const std::size_t k = kernel.dim(0);
  require(k % 2 == 1, "dwconv2d: kernel size must be odd");
  const long r = static_cast<long>(k / 2);
  auto clampi = [](long v, long hi) { return static_cast<std::size_t>(std::clamp(v, 0L, hi - 1)); };
  Tensor<T> out(x.shape());
  const T* xv = x.value().data();
  const T* kv = kernel.value().data();
  for (std::size_t fi = 0; fi < f; ++fi)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        T* o = out.data() + ((fi * h + i) * w + j) * c;
        for (long di = -r; di <= r; ++di) {
          const std::size_t si = clampi(static_cast<long>(i) + di, static_cast<long>(h));
          for (long dj = -r; dj <= r; ++dj) {
            const std::size_t sj = clampi(static_cast<long>(j) + dj, static_cast<long>(w));
            const T* src = xv + ((fi * h + si) * w + sj) * c;
            const T* kk = kv + ((di + r) * static_cast<long>(k) + (dj + r)) * c;
            for (std::size_t ch = 0; ch < c; ++ch) o[ch] += kk[ch] * src[ch];
          }
        }
      }
  return make_op<T>(std::move(out), {x, kernel}, [f, h, w, c, k, r, clampi](Node<T>& self) {
    const T* xv = self.parents[0]->value.data();
    const T* kv = self.parents[1]->value.data();
    auto* gx = parent_grad(self, 0);
    auto* gk = parent_grad(self, 1);
    for (std::size_t fi = 0; fi < f; ++fi)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const T* go = self.grad.data() + ((fi * h + i) * w + j) * c;
          for (long di = -r; di <= r; ++di) {
            const std::size_t si = clampi(static_cast<long>(i) + di, static_cast<long>(h));
            for (long dj = -r; dj <= r; ++dj) {
              const std::size_t sj = clampi(static_cast<long>(j) + dj, static_cast<long>(w));
              const std::size_t src = ((fi * h + si) * w + sj) * c;
              const std::size_t koff = ((di + r) * static_cast<long>(k) + (dj + r)) * c;
              if (gx)
                for (std::size_t ch = 0; ch < c; ++ch) (*gx)[src + ch] += kv[koff + ch] * go[ch];
              if (gk)
                for (std::size_t ch = 0; ch < c; ++ch) (*gk)[koff + ch] += xv[src + ch] * go[ch];
            }
          }
        }
  });
}

// Dense k x k convolution, zero padding, stride 1. x is (h x w x Cin); weight
// is (k*k*Cin x Cout) laid out as [(di*k + dj)*Cin + cin][cout].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t k) {
  require(x.value().rank() == 3, "conv2d: input must be (h x w x Cin)");
  require(k % 2 == 1, "conv2d: kernel size must be odd");
  const std::size_t h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  require(weight.value().rank() == 2 && weight.dim(0) == k * k * cin,
          "conv2d: weight must be (k*k*Cin x Cout)");
  const std::size_t cout = weight.dim(1);
  const std::size_t patch = k * k * cin, npix = h * w;
  const long r = static_cast<long>(k / 2);

  Tensor<T> cols;
  const T* colp = x.value().data();
  if (k > 1) {
    cols = Tensor<T>({npix, patch});
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        T* dst = cols.data() + (i * w + j) * patch;
        for (long di = -r; di <= r; ++di)
          for (long dj = -r; dj <= r; ++dj) {
            const long si = static_cast<long>(i) + di, sj = static_cast<long>(j) + dj;
            if (si < 0 || sj < 0 || si >= static_cast<long>(h) || sj >= static_cast<long>(w)) {
              dst += cin;
              continue;
            }
            std::copy_n(x.value().data() + (si * static_cast<long>(w) + sj) * cin, cin, dst);
            dst += cin;
          }
      }
    colp = cols.data();
  }
  Tensor<T> out({h, w, cout});
  MapMat<T> om(out.data(), npix, cout);
  om.noalias() = CMapMat<T>(colp, npix, patch) * CMapMat<T>(weight.value().data(), patch, cout);
  om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.value().data(), cout);

  return make_op<T>(
      std::move(out), {x, weight, bias},
      [cols = std::move(cols), h, w, cin, cout, k, r, patch, npix](Node<T>& self) {
        CMapMat<T> gy(self.grad.data(), npix, cout);
        const T* colp = k > 1 ? cols.data() : self.parents[0]->value.data();
        if (auto* gw = parent_grad(self, 1))
          MapMat<T>(gw->data(), patch, cout).noalias() +=
              CMapMat<T>(colp, npix, patch).transpose() * gy;
        if (auto* gb = parent_grad(self, 2))
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb->data(), cout) += gy.colwise().sum();
        if (auto* gx = parent_grad(self, 0)) {
          if (k == 1) {
            MapMat<T>(gx->data(), npix, cin).noalias() +=
                gy * CMapMat<T>(self.parents[1]->value.data(), patch, cout).transpose();
            return;
          }
          RowMat<T> gcols = gy * CMapMat<T>(self.parents[1]->value.data(), patch, cout).transpose();
          for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
              const T* src = gcols.data() + (i * w + j) * patch;
              for (long di = -r; di <= r; ++di)
                for (long dj = -r; dj <= r; ++dj) {
                  const long si = static_cast<long>(i) + di, sj = static_cast<long>(j) + dj;
                  if (si >= 0 && sj >= 0 && si < static_cast<long>(h) && sj < static_cast<long>(w)) {
                    T* dst = gx->data() + (si * static_cast<long>(w) + sj) * cin;
                    for (std::size_t q = 0; q < cin; ++q) dst[q] += src[q];
                  }
                  src += cin;
                }
            }
        }
      });
}

// (h x w x C) -> (2h x 2w x C), nearest neighbour.
template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  require(x.value().rank() == 3, "upsample_nearest2x: input must be (h x w x C)");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  Tensor<T> out({2 * h, 2 * w, c});
  for (std::size_t i = 0; i < 2 * h; ++i)
    for (std::size_t j = 0; j < 2 * w; ++j)
      std::copy_n(x.value().data() + ((i / 2) * w + j / 2) * c, c,
                  out.data() + (i * 2 * w + j) * c);
  return make_op<T>(std::move(out), {x}, [h, w, c](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j)
        for (std::size_t q = 0; q < c; ++q)
          (*g)[((i / 2) * w + j / 2) * c + q] += self.grad[(i * 2 * w + j) * c + q];
  });
}

// Linear interpolation matrix (out x in). align_corners maps the end points
// onto each other; otherwise pixel centres are aligned (half-pixel rule).
template <typename T>
Tensor<T> interpolation_matrix(std::size_t out_n, std::size_t in_n, bool align_corners) {
  require(out_n > 0 && in_n > 0, "interpolation_matrix: empty axis");
  Tensor<T> m({out_n, in_n});
  for (std::size_t o = 0; o < out_n; ++o) {
    double src;
    if (align_corners) {
      src = out_n == 1 ? 0.0
                       : static_cast<double>(o) * static_cast<double>(in_n - 1) /
                             static_cast<double>(out_n - 1);
    } else {
      src = (static_cast<double>(o) + 0.5) * static_cast<double>(in_n) / static_cast<double>(out_n) - 0.5;
    }
    src = std::clamp(src, 0.0, static_cast<double>(in_n - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in_n - 1);
    const double t = src - static_cast<double>(i0);
    m.at(o, i0) += static_cast<T>(1.0 - t);
    m.at(o, i1) += static_cast<T>(t);
  }
  return m;
}

// Bilinear resize of a (F x h x w x C) grid to (F x H x W x C).
template <typename T>
Var<T> resize_bilinear(const Var<T>& x, std::size_t out_h, std::size_t out_w) {
  require(x.value().rank() == 4, "resize_bilinear: input must be (F x h x w x C)");
  const std::size_t f = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h == out_h && w == out_w) return x;
  const Tensor<T> ry = interpolation_matrix<T>(out_h, h, false);
  const Tensor<T> rx = interpolation_matrix<T>(out_w, w, false);
  Tensor<T> out({f, out_h, out_w, c});
  for (std::size_t fi = 0; fi < f; ++fi)
    for (std::size_t oi = 0; oi < out_h; ++oi)
      for (std::size_t i = 0; i < h; ++i) {
        const T wy = ry.at(oi, i);
        if (wy == T(0)) continue;
        for (std::size_t oj = 0; oj < out_w; ++oj)
          for (std::size_t j = 0; j < w; ++j) {
            const T wt = wy * rx.at(oj, j);
            if (wt == T(0)) continue;
            const T* src = x.value().data() + ((fi * h + i) * w + j) * c;
            T* dst = out.data() + ((fi * out_h + oi) * out_w + oj) * c;
            for (std::size_t q = 0; q < c; ++q) dst[q] += wt * src[q];
          }
      }
  return make_op<T>(std::move(out), {x}, [ry, rx, f, h, w, c, out_h, out_w](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t fi = 0; fi < f; ++fi)
      for (std::size_t oi = 0; oi < out_h; ++oi)
        for (std::size_t i = 0; i < h; ++i) {
          const T wy = ry.at(oi, i);
          if (wy == T(0)) continue;
          for (std::size_t oj = 0; oj < out_w; ++oj)
            for (std::size_t j = 0; j < w; ++j) {
              const T wt = wy * rx.at(oj, j);
              if (wt == T(0)) continue;
              const T* src = self.grad.data() + ((fi * out_h + oi) * out_w + oj) * c;
              T* dst = g->data() + ((fi * h + i) * w + j) * c;
              for (std::size_t q = 0; q < c; ++q) dst[q] += wt * src[q];
            }
        }
  });
}

// Forward differences of an (H x W x C) image along x (axis 1) or y (axis 0).
template <typename T>
Var<T> forward_diff(const Var<T>& x, int axis) {
  require(x.value().rank() == 3, "forward_diff: input must be (H x W x C)");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const bool along_x = axis == 1;
  const std::size_t oh = along_x ? h : h - 1, ow = along_x ? w - 1 : w;
  require(oh > 0 && ow > 0, "forward_diff: image too small");
  const std::size_t step = along_x ? c : w * c;
  Tensor<T> out({oh, ow, c});
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j)
      for (std::size_t q = 0; q < c; ++q) {
        const std::size_t s = (i * w + j) * c + q;
        out[(i * ow + j) * c + q] = x.value()[s + step] - x.value()[s];
      }
  return make_op<T>(std::move(out), {x}, [oh, ow, w, c, step](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j)
        for (std::size_t q = 0; q < c; ++q) {
          const std::size_t s = (i * w + j) * c + q;
          const T gv = self.grad[(i * ow + j) * c + q];
          (*g)[s + step] += gv;
          (*g)[s] -= gv;
        }
  });
}

}  // namespace m2s2l::ops
