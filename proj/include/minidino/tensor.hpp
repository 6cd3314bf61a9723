// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "minidino/errors.hpp"
#include "minidino/kernels.hpp"
#include "minidino/rng.hpp"

namespace minidino {

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

// Dense row-major tensor. Data and gradient buffers are shared, so copies
// of a Tensor alias the same storage; parameters rely on this to receive
// gradient accumulation through whichever handle was captured by the tape.
template <typename T>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<std::vector<T>> grad_;
  bool requires_grad = false;
  int node = -1;  // index into the recording tape, -1 when untraced

  Tensor() = default;

  std::int64_t numel() const { return data_ ? (std::int64_t)data_->size() : 0; }
  std::int64_t rank() const { return (std::int64_t)shape.size(); }
  std::int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::int64_t cols() const {
    return shape.size() < 2 ? (shape.empty() ? 1 : shape[0]) : shape[1];
  }
  bool is_scalar() const { return numel() == 1; }

  T* data() { return data_->data(); }
  const T* data() const { return data_->data(); }
  T* grad() { return grad_ ? grad_->data() : nullptr; }
  const T* grad() const { return grad_ ? grad_->data() : nullptr; }

  T& at(std::int64_t i) { return (*data_)[i]; }
  T at(std::int64_t i) const { return (*data_)[i]; }
  T& at(std::int64_t r, std::int64_t c) { return (*data_)[r * shape[1] + c]; }
  T at(std::int64_t r, std::int64_t c) const {
    return (*data_)[r * shape[1] + c];
  }

  T value() const {
    if (!is_scalar()) throw ShapeError("expected scalar, got " + shape_str(shape));
    return (*data_)[0];
  }

  static Tensor zeros(Shape s) {
    Tensor t;
    t.shape = std::move(s);
    t.data_ = std::make_shared<std::vector<T>>(shape_numel(t.shape), T(0));
    return t;
  }

  static Tensor full(Shape s, T v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
  }

  static Tensor from_vec(Shape s, std::vector<T> v) {
    if ((std::int64_t)v.size() != shape_numel(s))
      throw ShapeError("data length " + std::to_string(v.size()) +
                       " does not match shape " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.data_ = std::make_shared<std::vector<T>>(std::move(v));
    return t;
  }

  static Tensor randn(Shape s, Rng& rng, T stddev = T(1)) {
    Tensor t = zeros(std::move(s));
    for (auto& x : *t.data_) x = stddev * (T)rng.normal();
    return t;
  }

  // Learnable leaf: gradient storage is allocated eagerly so every aliasing
  // handle observes accumulation.
  static Tensor param(Shape s, Rng& rng, T stddev) {
    Tensor t = randn(std::move(s), rng, stddev);
    t.requires_grad = true;
    t.grad_ = std::make_shared<std::vector<T>>(t.data_->size(), T(0));
    return t;
  }

  static Tensor param_zeros(Shape s) {
    Tensor t = zeros(std::move(s));
    t.requires_grad = true;
    t.grad_ = std::make_shared<std::vector<T>>(t.data_->size(), T(0));
    return t;
  }

  static Tensor param_full(Shape s, T v) {
    Tensor t = full(std::move(s), v);
    t.requires_grad = true;
    t.grad_ = std::make_shared<std::vector<T>>(t.data_->size(), T(0));
    return t;
  }

  Tensor detached() const {
    Tensor t;
    t.shape = shape;
    t.data_ = data_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    return t;
  }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
  }

  bool has_nonfinite() const {
    for (T v : *data_)
      if (!std::isfinite((double)v)) return true;
    return false;
  }
};

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                      const char* op) {
  if (a.shape != b.shape)
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape) + " vs " + shape_str(b.shape));
}

// Per-row rotary tables: cos/sin per (token, rotation pair). Rows for
// position-free tokens (CLS, registers) carry the identity rotation.
template <typename T>
struct RopeTable {
  std::int64_t tokens = 0;
  std::int64_t pairs = 0;  // rotation pairs per head (head_dim / 2)
  std::vector<T> cosv, sinv;
};

enum class Axis { rows, cols };

enum class AttnVariant { standard, value_gating, attention_bias };

// Reverse-mode tape. Records one node per produced tensor; backward replays
// closures in reverse creation order, which is a valid topological order
// because inputs always precede outputs. Leaf gradients accumulate across
// backward calls; intermediate gradients are re-zeroed at the start of each
// call so repeated backward without a reset yields exact multiples.
template <typename T>
class Tape {
 public:
  struct Node {
    std::function<void()> backward;              // null for leaves
    std::shared_ptr<std::vector<T>> out_grad;    // zeroed per backward call
    std::array<int, 4> parents{-1, -1, -1, -1};  // tape indices, -1 = none
    bool is_leaf = false;
  };

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  void set_recording(bool r) { recording_ = r; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_[i]; }
  void clear() { nodes_.clear(); }

  void backward(const Tensor<T>& loss) {
    if (!loss.is_scalar())
      throw ShapeError("backward: loss must be scalar, got " +
                       shape_str(loss.shape));
    if (loss.node < 0)
      throw ShapeError("backward: loss is not traced on this tape");
    for (auto& n : nodes_)
      if (!n.is_leaf && n.out_grad)
        std::fill(n.out_grad->begin(), n.out_grad->end(), T(0));
    (*nodes_[loss.node].out_grad)[0] = T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;)
      if (nodes_[i].backward) nodes_[i].backward();
  }

  // ---- elementwise -------------------------------------------------------

  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    Tensor<T> out = out_like(a.shape);
    kernels::vadd(a.data(), b.data(), out.data(), a.numel());
    record2(out, a, b, [ga = grad_of(a), gb = grad_of(b), go = out.grad_,
                        n = a.numel()] {
      if (ga) kernels::vadd(ga->data(), go->data(), ga->data(), n);
      if (gb) kernels::vadd(gb->data(), go->data(), gb->data(), n);
    });
    return out;
  }

  Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    Tensor<T> out = out_like(a.shape);
    kernels::vsub(a.data(), b.data(), out.data(), a.numel());
    record2(out, a, b, [ga = grad_of(a), gb = grad_of(b), go = out.grad_,
                        n = a.numel()] {
      if (ga) kernels::vadd(ga->data(), go->data(), ga->data(), n);
      if (gb) kernels::axpy(T(-1), go->data(), gb->data(), n);
    });
    return out;
  }

  Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out = out_like(a.shape);
    kernels::vmul(a.data(), b.data(), out.data(), a.numel());
    record2(out, a, b,
            [ga = grad_of(a), gb = grad_of(b), da = a.data_, db = b.data_,
             go = out.grad_, n = a.numel()] {
              const T* g = go->data();
              if (ga)
                for (std::int64_t i = 0; i < n; ++i)
                  (*ga)[i] += g[i] * (*db)[i];
              if (gb)
                for (std::int64_t i = 0; i < n; ++i)
                  (*gb)[i] += g[i] * (*da)[i];
            });
    return out;
  }

  Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "div");
    Tensor<T> out = out_like(a.shape);
    for (std::int64_t i = 0; i < a.numel(); ++i)
      out.at(i) = a.at(i) / b.at(i);
    record2(out, a, b,
            [ga = grad_of(a), gb = grad_of(b), da = a.data_, db = b.data_,
             go = out.grad_, n = a.numel()] {
              const T* g = go->data();
              for (std::int64_t i = 0; i < n; ++i) {
                const T bv = (*db)[i];
                if (ga) (*ga)[i] += g[i] / bv;
                if (gb) (*gb)[i] -= g[i] * (*da)[i] / (bv * bv);
              }
            });
    return out;
  }

  Tensor<T> neg(const Tensor<T>& a) { return mul_scalar(a, T(-1)); }

  Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    Tensor<T> out = out_like(a.shape);
    for (std::int64_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) + s;
    record1(out, a, [ga = grad_of(a), go = out.grad_, n = a.numel()] {
      if (ga) kernels::vadd(ga->data(), go->data(), ga->data(), n);
    });
    return out;
  }

  Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    Tensor<T> out = out_like(a.shape);
    for (std::int64_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) * s;
    record1(out, a, [ga = grad_of(a), go = out.grad_, s, n = a.numel()] {
      if (ga) kernels::axpy(s, go->data(), ga->data(), n);
    });
    return out;
  }

  Tensor<T> exp(const Tensor<T>& a) {
    Tensor<T> out = out_like(a.shape);
    for (std::int64_t i = 0; i < a.numel(); ++i)
      out.at(i) = std::exp(a.at(i));
    record1(out, a,
            [ga = grad_of(a), dout = out.data_, go = out.grad_,
             n = a.numel()] {
              if (!ga) return;
              for (std::int64_t i = 0; i < n; ++i)
                (*ga)[i] += (*go)[i] * (*dout)[i];
            });
    return out;
  }

  Tensor<T> log(const Tensor<T>& a) {
    Tensor<T> out = out_like(a.shape);
    for (std::int64_t i = 0; i < a.numel(); ++i)
      out.at(i) = std::log(a.at(i));
    record1(out, a,
            [ga = grad_of(a), da = a.data_, go = out.grad_, n = a.numel()] {
              if (!ga) return;
              for (std::int64_t i = 0; i < n; ++i)
                (*ga)[i] += (*go)[i] / (*da)[i];
            });
    return out;
  }

  // sqrt with a clamped backward denominator; keeps the gradient finite when
  // the argument underflows to 0 (duplicate points in the Koleo loss).
  Tensor<T> sqrt(const Tensor<T>& a) {
    Tensor<T> out = out_like(a.shape);
    for (std::int64_t i = 0; i < a.numel(); ++i)
      out.at(i) = std::sqrt(a.at(i));
    record1(out, a,
            [ga = grad_of(a), dout = out.data_, go = out.grad_,
             n = a.numel()] {
              if (!ga) return;
              const T floor = (T)1e-12;
              for (std::int64_t i = 0; i < n; ++i)
                (*ga)[i] += (*go)[i] / (T(2) * std::max((*dout)[i], floor));
            });
    return out;
  }

  Tensor<T> silu(const Tensor<T>& a) {
    Tensor<T> out = out_like(a.shape);
    for (std::int64_t i = 0; i < a.numel(); ++i) {
      const T s = sigmoid_(a.at(i));
      out.at(i) = a.at(i) * s;
    }
    record1(out, a,
            [ga = grad_of(a), da = a.data_, go = out.grad_, n = a.numel()] {
              if (!ga) return;
              for (std::int64_t i = 0; i < n; ++i) {
                const T x = (*da)[i];
                const T s = sigmoid_(x);
                (*ga)[i] += (*go)[i] * (s + x * s * (T(1) - s));
              }
            });
    return out;
  }

  // Gated feed-forward primitive: silu(a) * b.
  Tensor<T> swiglu(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "swiglu");
    Tensor<T> out = out_like(a.shape);
    for (std::int64_t i = 0; i < a.numel(); ++i)
      out.at(i) = a.at(i) * sigmoid_(a.at(i)) * b.at(i);
    record2(out, a, b,
            [ga = grad_of(a), gb = grad_of(b), da = a.data_, db = b.data_,
             go = out.grad_, n = a.numel()] {
              for (std::int64_t i = 0; i < n; ++i) {
                const T x = (*da)[i];
                const T s = sigmoid_(x);
                const T g = (*go)[i];
                if (ga) (*ga)[i] += g * (*db)[i] * (s + x * s * (T(1) - s));
                if (gb) (*gb)[i] += g * x * s;
              }
            });
    return out;
  }

  // ---- broadcast helpers -------------------------------------------------

  // x[r,c] + v[c] for every row.
  Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    require_rank(x, 2, "add_rowvec");
    if (v.numel() != x.shape[1])
      throw ShapeError("add_rowvec: vector length " + shape_str(v.shape) +
                       " vs matrix " + shape_str(x.shape));
    Tensor<T> out = out_like(x.shape);
    const std::int64_t r = x.shape[0], c = x.shape[1];
    for (std::int64_t i = 0; i < r; ++i)
      kernels::vadd(x.data() + i * c, v.data(), out.data() + i * c, c);
    record2(out, x, v,
            [gx = grad_of(x), gv = grad_of(v), go = out.grad_, r, c] {
              if (gx) kernels::vadd(gx->data(), go->data(), gx->data(), r * c);
              if (gv)
                for (std::int64_t i = 0; i < r; ++i)
                  kernels::vadd(gv->data(), go->data() + i * c, gv->data(), c);
            });
    return out;
  }

  // x[r,c] * s[r] rowwise.
  Tensor<T> mul_colvec(const Tensor<T>& x, const Tensor<T>& s) {
    require_rank(x, 2, "mul_colvec");
    if (s.numel() != x.shape[0])
      throw ShapeError("mul_colvec: vector length " + shape_str(s.shape) +
                       " vs matrix " + shape_str(x.shape));
    Tensor<T> out = out_like(x.shape);
    const std::int64_t r = x.shape[0], c = x.shape[1];
    for (std::int64_t i = 0; i < r; ++i) {
      const T sv = s.at(i);
      for (std::int64_t j = 0; j < c; ++j)
        out.at(i, j) = x.at(i, j) * sv;
    }
    record2(out, x, s,
            [gx = grad_of(x), gs = grad_of(s), dx = x.data_, ds = s.data_,
             go = out.grad_, r, c] {
              for (std::int64_t i = 0; i < r; ++i) {
                const T* g = go->data() + i * c;
                if (gx) kernels::axpy((*ds)[i], g, gx->data() + i * c, c);
                if (gs)
                  (*gs)[i] += kernels::dot(g, dx->data() + i * c, c);
              }
            });
    return out;
  }

  // x[r,c] + s[r] (outer) v[c]; used to blend a learned token into masked
  // rows: masked = x * (1-m) + m (outer) mask_token.
  Tensor<T> add_outer(const Tensor<T>& x, const Tensor<T>& s,
                      const Tensor<T>& v) {
    require_rank(x, 2, "add_outer");
    if (s.numel() != x.shape[0] || v.numel() != x.shape[1])
      throw ShapeError("add_outer: outer factors " + shape_str(s.shape) +
                       "," + shape_str(v.shape) + " vs matrix " +
                       shape_str(x.shape));
    Tensor<T> out = out_like(x.shape);
    const std::int64_t r = x.shape[0], c = x.shape[1];
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j)
        out.at(i, j) = x.at(i, j) + s.at(i) * v.at(j);
    record3(out, x, s, v,
            [gx = grad_of(x), gs = grad_of(s), gv = grad_of(v), ds = s.data_,
             dv = v.data_, go = out.grad_, r, c] {
              if (gx) kernels::vadd(gx->data(), go->data(), gx->data(), r * c);
              for (std::int64_t i = 0; i < r; ++i) {
                const T* g = go->data() + i * c;
                if (gs) (*gs)[i] += kernels::dot(g, dv->data(), c);
                if (gv) kernels::axpy((*ds)[i], g, gv->data(), c);
              }
            });
    return out;
  }

  // ---- linear algebra ----------------------------------------------------

  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    if (a.shape[1] != b.shape[0])
      throw ShapeError("matmul: inner extents disagree, " +
                       shape_str(a.shape) + " vs " + shape_str(b.shape));
    const std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor<T> out = out_like({m, n});
    kernels::gemm_nn(a.data(), b.data(), out.data(), m, k, n);
    record2(out, a, b,
            [ga = grad_of(a), gb = grad_of(b), da = a.data_, db = b.data_,
             go = out.grad_, m, k, n] {
              if (ga)
                kernels::gemm_nt(go->data(), db->data(), ga->data(), m, n, k);
              if (gb)
                kernels::gemm_tn(da->data(), go->data(), gb->data(), k, m, n);
            });
    return out;
  }

  Tensor<T> transpose(const Tensor<T>& a) {
    require_rank(a, 2, "transpose");
    const std::int64_t r = a.shape[0], c = a.shape[1];
    Tensor<T> out = out_like({c, r});
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
    record1(out, a, [ga = grad_of(a), go = out.grad_, r, c] {
      if (!ga) return;
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j)
          (*ga)[i * c + j] += (*go)[j * r + i];
    });
    return out;
  }

  Tensor<T> reshape(const Tensor<T>& a, Shape s) {
    if (shape_numel(s) != a.numel())
      throw ShapeError("reshape: cannot view " + shape_str(a.shape) +
                       " as " + shape_str(s));
    Tensor<T> out = out_like(s);
    std::copy(a.data_->begin(), a.data_->end(), out.data_->begin());
    record1(out, a, [ga = grad_of(a), go = out.grad_, n = a.numel()] {
      if (ga) kernels::vadd(ga->data(), go->data(), ga->data(), n);
    });
    return out;
  }

  Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    const std::int64_t c = parts[0].cols();
    std::int64_t r = 0;
    for (const auto& p : parts) {
      require_rank(p, 2, "concat_rows");
      if (p.shape[1] != c)
        throw ShapeError("concat_rows: column mismatch " +
                         shape_str(parts[0].shape) + " vs " +
                         shape_str(p.shape));
      r += p.shape[0];
    }
    Tensor<T> out = out_like({r, c});
    std::int64_t off = 0;
    for (const auto& p : parts) {
      std::copy(p.data_->begin(), p.data_->end(), out.data_->begin() + off);
      off += p.numel();
    }
    // record with up to 4 parents per node; chain through auxiliary nodes if
    // more parts: simplest is one node holding every grad buffer.
    if (recording_) {
      std::vector<std::shared_ptr<std::vector<T>>> grads;
      std::vector<std::int64_t> sizes;
      std::array<int, 4> parents{-1, -1, -1, -1};
      bool any = false;
      for (std::size_t i = 0; i < parts.size(); ++i) {
        int pid = ensure_node(parts[i]);
        if (i < 4) parents[i] = pid;
        grads.push_back(pid >= 0 ? parts[i].grad_ : nullptr);
        sizes.push_back(parts[i].numel());
        any = any || pid >= 0;
      }
      if (any) {
        alloc_grad(out);
        auto go = out.grad_;
        push_node(out, parents,
                  [grads = std::move(grads), sizes = std::move(sizes), go] {
                    std::int64_t off2 = 0;
                    for (std::size_t i = 0; i < grads.size(); ++i) {
                      if (grads[i])
                        kernels::vadd(grads[i]->data(), go->data() + off2,
                                      grads[i]->data(), sizes[i]);
                      off2 += sizes[i];
                    }
                  });
      }
    }
    return out;
  }

  Tensor<T> slice_rows(const Tensor<T>& a, std::int64_t r0, std::int64_t n) {
    require_rank(a, 2, "slice_rows");
    if (r0 < 0 || n < 0 || r0 + n > a.shape[0])
      throw ShapeError("slice_rows: range [" + std::to_string(r0) + "," +
                       std::to_string(r0 + n) + ") out of " +
                       shape_str(a.shape));
    const std::int64_t c = a.shape[1];
    Tensor<T> out = out_like({n, c});
    std::copy(a.data_->begin() + r0 * c, a.data_->begin() + (r0 + n) * c,
              out.data_->begin());
    record1(out, a, [ga = grad_of(a), go = out.grad_, r0, n, c] {
      if (ga)
        kernels::vadd(ga->data() + r0 * c, go->data(), ga->data() + r0 * c,
                      n * c);
    });
    return out;
  }

  Tensor<T> slice_cols(const Tensor<T>& a, std::int64_t c0, std::int64_t n) {
    require_rank(a, 2, "slice_cols");
    if (c0 < 0 || n < 0 || c0 + n > a.shape[1])
      throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," +
                       std::to_string(c0 + n) + ") out of " +
                       shape_str(a.shape));
    const std::int64_t r = a.shape[0], c = a.shape[1];
    Tensor<T> out = out_like({r, n});
    for (std::int64_t i = 0; i < r; ++i)
      std::copy(a.data_->begin() + i * c + c0,
                a.data_->begin() + i * c + c0 + n,
                out.data_->begin() + i * n);
    record1(out, a, [ga = grad_of(a), go = out.grad_, r, c, c0, n] {
      if (!ga) return;
      for (std::int64_t i = 0; i < r; ++i)
        kernels::vadd(ga->data() + i * c + c0, go->data() + i * n,
                      ga->data() + i * c + c0, n);
    });
    return out;
  }

  Tensor<T> gather_rows(const Tensor<T>& a,
                        const std::vector<std::int64_t>& idx) {
    require_rank(a, 2, "gather_rows");
    const std::int64_t r = a.shape[0], c = a.shape[1];
    for (auto i : idx)
      if (i < 0 || i >= r)
        throw ShapeError("gather_rows: index " + std::to_string(i) +
                         " out of " + shape_str(a.shape));
    Tensor<T> out = out_like({(std::int64_t)idx.size(), c});
    for (std::size_t p = 0; p < idx.size(); ++p)
      std::copy(a.data_->begin() + idx[p] * c,
                a.data_->begin() + (idx[p] + 1) * c,
                out.data_->begin() + (std::int64_t)p * c);
    record1(out, a, [ga = grad_of(a), go = out.grad_, idx, c] {
      if (!ga) return;
      for (std::size_t p = 0; p < idx.size(); ++p)
        kernels::vadd(ga->data() + idx[p] * c,
                      go->data() + (std::int64_t)p * c,
                      ga->data() + idx[p] * c, c);
    });
    return out;
  }

  // ---- reductions --------------------------------------------------------

  Tensor<T> sum_all(const Tensor<T>& a) {
    Tensor<T> out = out_like({1});
    out.at(0) = kernels::reduce_sum(a.data(), a.numel());
    record1(out, a, [ga = grad_of(a), go = out.grad_, n = a.numel()] {
      if (!ga) return;
      const T g = (*go)[0];
      for (std::int64_t i = 0; i < n; ++i) (*ga)[i] += g;
    });
    return out;
  }

  Tensor<T> mean_all(const Tensor<T>& a) {
    return mul_scalar(sum_all(a), T(1) / (T)a.numel());
  }

  // axis=rows collapses rows (output length = cols); axis=cols collapses
  // columns (output length = rows).
  Tensor<T> sum_axis(const Tensor<T>& a, Axis axis) {
    require_rank(a, 2, "sum_axis");
    const std::int64_t r = a.shape[0], c = a.shape[1];
    if (axis == Axis::rows) {
      Tensor<T> out = out_like({c});
      for (std::int64_t i = 0; i < r; ++i)
        kernels::vadd(out.data(), a.data() + i * c, out.data(), c);
      record1(out, a, [ga = grad_of(a), go = out.grad_, r, c] {
        if (!ga) return;
        for (std::int64_t i = 0; i < r; ++i)
          kernels::vadd(ga->data() + i * c, go->data(), ga->data() + i * c, c);
      });
      return out;
    }
    Tensor<T> out = out_like({r});
    for (std::int64_t i = 0; i < r; ++i)
      out.at(i) = kernels::reduce_sum(a.data() + i * c, c);
    record1(out, a, [ga = grad_of(a), go = out.grad_, r, c] {
      if (!ga) return;
      for (std::int64_t i = 0; i < r; ++i) {
        const T g = (*go)[i];
        for (std::int64_t j = 0; j < c; ++j) (*ga)[i * c + j] += g;
      }
    });
    return out;
  }

  Tensor<T> mean_axis(const Tensor<T>& a, Axis axis) {
    require_rank(a, 2, "mean_axis");
    const T den = axis == Axis::rows ? (T)a.shape[0] : (T)a.shape[1];
    return mul_scalar(sum_axis(a, axis), T(1) / den);
  }

  // ---- normalized forms --------------------------------------------------

  Tensor<T> softmax(const Tensor<T>& x, T temperature,
                    Axis axis = Axis::rows) {
    if (temperature <= T(0))
      throw ConfigError("softmax: temperature must be positive");
    if (x.has_nonfinite())
      throw NumericFault("softmax: non-finite input");
    if (axis == Axis::cols)
      return transpose(softmax(transpose(x), temperature, Axis::rows));
    Tensor<T> x2 = x.rank() == 1 ? reshape(x, {1, x.numel()}) : x;
    require_rank(x2, 2, "softmax");
    const std::int64_t r = x2.shape[0], c = x2.shape[1];
    Tensor<T> out = out_like(x2.shape);
    for (std::int64_t i = 0; i < r; ++i) {
      const T* xi = x2.data() + i * c;
      T m = xi[0];
      for (std::int64_t j = 1; j < c; ++j) m = std::max(m, xi[j]);
      T s = 0;
      T* oi = out.data() + i * c;
      for (std::int64_t j = 0; j < c; ++j) {
        oi[j] = std::exp((xi[j] - m) / temperature);
        s += oi[j];
      }
      const T inv = T(1) / s;
      for (std::int64_t j = 0; j < c; ++j) oi[j] *= inv;
    }
    record1(out, x2,
            [gx = grad_of(x2), dout = out.data_, go = out.grad_, r, c,
             temperature] {
              if (!gx) return;
              for (std::int64_t i = 0; i < r; ++i) {
                const T* p = dout->data() + i * c;
                const T* g = go->data() + i * c;
                const T dotpg = kernels::dot(p, g, c);
                T* gi = gx->data() + i * c;
                for (std::int64_t j = 0; j < c; ++j)
                  gi[j] += p[j] * (g[j] - dotpg) / temperature;
              }
            });
    return x.rank() == 1 ? reshape(out, {x.numel()}) : out;
  }

  Tensor<T> l2_normalize(const Tensor<T>& x, T eps, Axis axis = Axis::rows) {
    if (eps <= T(0)) throw ConfigError("l2_normalize: eps must be positive");
    if (axis == Axis::cols)
      return transpose(l2_normalize(transpose(x), eps, Axis::rows));
    Tensor<T> x2 = x.rank() == 1 ? reshape(x, {1, x.numel()}) : x;
    require_rank(x2, 2, "l2_normalize");
    const std::int64_t r = x2.shape[0], c = x2.shape[1];
    Tensor<T> out = out_like(x2.shape);
    auto norms = std::make_shared<std::vector<T>>(r);
    for (std::int64_t i = 0; i < r; ++i) {
      const T* xi = x2.data() + i * c;
      const T nrm = std::sqrt(kernels::dot(xi, xi, c));
      const T den = std::max(nrm, eps);
      (*norms)[i] = nrm;
      T* oi = out.data() + i * c;
      for (std::int64_t j = 0; j < c; ++j) oi[j] = xi[j] / den;
    }
    record1(out, x2,
            [gx = grad_of(x2), dx = x2.data_, go = out.grad_, norms, r, c,
             eps] {
              if (!gx) return;
              for (std::int64_t i = 0; i < r; ++i) {
                const T* xi = dx->data() + i * c;
                const T* g = go->data() + i * c;
                T* gi = gx->data() + i * c;
                const T nrm = (*norms)[i];
                if (nrm > eps) {
                  const T inv = T(1) / nrm;
                  const T d = kernels::dot(g, xi, c) * inv * inv * inv;
                  for (std::int64_t j = 0; j < c; ++j)
                    gi[j] += g[j] * inv - xi[j] * d;
                } else {
                  kernels::axpy(T(1) / eps, g, gi, c);
                }
              }
            });
    return x.rank() == 1 ? reshape(out, {x.numel()}) : out;
  }

  Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                       const Tensor<T>& beta, T eps = (T)1e-5) {
    require_rank(x, 2, "layer_norm");
    const std::int64_t r = x.shape[0], c = x.shape[1];
    if (gamma.numel() != c || beta.numel() != c)
      throw ShapeError("layer_norm: scale/shift " + shape_str(gamma.shape) +
                       "," + shape_str(beta.shape) + " vs " +
                       shape_str(x.shape));
    Tensor<T> out = out_like(x.shape);
    auto mean = std::make_shared<std::vector<T>>(r);
    auto rstd = std::make_shared<std::vector<T>>(r);
    for (std::int64_t i = 0; i < r; ++i) {
      const T* xi = x.data() + i * c;
      T mu = kernels::reduce_sum(xi, c) / (T)c;
      T var = 0;
      for (std::int64_t j = 0; j < c; ++j) {
        const T d = xi[j] - mu;
        var += d * d;
      }
      var /= (T)c;
      const T rs = T(1) / std::sqrt(var + eps);
      (*mean)[i] = mu;
      (*rstd)[i] = rs;
      T* oi = out.data() + i * c;
      for (std::int64_t j = 0; j < c; ++j)
        oi[j] = (xi[j] - mu) * rs * gamma.at(j) + beta.at(j);
    }
    record3(out, x, gamma, beta,
            [gx = grad_of(x), gg = grad_of(gamma), gb = grad_of(beta),
             dx = x.data_, dg = gamma.data_, go = out.grad_, mean, rstd, r,
             c] {
              std::vector<T> dxh(c);
              for (std::int64_t i = 0; i < r; ++i) {
                const T* xi = dx->data() + i * c;
                const T* g = go->data() + i * c;
                const T mu = (*mean)[i], rs = (*rstd)[i];
                T sum_dxh = 0, sum_dxh_xh = 0;
                for (std::int64_t j = 0; j < c; ++j) {
                  const T xh = (xi[j] - mu) * rs;
                  dxh[j] = g[j] * (*dg)[j];
                  sum_dxh += dxh[j];
                  sum_dxh_xh += dxh[j] * xh;
                  if (gg) (*gg)[j] += g[j] * xh;
                  if (gb) (*gb)[j] += g[j];
                }
                if (gx) {
                  const T inv_c = T(1) / (T)c;
                  T* gi = gx->data() + i * c;
                  for (std::int64_t j = 0; j < c; ++j) {
                    const T xh = (xi[j] - mu) * rs;
                    gi[j] += rs * (dxh[j] - sum_dxh * inv_c -
                                   xh * sum_dxh_xh * inv_c);
                  }
                }
              }
            });
    return out;
  }

  // Mean over rows of the soft-target cross-entropy
  //   -sum_j t[r,j] * log softmax(logits[r,:] / temperature)_j.
  Tensor<T> soft_cross_entropy(const Tensor<T>& logits,
                               const Tensor<T>& targets, T temperature) {
    require_rank(logits, 2, "soft_cross_entropy");
    check_same_shape(logits, targets, "soft_cross_entropy");
    if (temperature <= T(0))
      throw ConfigError("soft_cross_entropy: temperature must be positive");
    const std::int64_t r = logits.shape[0], c = logits.shape[1];
    Tensor<T> out = out_like({1});
    auto probs = std::make_shared<std::vector<T>>(r * c);
    T total = 0;
    for (std::int64_t i = 0; i < r; ++i) {
      const T* li = logits.data() + i * c;
      const T* ti = targets.data() + i * c;
      T m = li[0];
      for (std::int64_t j = 1; j < c; ++j) m = std::max(m, li[j]);
      T z = 0;
      for (std::int64_t j = 0; j < c; ++j) {
        const T e = std::exp((li[j] - m) / temperature);
        (*probs)[i * c + j] = e;
        z += e;
      }
      const T logz = std::log(z);
      const T invz = T(1) / z;
      for (std::int64_t j = 0; j < c; ++j) {
        total -= ti[j] * ((li[j] - m) / temperature - logz);
        (*probs)[i * c + j] *= invz;
      }
    }
    out.at(0) = total / (T)r;
    record2(out, logits, targets,
            [gl = grad_of(logits), dt = targets.data_, go = out.grad_, probs,
             r, c, temperature] {
              if (!gl) return;
              const T g = (*go)[0] / (temperature * (T)r);
              for (std::int64_t i = 0; i < r; ++i) {
                const T* p = probs->data() + i * c;
                const T* t = dt->data() + i * c;
                T tsum = 0;
                for (std::int64_t j = 0; j < c; ++j) tsum += t[j];
                T* gi = gl->data() + i * c;
                for (std::int64_t j = 0; j < c; ++j)
                  gi[j] += g * (p[j] * tsum - t[j]);
              }
            });
    return out;
  }

  // ---- attention machinery -----------------------------------------------

  // Axial rotary transform on per-head query/key rows. x is [S, D] with D =
  // heads * head_dim; the table holds head_dim/2 rotation pairs per token
  // and is shared across heads.
  Tensor<T> rope(const Tensor<T>& x, const std::shared_ptr<RopeTable<T>>& tab,
                 std::int64_t heads) {
    require_rank(x, 2, "rope");
    const std::int64_t s = x.shape[0], d = x.shape[1];
    const std::int64_t dh = d / heads;
    if (d % heads != 0 || dh % 2 != 0 || tab->pairs != dh / 2 ||
        tab->tokens != s)
      throw ShapeError("rope: table " + std::to_string(tab->tokens) + "x" +
                       std::to_string(tab->pairs) + " incompatible with " +
                       shape_str(x.shape) + " at " + std::to_string(heads) +
                       " heads");
    Tensor<T> out = out_like(x.shape);
    rope_apply_(x.data(), out.data(), *tab, s, heads, dh, false);
    record1(out, x, [gx = grad_of(x), go = out.grad_, tab, s, heads, dh] {
      if (!gx) return;
      std::vector<T> tmp(s * heads * dh, T(0));
      RopeTable<T> t2 = *tab;  // inverse rotation
      for (auto& v : t2.sinv) v = -v;
      rope_apply_(go->data(), tmp.data(), t2, s, heads, dh, false);
      kernels::vadd(gx->data(), tmp.data(), gx->data(),
                    (std::int64_t)tmp.size());
    });
    return out;
  }

  // Multi-head scaled dot-product attention over one sequence.
  //  q,k,v: [S, D].  Strategies:
  //   standard        — softmax(QK^T/sqrt(dh)) V
  //   value_gating    — standard + v' broadcast to every token (v': [D])
  //   attention_bias  — k',v' enter as an extra phantom key/value slot
  // Optional probe captures the post-softmax rows of head 0 for tests.
  Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k,
                      const Tensor<T>& v, std::int64_t heads,
                      AttnVariant variant, const Tensor<T>* k_bias,
                      const Tensor<T>* v_bias,
                      std::vector<T>* probs_probe = nullptr) {
    require_rank(q, 2, "attention");
    check_same_shape(q, k, "attention");
    check_same_shape(q, v, "attention");
    const std::int64_t s = q.shape[0], d = q.shape[1];
    if (d % heads != 0)
      throw ShapeError("attention: dim " + std::to_string(d) +
                       " not divisible by " + std::to_string(heads) +
                       " heads");
    const std::int64_t dh = d / heads;
    const bool with_bias = variant == AttnVariant::attention_bias;
    const bool with_gate = variant == AttnVariant::value_gating;
    if (with_bias && (!k_bias || !v_bias))
      throw ConfigError("attention: attention_bias strategy requires k'/v'");
    if (with_gate && !v_bias)
      throw ConfigError("attention: value_gating strategy requires v'");
    if ((with_bias && (k_bias->numel() != d || v_bias->numel() != d)) ||
        (with_gate && v_bias->numel() != d))
      throw ShapeError("attention: bias length mismatch");
    const std::int64_t sk = s + (with_bias ? 1 : 0);
    const T scale = T(1) / std::sqrt((T)dh);

    Tensor<T> out = out_like({s, d});
    auto probs = std::make_shared<std::vector<T>>(heads * s * sk);
    std::vector<T> qh(s * dh), kh(s * dh), vh(s * dh);
    for (std::int64_t h = 0; h < heads; ++h) {
      gather_head_(q.data(), qh.data(), s, d, h * dh, dh);
      gather_head_(k.data(), kh.data(), s, d, h * dh, dh);
      gather_head_(v.data(), vh.data(), s, d, h * dh, dh);
      T* p = probs->data() + h * s * sk;
      // logits
      for (std::int64_t i = 0; i < s; ++i) {
        const T* qi = qh.data() + i * dh;
        T* pi = p + i * sk;
        for (std::int64_t j = 0; j < s; ++j)
          pi[j] = scale * kernels::dot(qi, kh.data() + j * dh, dh);
        if (with_bias)
          pi[s] = scale * kernels::dot(qi, k_bias->data() + h * dh, dh);
        // softmax in place
        T m = pi[0];
        for (std::int64_t j = 1; j < sk; ++j) m = std::max(m, pi[j]);
        T z = 0;
        for (std::int64_t j = 0; j < sk; ++j) {
          pi[j] = std::exp(pi[j] - m);
          z += pi[j];
        }
        const T inv = T(1) / z;
        for (std::int64_t j = 0; j < sk; ++j) pi[j] *= inv;
      }
      // out_h = P V (+ bias column * v')
      for (std::int64_t i = 0; i < s; ++i) {
        const T* pi = p + i * sk;
        T* oi = out.data() + i * d + h * dh;
        for (std::int64_t j = 0; j < s; ++j)
          kernels::axpy(pi[j], vh.data() + j * dh, oi, dh);
        if (with_bias) kernels::axpy(pi[s], v_bias->data() + h * dh, oi, dh);
      }
    }
    if (with_gate)
      for (std::int64_t i = 0; i < s; ++i)
        kernels::vadd(out.data() + i * d, v_bias->data(), out.data() + i * d,
                      d);
    if (probs_probe) probs_probe->assign(probs->begin(), probs->begin() + s * sk);

    if (recording_) {
      std::array<int, 4> parents{ensure_node(q), ensure_node(k),
                                 ensure_node(v), -1};
      auto gkb = with_bias && k_bias ? grad_of(*k_bias) : nullptr;
      auto gvb = (with_bias || with_gate) && v_bias ? grad_of(*v_bias)
                                                    : nullptr;
      bool any = parents[0] >= 0 || parents[1] >= 0 || parents[2] >= 0 ||
                 gkb || gvb;
      if (any) {
        alloc_grad(out);
        auto kb_data = with_bias ? k_bias->data_ : nullptr;
        auto vb_data = (with_bias || with_gate) ? v_bias->data_ : nullptr;
        push_node(
            out, parents,
            [gq = grad_of(q), gk = grad_of(k), gv = grad_of(v), gkb, gvb,
             dq = q.data_, dk = k.data_, dv = v.data_, kb_data, vb_data,
             probs, go = out.grad_, s, d, dh, heads, sk, scale, with_bias,
             with_gate] {
              std::vector<T> qh2(s * dh), kh2(s * dh), vh2(s * dh);
              std::vector<T> doh(s * dh), dp(s * sk), dl(s * sk);
              std::vector<T> acc(s * dh);
              if (with_gate && gvb)
                for (std::int64_t i = 0; i < s; ++i)
                  kernels::vadd(gvb->data(), go->data() + i * d, gvb->data(),
                                d);
              for (std::int64_t h = 0; h < heads; ++h) {
                gather_head_(dq->data(), qh2.data(), s, d, h * dh, dh);
                gather_head_(dk->data(), kh2.data(), s, d, h * dh, dh);
                gather_head_(dv->data(), vh2.data(), s, d, h * dh, dh);
                gather_head_(go->data(), doh.data(), s, d, h * dh, dh);
                const T* p = probs->data() + h * s * sk;
                // dP = dO V^T (+ bias col)
                for (std::int64_t i = 0; i < s; ++i) {
                  const T* gi = doh.data() + i * dh;
                  T* dpi = dp.data() + i * sk;
                  for (std::int64_t j = 0; j < s; ++j)
                    dpi[j] = kernels::dot(gi, vh2.data() + j * dh, dh);
                  if (with_bias)
                    dpi[s] = kernels::dot(gi, vb_data->data() + h * dh, dh);
                }
                // dV += P^T dO ; dv' += p_bias^T dO
                if (gv) {
                  std::fill(acc.begin(), acc.end(), T(0));
                  for (std::int64_t i = 0; i < s; ++i) {
                    const T* pi = p + i * sk;
                    const T* gi = doh.data() + i * dh;
                    for (std::int64_t j = 0; j < s; ++j)
                      kernels::axpy(pi[j], gi, acc.data() + j * dh, dh);
                  }
                  scatter_head_(acc.data(), gv->data(), s, d, h * dh, dh);
                }
                if (with_bias && gvb)
                  for (std::int64_t i = 0; i < s; ++i)
                    kernels::axpy(p[i * sk + s], doh.data() + i * dh,
                                  gvb->data() + h * dh, dh);
                // softmax backward rows
                for (std::int64_t i = 0; i < s; ++i) {
                  const T* pi = p + i * sk;
                  const T* dpi = dp.data() + i * sk;
                  const T dotv = kernels::dot(pi, dpi, sk);
                  T* dli = dl.data() + i * sk;
                  for (std::int64_t j = 0; j < sk; ++j)
                    dli[j] = pi[j] * (dpi[j] - dotv) * scale;
                }
                // dQ += dL K (+ bias col * k'); dK += dL^T Q; dk' += ...
                if (gq) {
                  std::fill(acc.begin(), acc.end(), T(0));
                  for (std::int64_t i = 0; i < s; ++i) {
                    const T* dli = dl.data() + i * sk;
                    T* ai = acc.data() + i * dh;
                    for (std::int64_t j = 0; j < s; ++j)
                      kernels::axpy(dli[j], kh2.data() + j * dh, ai, dh);
                    if (with_bias)
                      kernels::axpy(dli[s], kb_data->data() + h * dh, ai, dh);
                  }
                  scatter_head_(acc.data(), gq->data(), s, d, h * dh, dh);
                }
                if (gk) {
                  std::fill(acc.begin(), acc.end(), T(0));
                  for (std::int64_t i = 0; i < s; ++i) {
                    const T* dli = dl.data() + i * sk;
                    const T* qi = qh2.data() + i * dh;
                    for (std::int64_t j = 0; j < s; ++j)
                      kernels::axpy(dli[j], qi, acc.data() + j * dh, dh);
                  }
                  scatter_head_(acc.data(), gk->data(), s, d, h * dh, dh);
                }
                if (with_bias && gkb)
                  for (std::int64_t i = 0; i < s; ++i)
                    kernels::axpy(dl[i * sk + s], qh2.data() + i * dh,
                                  gkb->data() + h * dh, dh);
              }
            });
      }
    }
    return out;
  }

  // ---- forward-only ------------------------------------------------------

  // Separable Catmull-Rom (a = -0.5) resize of an [h, w, d] map, edge
  // clamped, half-pixel center alignment. Teacher-path only, not traced.
  Tensor<T> bicubic_resize(const Tensor<T>& x, std::int64_t oh,
                           std::int64_t ow) {
    require_rank(x, 3, "bicubic_resize");
    const std::int64_t h = x.shape[0], w = x.shape[1], d = x.shape[2];
    if (h < 2 || w < 2)
      throw ShapeError("bicubic_resize: input grid must be at least 2x2, got " +
                       shape_str(x.shape));
    if (oh < 1 || ow < 1)
      throw ShapeError("bicubic_resize: target extents must be positive");
    if (oh == h && ow == w) {
      Tensor<T> out = Tensor<T>::zeros(x.shape);
      std::copy(x.data_->begin(), x.data_->end(), out.data_->begin());
      return out;
    }
    // horizontal pass then vertical pass
    Tensor<T> mid = Tensor<T>::zeros({h, ow, d});
    resample_axis_(x.data(), mid.data(), h, w, d, ow, /*vertical=*/false);
    Tensor<T> out = Tensor<T>::zeros({oh, ow, d});
    resample_axis_(mid.data(), out.data(), h, ow, d, oh, /*vertical=*/true);
    return out;
  }

 private:
  std::vector<Node> nodes_;
  bool recording_;

  static T sigmoid_(T x) { return T(1) / (T(1) + std::exp(-x)); }

  static void gather_head_(const T* src, T* dst, std::int64_t s,
                           std::int64_t d, std::int64_t off, std::int64_t dh) {
    for (std::int64_t i = 0; i < s; ++i)
      std::copy(src + i * d + off, src + i * d + off + dh, dst + i * dh);
  }

  static void scatter_head_(const T* src, T* dst, std::int64_t s,
                            std::int64_t d, std::int64_t off,
                            std::int64_t dh) {
    for (std::int64_t i = 0; i < s; ++i)
      for (std::int64_t j = 0; j < dh; ++j)
        dst[i * d + off + j] += src[i * dh + j];
  }

  static void rope_apply_(const T* src, T* dst, const RopeTable<T>& tab,
                          std::int64_t s, std::int64_t heads, std::int64_t dh,
                          bool /*unused*/) {
    const std::int64_t pairs = dh / 2;
    const std::int64_t d = heads * dh;
    for (std::int64_t i = 0; i < s; ++i) {
      const T* cv = tab.cosv.data() + i * pairs;
      const T* sv = tab.sinv.data() + i * pairs;
      for (std::int64_t h = 0; h < heads; ++h) {
        const T* xi = src + i * d + h * dh;
        T* oi = dst + i * d + h * dh;
        for (std::int64_t t = 0; t < pairs; ++t) {
          const T e = xi[2 * t], o = xi[2 * t + 1];
          oi[2 * t] = cv[t] * e - sv[t] * o;
          oi[2 * t + 1] = sv[t] * e + cv[t] * o;
        }
      }
    }
  }

  static T cubic_weight_(T t) {
    const T a = (T)-0.5;
    const T at = std::abs(t);
    if (at <= T(1)) return ((a + T(2)) * at - (a + T(3))) * at * at + T(1);
    if (at < T(2))
      return a * (((at - T(5)) * at + T(8)) * at - T(4));
    return T(0);
  }

  static void resample_axis_(const T* src, T* dst, std::int64_t h,
                             std::int64_t w, std::int64_t d, std::int64_t out_n,
                             bool vertical) {
    const std::int64_t in_n = vertical ? h : w;
    const T ratio = (T)in_n / (T)out_n;
    for (std::int64_t o = 0; o < out_n; ++o) {
      const T sc = ((T)o + (T)0.5) * ratio - (T)0.5;
      const std::int64_t base = (std::int64_t)std::floor(sc);
      const T f = sc - (T)base;
      T wts[4];
      for (int t = 0; t < 4; ++t) wts[t] = cubic_weight_((T)(t - 1) - f);
      std::int64_t idx[4];
      for (int t = 0; t < 4; ++t)
        idx[t] = std::clamp<std::int64_t>(base + t - 1, 0, in_n - 1);
      if (vertical) {
        for (std::int64_t x = 0; x < w; ++x)
          for (std::int64_t c = 0; c < d; ++c) {
            T acc = 0;
            for (int t = 0; t < 4; ++t)
              acc += wts[t] * src[(idx[t] * w + x) * d + c];
            dst[(o * w + x) * d + c] = acc;
          }
      } else {
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t c = 0; c < d; ++c) {
            T acc = 0;
            for (int t = 0; t < 4; ++t)
              acc += wts[t] * src[(y * w + idx[t]) * d + c];
            dst[(y * out_n + o) * d + c] = acc;
          }
      }
    }
  }

  static void require_rank(const Tensor<T>& t, int rank, const char* op) {
    if (t.rank() != rank)
      throw ShapeError(std::string(op) + ": expected rank " +
                       std::to_string(rank) + ", got " + shape_str(t.shape));
  }

  // Gradient buffer of an input if it participates in differentiation.
  std::shared_ptr<std::vector<T>> grad_of(const Tensor<T>& t) {
    if (!recording_) return nullptr;
    if (t.node >= 0 || t.requires_grad) {
      if (!t.grad_)
        throw std::logic_error(
            "tensor requires grad but has no gradient buffer; create "
            "parameters through Tensor::param");
      return t.grad_;
    }
    return nullptr;
  }

  int ensure_node(const Tensor<T>& t) {
    if (!recording_) return -1;
    if (t.node >= 0) return t.node;
    if (!t.requires_grad) return -1;
    if (!t.grad_)
      throw std::logic_error("parameter without gradient buffer");
    Node n;
    n.out_grad = t.grad_;
    n.is_leaf = true;
    nodes_.push_back(std::move(n));
    return (int)nodes_.size() - 1;
  }

  void alloc_grad(Tensor<T>& out) {
    if (!out.grad_)
      out.grad_ = std::make_shared<std::vector<T>>(out.data_->size(), T(0));
  }

 public:
  // Op-output factory: gradient storage is allocated up front on recording
  // tapes so backward closures can capture it by value.
  Tensor<T> out_like(Shape s) {
    Tensor<T> t = Tensor<T>::zeros(std::move(s));
    if (recording_)
      t.grad_ = std::make_shared<std::vector<T>>(t.data_->size(), T(0));
    return t;
  }

 private:

  void push_node(Tensor<T>& out, std::array<int, 4> parents,
                 std::function<void()> bw) {
    Node n;
    n.backward = std::move(bw);
    n.out_grad = out.grad_;
    n.parents = parents;
    nodes_.push_back(std::move(n));
    out.node = (int)nodes_.size() - 1;
  }

  template <typename F>
  void record1(Tensor<T>& out, const Tensor<T>& a, F bw) {
    if (!recording_) return;
    const int pa = ensure_node(a);
    if (pa < 0) return;
    alloc_grad(out);
    push_node(out, {pa, -1, -1, -1}, std::move(bw));
  }

  template <typename F>
  void record2(Tensor<T>& out, const Tensor<T>& a, const Tensor<T>& b, F bw) {
    if (!recording_) return;
    const int pa = ensure_node(a), pb = ensure_node(b);
    if (pa < 0 && pb < 0) return;
    alloc_grad(out);
    push_node(out, {pa, pb, -1, -1}, std::move(bw));
  }

  template <typename F>
  void record3(Tensor<T>& out, const Tensor<T>& a, const Tensor<T>& b,
               const Tensor<T>& c, F bw) {
    if (!recording_) return;
    const int pa = ensure_node(a), pb = ensure_node(b), pc = ensure_node(c);
    if (pa < 0 && pb < 0 && pc < 0) return;
    alloc_grad(out);
    push_node(out, {pa, pb, pc, -1}, std::move(bw));
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace minidino
