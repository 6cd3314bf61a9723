// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <type_traits>

// Runtime-dispatched f32 arithmetic kernels. Every entry point has a scalar
// reference implementation plus SIMD variants (AVX2 on x86-64, NEON on
// aarch64); the active backend is chosen once per process, either
// automatically from CPU capabilities or explicitly via configuration.
// Reductions keep a fixed accumulation order per backend so results are
// bit-reproducible across runs on the same machine and backend.
namespace minidino::kernels {

enum class Backend { scalar, avx2, neon };

struct Ops {
  const char* name;
  // y[i] += a * x[i]
  void (*axpy)(float a, const float* x, float* y, std::size_t n);
  // x[i] *= a
  void (*scale)(float a, float* x, std::size_t n);
  // c[i] = a[i] + b[i] / a[i] - b[i] / a[i] * b[i]
  void (*vadd)(const float* a, const float* b, float* c, std::size_t n);
  void (*vsub)(const float* a, const float* b, float* c, std::size_t n);
  void (*vmul)(const float* a, const float* b, float* c, std::size_t n);
  float (*dot)(const float* a, const float* b, std::size_t n);
  float (*reduce_sum)(const float* x, std::size_t n);
  // C[m x n] += A[m x k] * B[k x n], all row-major
  void (*gemm_nn)(const float* a, const float* b, float* c, std::size_t m,
                  std::size_t k, std::size_t n);
  // C[m x n] += A[m x k] * B[n x k]^T
  void (*gemm_nt)(const float* a, const float* b, float* c, std::size_t m,
                  std::size_t k, std::size_t n);
  // C[m x n] += A[k x m]^T * B[k x n]
  void (*gemm_tn)(const float* a, const float* b, float* c, std::size_t m,
                  std::size_t k, std::size_t n);
  // t[i] = m * t[i] + (1 - m) * s[i]
  void (*ema)(float m, float* t, const float* s, std::size_t n);
};

// Best backend supported by the executing CPU.
Backend detect();
// Select the active backend; throws std::runtime_error if unsupported here.
void select(Backend b);
Backend active();
const Ops& ops();

// Parses "scalar" / "avx2" / "neon" / "auto". Returns false on unknown names.
bool parse_backend(const std::string& name, Backend& out, bool& is_auto);
const char* backend_name(Backend b);

// Reference implementations, usable for any scalar type. The f64 gradient-
// check path always goes through these; the f32 dispatch table's scalar
// backend points at the float instantiations.
namespace ref {

template <typename T>
void axpy(T a, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
void scale(T a, T* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= a;
}

template <typename T>
void vadd(const T* a, const T* b, T* c, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) c[i] = a[i] + b[i];
}

template <typename T>
void vsub(const T* a, const T* b, T* c, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) c[i] = a[i] - b[i];
}

template <typename T>
void vmul(const T* a, const T* b, T* c, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) c[i] = a[i] * b[i];
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
T reduce_sum(const T* x, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      c[i * n + j] += dot(a + i * k, b + j * k, k);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = ap[i];
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
void ema(T m, T* t, const T* s, std::size_t n) {
  const T w = T(1) - m;
  for (std::size_t i = 0; i < n; ++i) t[i] = m * t[i] + w * s[i];
}

}  // namespace ref

// Type-generic entry points: float goes through the dispatch table, every
// other scalar type uses the reference loops.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  if constexpr (std::is_same_v<T, float>)
    ops().gemm_nn(a, b, c, m, k, n);
  else
    ref::gemm_nn(a, b, c, m, k, n);
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  if constexpr (std::is_same_v<T, float>)
    ops().gemm_nt(a, b, c, m, k, n);
  else
    ref::gemm_nt(a, b, c, m, k, n);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  if constexpr (std::is_same_v<T, float>)
    ops().gemm_tn(a, b, c, m, k, n);
  else
    ref::gemm_tn(a, b, c, m, k, n);
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  if constexpr (std::is_same_v<T, float>)
    return ops().dot(a, b, n);
  else
    return ref::dot(a, b, n);
}

template <typename T>
T reduce_sum(const T* x, std::size_t n) {
  if constexpr (std::is_same_v<T, float>)
    return ops().reduce_sum(x, n);
  else
    return ref::reduce_sum(x, n);
}

template <typename T>
void axpy(T a, const T* x, T* y, std::size_t n) {
  if constexpr (std::is_same_v<T, float>)
    ops().axpy(a, x, y, n);
  else
    ref::axpy(a, x, y, n);
}

template <typename T>
void vadd(const T* a, const T* b, T* c, std::size_t n) {
  if constexpr (std::is_same_v<T, float>)
    ops().vadd(a, b, c, n);
  else
    ref::vadd(a, b, c, n);
}

template <typename T>
void vsub(const T* a, const T* b, T* c, std::size_t n) {
  if constexpr (std::is_same_v<T, float>)
    ops().vsub(a, b, c, n);
  else
    ref::vsub(a, b, c, n);
}

template <typename T>
void vmul(const T* a, const T* b, T* c, std::size_t n) {
  if constexpr (std::is_same_v<T, float>)
    ops().vmul(a, b, c, n);
  else
    ref::vmul(a, b, c, n);
}

template <typename T>
void ema(T m, T* t, const T* s, std::size_t n) {
  if constexpr (std::is_same_v<T, float>)
    ops().ema(m, t, s, n);
  else
    ref::ema(m, t, s, n);
}

template <typename T>
void scale(T a, T* x, std::size_t n) {
  if constexpr (std::is_same_v<T, float>)
    ops().scale(a, x, n);
  else
    ref::scale(a, x, n);
}

}  // namespace minidino::kernels
