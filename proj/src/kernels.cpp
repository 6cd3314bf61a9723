// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#include "minidino/kernels.hpp"

#include <cstring>
#include <stdexcept>

#if defined(__x86_64__) || defined(_M_X64)
#define MINIDINO_X86 1
#include <immintrin.h>
#else
#define MINIDINO_X86 0
#endif

#if defined(__aarch64__) || defined(_M_ARM64)
#define MINIDINO_NEON 1
#include <arm_neon.h>
#else
#define MINIDINO_NEON 0
#endif

namespace minidino::kernels {

namespace {

const Ops kScalarOps = {
    "scalar",
    &ref::axpy<float>,
    &ref::scale<float>,
    &ref::vadd<float>,
    &ref::vsub<float>,
    &ref::vmul<float>,
    &ref::dot<float>,
    &ref::reduce_sum<float>,
    &ref::gemm_nn<float>,
    &ref::gemm_nt<float>,
    &ref::gemm_tn<float>,
    &ref::ema<float>,
};

#if MINIDINO_X86

#define MD_AVX2 __attribute__((target("avx2,fma")))

MD_AVX2 inline float hsum256(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 sh = _mm_movehl_ps(lo, lo);
  lo = _mm_add_ps(lo, sh);
  sh = _mm_shuffle_ps(lo, lo, 0x1);
  lo = _mm_add_ss(lo, sh);
  return _mm_cvtss_f32(lo);
}

MD_AVX2 void axpy_avx2(float a, const float* x, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vy = _mm256_loadu_ps(y + i);
    vy = _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), vy);
    _mm256_storeu_ps(y + i, vy);
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

MD_AVX2 void scale_avx2(float a, float* x, std::size_t n) {
  const __m256 va = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(x + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) x[i] *= a;
}

MD_AVX2 void vadd_avx2(const float* a, const float* b, float* c,
                       std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(
        c + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) c[i] = a[i] + b[i];
}

MD_AVX2 void vsub_avx2(const float* a, const float* b, float* c,
                       std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(
        c + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) c[i] = a[i] - b[i];
}

MD_AVX2 void vmul_avx2(const float* a, const float* b, float* c,
                       std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(
        c + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) c[i] = a[i] * b[i];
}

MD_AVX2 float dot_avx2(const float* a, const float* b, std::size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i),
                           acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8),
                           _mm256_loadu_ps(b + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8)
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i),
                           acc0);
  float s = hsum256(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

MD_AVX2 float reduce_sum_avx2(const float* x, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  float s = hsum256(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

MD_AVX2 void gemm_nn_avx2(const float* a, const float* b, float* c,
                          std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    float* ci = c + i * n;
    const float* ai = a + i * k;
    std::size_t p = 0;
    for (; p + 2 <= k; p += 2) {
      const __m256 a0 = _mm256_set1_ps(ai[p]);
      const __m256 a1 = _mm256_set1_ps(ai[p + 1]);
      const float* b0 = b + p * n;
      const float* b1 = b0 + n;
      std::size_t j = 0;
      for (; j + 8 <= n; j += 8) {
        __m256 vc = _mm256_loadu_ps(ci + j);
        vc = _mm256_fmadd_ps(a0, _mm256_loadu_ps(b0 + j), vc);
        vc = _mm256_fmadd_ps(a1, _mm256_loadu_ps(b1 + j), vc);
        _mm256_storeu_ps(ci + j, vc);
      }
      for (; j < n; ++j) ci[j] += ai[p] * b0[j] + ai[p + 1] * b1[j];
    }
    for (; p < k; ++p) axpy_avx2(ai[p], b + p * n, ci, n);
  }
}

MD_AVX2 void gemm_nt_avx2(const float* a, const float* b, float* c,
                          std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* ai = a + i * k;
    float* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += dot_avx2(ai, b + j * k, k);
  }
}

MD_AVX2 void gemm_tn_avx2(const float* a, const float* b, float* c,
                          std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const float* ap = a + p * m;
    const float* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) axpy_avx2(ap[i], bp, c + i * n, n);
  }
}

MD_AVX2 void ema_avx2(float m, float* t, const float* s, std::size_t n) {
  const __m256 vm = _mm256_set1_ps(m);
  const __m256 vw = _mm256_set1_ps(1.0f - m);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vt = _mm256_mul_ps(vm, _mm256_loadu_ps(t + i));
    vt = _mm256_fmadd_ps(vw, _mm256_loadu_ps(s + i), vt);
    _mm256_storeu_ps(t + i, vt);
  }
  const float w = 1.0f - m;
  for (; i < n; ++i) t[i] = m * t[i] + w * s[i];
}

const Ops kAvx2Ops = {
    "avx2",         axpy_avx2, scale_avx2,   vadd_avx2,    vsub_avx2,
    vmul_avx2,      dot_avx2,  reduce_sum_avx2, gemm_nn_avx2, gemm_nt_avx2,
    gemm_tn_avx2,   ema_avx2,
};

#endif  // MINIDINO_X86

#if MINIDINO_NEON

inline float hsum128(float32x4_t v) { return vaddvq_f32(v); }

void axpy_neon(float a, const float* x, float* y, std::size_t n) {
  const float32x4_t va = vdupq_n_f32(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    vst1q_f32(y + i, vfmaq_f32(vld1q_f32(y + i), va, vld1q_f32(x + i)));
  for (; i < n; ++i) y[i] += a * x[i];
}

void scale_neon(float a, float* x, std::size_t n) {
  const float32x4_t va = vdupq_n_f32(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(x + i, vmulq_f32(va, vld1q_f32(x + i)));
  for (; i < n; ++i) x[i] *= a;
}

void vadd_neon(const float* a, const float* b, float* c, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    vst1q_f32(c + i, vaddq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  for (; i < n; ++i) c[i] = a[i] + b[i];
}

void vsub_neon(const float* a, const float* b, float* c, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    vst1q_f32(c + i, vsubq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  for (; i < n; ++i) c[i] = a[i] - b[i];
}

void vmul_neon(const float* a, const float* b, float* c, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    vst1q_f32(c + i, vmulq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  for (; i < n; ++i) c[i] = a[i] * b[i];
}

float dot_neon(const float* a, const float* b, std::size_t n) {
  float32x4_t acc = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    acc = vfmaq_f32(acc, vld1q_f32(a + i), vld1q_f32(b + i));
  float s = hsum128(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

float reduce_sum_neon(const float* x, std::size_t n) {
  float32x4_t acc = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = vaddq_f32(acc, vld1q_f32(x + i));
  float s = hsum128(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

void gemm_nn_neon(const float* a, const float* b, float* c, std::size_t m,
                  std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    float* ci = c + i * n;
    const float* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) axpy_neon(ai[p], b + p * n, ci, n);
  }
}

void gemm_nt_neon(const float* a, const float* b, float* c, std::size_t m,
                  std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* ai = a + i * k;
    float* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += dot_neon(ai, b + j * k, k);
  }
}

void gemm_tn_neon(const float* a, const float* b, float* c, std::size_t m,
                  std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const float* ap = a + p * m;
    const float* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) axpy_neon(ap[i], bp, c + i * n, n);
  }
}

void ema_neon(float m, float* t, const float* s, std::size_t n) {
  const float32x4_t vm = vdupq_n_f32(m);
  const float32x4_t vw = vdupq_n_f32(1.0f - m);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    float32x4_t vt = vmulq_f32(vm, vld1q_f32(t + i));
    vt = vfmaq_f32(vt, vw, vld1q_f32(s + i));
    vst1q_f32(t + i, vt);
  }
  const float w = 1.0f - m;
  for (; i < n; ++i) t[i] = m * t[i] + w * s[i];
}

const Ops kNeonOps = {
    "neon",         axpy_neon, scale_neon,   vadd_neon,    vsub_neon,
    vmul_neon,      dot_neon,  reduce_sum_neon, gemm_nn_neon, gemm_nt_neon,
    gemm_tn_neon,   ema_neon,
};

#endif  // MINIDINO_NEON

const Ops* g_active = &kScalarOps;
Backend g_backend = Backend::scalar;

bool supported(Backend b) {
  switch (b) {
    case Backend::scalar:
      return true;
    case Backend::avx2:
#if MINIDINO_X86
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Backend::neon:
      return MINIDINO_NEON != 0;
  }
  return false;
}

struct AutoInit {
  AutoInit() { select(detect()); }
};
AutoInit g_auto_init;

}  // namespace

Backend detect() {
  if (supported(Backend::avx2)) return Backend::avx2;
  if (supported(Backend::neon)) return Backend::neon;
  return Backend::scalar;
}

void select(Backend b) {
  if (!supported(b))
    throw std::runtime_error(std::string("kernel backend not supported: ") +
                             backend_name(b));
  g_backend = b;
  switch (b) {
#if MINIDINO_X86
    case Backend::avx2:
      g_active = &kAvx2Ops;
      return;
#endif
#if MINIDINO_NEON
    case Backend::neon:
      g_active = &kNeonOps;
      return;
#endif
    default:
      g_active = &kScalarOps;
      return;
  }
}

Backend active() { return g_backend; }

const Ops& ops() { return *g_active; }

const char* backend_name(Backend b) {
  switch (b) {
    case Backend::scalar:
      return "scalar";
    case Backend::avx2:
      return "avx2";
    case Backend::neon:
      return "neon";
  }
  return "?";
}

bool parse_backend(const std::string& name, Backend& out, bool& is_auto) {
  is_auto = false;
  if (name == "auto") {
    is_auto = true;
    out = detect();
    return true;
  }
  if (name == "scalar") {
    out = Backend::scalar;
    return true;
  }
  if (name == "avx2") {
    out = Backend::avx2;
    return true;
  }
  if (name == "neon") {
    out = Backend::neon;
    return true;
  }
  return false;
}

}  // namespace minidino::kernels
