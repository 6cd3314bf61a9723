// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "minidino/kernels.hpp"
#include "minidino/rng.hpp"

using namespace minidino;
namespace kn = minidino::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = (float)rng.uniform(-2.0, 2.0);
  return v;
}

bool close(float a, float b, float rel = 1e-5f, float abs = 1e-6f) {
  return std::fabs(a - b) <= abs + rel * std::max(std::fabs(a), std::fabs(b));
}

struct BackendGuard {
  kn::Backend saved;
  BackendGuard() : saved(kn::active()) {}
  ~BackendGuard() { kn::select(saved); }
};

}  // namespace

TEST_CASE("detect and select") {
  BackendGuard guard;
  kn::select(kn::Backend::scalar);
  CHECK(kn::active() == kn::Backend::scalar);
  CHECK(std::string(kn::ops().name) == "scalar");
  kn::Backend best = kn::detect();
  kn::select(best);
  CHECK(kn::active() == best);

  kn::Backend b;
  bool is_auto;
  CHECK(kn::parse_backend("auto", b, is_auto));
  CHECK(is_auto);
  CHECK(kn::parse_backend("scalar", b, is_auto));
  CHECK(b == kn::Backend::scalar);
  CHECK_FALSE(kn::parse_backend("sse9", b, is_auto));
}

TEST_CASE("simd variants agree with scalar reference") {
  BackendGuard guard;
  const kn::Backend best = kn::detect();
  if (best == kn::Backend::scalar) {
    MESSAGE("no SIMD backend on this CPU, skipping equivalence");
    return;
  }
  Rng rng(7);
  // deliberately awkward lengths to cover the tail loops
  for (std::size_t n : {1u, 7u, 8u, 9u, 31u, 64u, 100u, 257u}) {
    auto a = random_vec(n, rng), b = random_vec(n, rng);

    kn::select(kn::Backend::scalar);
    auto c_ref = a;
    kn::ops().vadd(a.data(), b.data(), c_ref.data(), n);
    float dot_ref = kn::ops().dot(a.data(), b.data(), n);
    float sum_ref = kn::ops().reduce_sum(a.data(), n);
    auto y_ref = b;
    kn::ops().axpy(0.37f, a.data(), y_ref.data(), n);
    auto e_ref = a;
    kn::ops().ema(0.9f, e_ref.data(), b.data(), n);

    kn::select(best);
    auto c_simd = a;
    kn::ops().vadd(a.data(), b.data(), c_simd.data(), n);
    float dot_simd = kn::ops().dot(a.data(), b.data(), n);
    float sum_simd = kn::ops().reduce_sum(a.data(), n);
    auto y_simd = b;
    kn::ops().axpy(0.37f, a.data(), y_simd.data(), n);
    auto e_simd = a;
    kn::ops().ema(0.9f, e_simd.data(), b.data(), n);

    for (std::size_t i = 0; i < n; ++i) {
      CHECK(c_ref[i] == c_simd[i]);  // pure elementwise adds round identically
      CHECK(close(y_ref[i], y_simd[i]));
      CHECK(close(e_ref[i], e_simd[i]));
    }
    CHECK(close(dot_ref, dot_simd, 1e-4f));
    CHECK(close(sum_ref, sum_simd, 1e-4f));
  }
}

TEST_CASE("gemm variants agree across backends") {
  BackendGuard guard;
  const kn::Backend best = kn::detect();
  Rng rng(11);
  for (auto [m, k, n] : std::vector<std::array<std::size_t, 3>>{
           {1, 1, 1}, {3, 5, 7}, {8, 16, 8}, {13, 64, 21}, {21, 192, 33}}) {
    auto a = random_vec(m * k, rng);
    auto b = random_vec(k * n, rng);
    auto bt = random_vec(n * k, rng);
    auto at = random_vec(k * m, rng);

    std::vector<float> nn_ref(m * n, 0.f), nt_ref(m * n, 0.f),
        tn_ref(m * n, 0.f);
    kn::ref::gemm_nn(a.data(), b.data(), nn_ref.data(), m, k, n);
    kn::ref::gemm_nt(a.data(), bt.data(), nt_ref.data(), m, k, n);
    kn::ref::gemm_tn(at.data(), b.data(), tn_ref.data(), m, k, n);

    // double-precision oracle for the nn case
    std::vector<double> ad(a.begin(), a.end()), bd(b.begin(), b.end()),
        cd(m * n, 0.0);
    kn::ref::gemm_nn(ad.data(), bd.data(), cd.data(), m, k, n);
    for (std::size_t i = 0; i < m * n; ++i)
      CHECK(close(nn_ref[i], (float)cd[i], 1e-4f));

    if (best == kn::Backend::scalar) continue;
    kn::select(best);
    std::vector<float> nn(m * n, 0.f), nt(m * n, 0.f), tn(m * n, 0.f);
    kn::ops().gemm_nn(a.data(), b.data(), nn.data(), m, k, n);
    kn::ops().gemm_nt(a.data(), bt.data(), nt.data(), m, k, n);
    kn::ops().gemm_tn(at.data(), b.data(), tn.data(), m, k, n);
    kn::select(kn::Backend::scalar);
    for (std::size_t i = 0; i < m * n; ++i) {
      CHECK(close(nn[i], nn_ref[i], 1e-4f));
      CHECK(close(nt[i], nt_ref[i], 1e-4f));
      CHECK(close(tn[i], tn_ref[i], 1e-4f));
    }
  }
}

TEST_CASE("fixed accumulation order is reproducible") {
  Rng rng(3);
  auto a = random_vec(1023, rng), b = random_vec(1023, rng);
  const float d1 = kn::ops().dot(a.data(), b.data(), a.size());
  const float d2 = kn::ops().dot(a.data(), b.data(), a.size());
  CHECK(d1 == d2);
  const float s1 = kn::ops().reduce_sum(a.data(), a.size());
  const float s2 = kn::ops().reduce_sum(a.data(), a.size());
  CHECK(s1 == s2);
}
