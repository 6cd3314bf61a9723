// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

namespace minidino {

// Deterministic splittable RNG. One master seed drives the whole system;
// every consumer derives an independent stream keyed by (purpose, index),
// where index is typically the training step or the sample id. Streams are
// stateless with respect to each other, which is what makes
// checkpoint/resume bit-exact: the randomness of step k never depends on
// how many steps ran before it.
//
// Core generator is splitmix64; uniform doubles take the top 53 bits, and
// normals use Box-Muller. No libstdc++ distributions are involved, so the
// byte stream is identical across standard libraries.
struct Rng {
  std::uint64_t state;

  explicit Rng(std::uint64_t seed) : state(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Log-uniform on [lo, hi], lo > 0.
  double log_uniform(double lo, double hi) {
    return std::exp(uniform(std::log(lo), std::log(hi)));
  }

  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(6.283185307179586476925286766559 * u2);
  }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t randint(std::uint64_t n) { return next_u64() % n; }

  bool bernoulli(double p) { return uniform() < p; }

  static std::uint64_t mix(std::uint64_t x) {
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  static std::uint64_t derive(std::uint64_t master, std::uint64_t purpose,
                              std::uint64_t index) {
    return mix(mix(master + 0x9e3779b97f4a7c15ULL * (purpose + 1)) ^
               mix(index + 0x632be59bd9b4e019ULL));
  }
};

// Stream purposes. Values are part of the checkpoint-compatibility contract:
// renumbering them changes every derived stream.
enum class Stream : std::uint64_t {
  init = 1,        // parameter initialization
  dataset = 2,     // synthetic image generation (indexed by sample id)
  mixer = 3,       // data-mix part selection (indexed by step)
  crops = 4,       // crop geometry + photometric jitter (indexed by step)
  masks = 5,       // iBOT mask plans (indexed by step)
  rope_jitter = 6, // RoPE box jitter scales (indexed by step)
  drop_path = 7,   // stochastic depth (indexed by step)
  probe = 8,       // probe splits and shuffles
  curation = 9,    // k-means init and balanced sampling
  resolution = 10, // mixed-resolution triple draws (indexed by step)
};

inline Rng rng_at(std::uint64_t master, Stream s, std::uint64_t index = 0) {
  return Rng(Rng::derive(master, static_cast<std::uint64_t>(s), index));
}

}  // namespace minidino
