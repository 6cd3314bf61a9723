// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "minidino/tensor.hpp"
#include "minidino/vit.hpp"

namespace minidino {

// Projection head: 3-layer SiLU MLP into a bottleneck, L2-normalized, then
// cosine logits against a bank of L2-normalized prototype vectors. The
// prototype rows are renormalized after every optimizer update.
template <typename T>
struct ProjectionHead {
  Tensor<T> w1, b1, w2, b2, w3, b3;
  Tensor<T> prototypes;  // [K, bottleneck]

  static ProjectionHead init(int in_dim, int hidden, int bottleneck,
                             int prototype_count, Rng& rng) {
    if (prototype_count < 2)
      throw ConfigError("projection head: prototype count must be >= 2");
    ProjectionHead h;
    const T w0 = (T)0.02;
    h.w1 = Tensor<T>::param({in_dim, hidden}, rng, w0);
    h.b1 = Tensor<T>::param_zeros({hidden});
    h.w2 = Tensor<T>::param({hidden, hidden}, rng, w0);
    h.b2 = Tensor<T>::param_zeros({hidden});
    h.w3 = Tensor<T>::param({hidden, bottleneck}, rng, w0);
    h.b3 = Tensor<T>::param_zeros({bottleneck});
    h.prototypes = Tensor<T>::param({prototype_count, bottleneck}, rng, (T)1);
    h.renormalize_prototypes();
    return h;
  }

  int prototype_count() const { return (int)prototypes.shape[0]; }

  Tensor<T> logits(Tape<T>& tape, const Tensor<T>& x) const {
    Tensor<T> h = tape.silu(tape.add_rowvec(tape.matmul(x, w1), b1));
    h = tape.silu(tape.add_rowvec(tape.matmul(h, w2), b2));
    Tensor<T> z = tape.add_rowvec(tape.matmul(h, w3), b3);
    z = tape.l2_normalize(z, (T)1e-6);
    return tape.matmul(z, tape.transpose(prototypes));
  }

  void renormalize_prototypes() {
    const std::int64_t k = prototypes.shape[0], d = prototypes.shape[1];
    for (std::int64_t i = 0; i < k; ++i) {
      T* row = prototypes.data() + i * d;
      T nrm = std::sqrt(kernels::dot(row, row, d));
      if (nrm < (T)1e-12) nrm = (T)1;
      for (std::int64_t j = 0; j < d; ++j) row[j] /= nrm;
    }
  }

  std::vector<ParamRef<T>> params(const std::string& prefix, int layer) {
    return {{prefix + "/w1", &w1, layer}, {prefix + "/b1", &b1, layer},
            {prefix + "/w2", &w2, layer}, {prefix + "/b2", &b2, layer},
            {prefix + "/w3", &w3, layer}, {prefix + "/b3", &b3, layer},
            {prefix + "/prototypes", &prototypes, layer}};
  }
};

}  // namespace minidino
