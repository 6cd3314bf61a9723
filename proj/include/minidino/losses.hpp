// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "minidino/tensor.hpp"

namespace minidino {

enum class Phase { pretrain, refine, adapt, distill };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::pretrain:
      return "pretrain";
    case Phase::refine:
      return "refine";
    case Phase::adapt:
      return "adapt";
    case Phase::distill:
      return "distill";
  }
  return "?";
}

inline Phase parse_phase(const std::string& s) {
  if (s == "pretrain") return Phase::pretrain;
  if (s == "refine") return Phase::refine;
  if (s == "adapt") return Phase::adapt;
  if (s == "distill") return Phase::distill;
  throw ConfigError("unknown phase '" + s + "'");
}

struct LossWeights {
  double dino = 1.0;
  double ibot = 1.0;  // fixed to 1 in every profile
  double koleo = 0.1;
  double gram = 0.0;

  static LossWeights pretrain_profile() { return {1.0, 1.0, 0.1, 0.0}; }
  static LossWeights refine_profile(double w_gram = 2.0) {
    return {1.0, 1.0, 0.1, w_gram};
  }
  static LossWeights distill_profile() { return {1.0, 1.0, 0.1, 0.0}; }
};

struct LossReport {
  std::int64_t step = 0;
  double dino = 0, ibot = 0, koleo = 0, gram = 0, total = 0;
  double lr = 0, teacher_temp = 0;
  std::int64_t masked_positions = 0;

  static const char* csv_header() {
    return "step,dino,ibot,koleo,gram,total,lr,teacher_temp";
  }
  std::string csv_row() const {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g",
                  (long long)step, dino, ibot, koleo, gram, total, lr,
                  teacher_temp);
    return buf;
  }
};

// Alternating column/row normalization of exp(scores / temperature), ending
// on rows: rows sum to 1, column mass converges toward B/K. Teacher-side
// target construction, never traced.
template <typename T>
Tensor<T> sinkhorn_knopp(const Tensor<T>& scores, int n_iter, T temperature) {
  if (scores.rank() != 2 || scores.shape[0] < 1 || scores.shape[1] < 1)
    throw ShapeError("sinkhorn_knopp: expected [B,K] scores, got " +
                     shape_str(scores.shape));
  if (n_iter < 1) throw ConfigError("sinkhorn_knopp: n_iter must be >= 1");
  if (temperature <= (T)0)
    throw ConfigError("sinkhorn_knopp: temperature must be positive");
  if (scores.has_nonfinite())
    throw NumericFault("sinkhorn_knopp: non-finite scores");
  const std::int64_t b = scores.shape[0], k = scores.shape[1];
  Tensor<T> m = Tensor<T>::zeros(scores.shape);
  T mx = scores.at(0);
  for (std::int64_t i = 1; i < scores.numel(); ++i)
    mx = std::max(mx, scores.at(i));
  for (std::int64_t i = 0; i < scores.numel(); ++i)
    m.at(i) = std::exp((scores.at(i) - mx) / temperature);
  const T col_mass = (T)b / (T)k;
  for (int it = 0; it < n_iter; ++it) {
    for (std::int64_t j = 0; j < k; ++j) {
      T s = 0;
      for (std::int64_t i = 0; i < b; ++i) s += m.at(i, j);
      const T f = col_mass / s;
      for (std::int64_t i = 0; i < b; ++i) m.at(i, j) *= f;
    }
    for (std::int64_t i = 0; i < b; ++i) {
      T s = 0;
      for (std::int64_t j = 0; j < k; ++j) s += m.at(i, j);
      const T f = (T)1 / s;
      for (std::int64_t j = 0; j < k; ++j) m.at(i, j) *= f;
    }
  }
  return m;
}

template <typename T>
Tensor<T> mean_of_scalars(Tape<T>& tape, const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("mean_of_scalars: empty input");
  Tensor<T> acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = tape.add(acc, xs[i]);
  return tape.mul_scalar(acc, (T)1 / (T)xs.size());
}

// Mean soft cross-entropy over routed (student crop, teacher crop) pairs.
// The caller assembles the routing; gradients flow only through student
// logits (teacher probabilities are plain constants).
template <typename T>
Tensor<T> dino_loss(Tape<T>& tape,
                    const std::vector<std::pair<Tensor<T>, Tensor<T>>>& pairs,
                    T student_temp) {
  if (pairs.empty()) throw ShapeError("dino_loss: no routed pairs");
  std::vector<Tensor<T>> terms;
  for (const auto& [student_logits, teacher_probs] : pairs) {
    if (student_logits.shape != teacher_probs.shape)
      throw ShapeError("dino_loss: mismatched prototype counts, " +
                       shape_str(student_logits.shape) + " vs " +
                       shape_str(teacher_probs.shape));
    terms.push_back(tape.soft_cross_entropy(student_logits,
                                            teacher_probs.detached(),
                                            student_temp));
  }
  return mean_of_scalars(tape, terms);
}

// Cross-entropy at the masked patch positions only. An empty mask set
// contributes exactly zero (with the position count reported separately by
// the caller).
template <typename T>
Tensor<T> ibot_loss(Tape<T>& tape, const Tensor<T>& student_masked_logits,
                    const Tensor<T>& teacher_masked_probs, T student_temp) {
  if (student_masked_logits.numel() == 0) return tape.out_like({1});
  if (student_masked_logits.shape != teacher_masked_probs.shape)
    throw ShapeError("ibot_loss: mismatched prototype counts, " +
                     shape_str(student_masked_logits.shape) + " vs " +
                     shape_str(teacher_masked_probs.shape));
  return tape.soft_cross_entropy(student_masked_logits,
                                 teacher_masked_probs.detached(),
                                 student_temp);
}

// Nearest-neighbor differential-entropy estimator over L2-normalized
// features, applied to contiguous sub-batches of group_size (a ragged final
// group is kept when it still holds >= 2 samples). Minimizing the loss
// spreads points apart on the sphere.
template <typename T>
Tensor<T> koleo_loss(Tape<T>& tape, const Tensor<T>& features,
                     std::int64_t group_size = 16, T eps = (T)1e-8) {
  if (features.rank() != 2 || features.shape[0] < 2)
    throw ShapeError("koleo_loss: need at least 2 samples, got " +
                     shape_str(features.shape));
  const std::int64_t n = features.shape[0], d = features.shape[1];
  Tensor<T> f = tape.l2_normalize(features, (T)1e-8);
  std::vector<Tensor<T>> group_terms;
  for (std::int64_t g0 = 0; g0 < n; g0 += group_size) {
    const std::int64_t m = std::min(group_size, n - g0);
    if (m < 2) break;
    std::vector<std::int64_t> self_idx, nn_idx;
    for (std::int64_t i = 0; i < m; ++i) {
      const T* xi = f.data() + (g0 + i) * d;
      T best = (T)0;
      std::int64_t best_j = -1;
      for (std::int64_t j = 0; j < m; ++j) {
        if (j == i) continue;
        const T* xj = f.data() + (g0 + j) * d;
        T dist2 = 0;
        for (std::int64_t c = 0; c < d; ++c) {
          const T dv = xi[c] - xj[c];
          dist2 += dv * dv;
        }
        if (best_j < 0 || dist2 < best) {
          best = dist2;
          best_j = j;
        }
      }
      self_idx.push_back(g0 + i);
      nn_idx.push_back(g0 + best_j);
    }
    Tensor<T> xs = tape.gather_rows(f, self_idx);
    Tensor<T> xn = tape.gather_rows(f, nn_idx);
    Tensor<T> diff = tape.sub(xs, xn);
    Tensor<T> dist = tape.sqrt(tape.sum_axis(tape.mul(diff, diff), Axis::cols));
    Tensor<T> logd = tape.log(tape.add_scalar(dist, eps));
    group_terms.push_back(tape.neg(tape.mean_all(logd)));
  }
  if (group_terms.empty())
    throw ShapeError("koleo_loss: no group with >= 2 samples");
  return mean_of_scalars(tape, group_terms);
}

// Squared Frobenius distance between the student's and the Gram teacher's
// patch Gram matrices for one image. Both inputs must be row-normalized;
// the teacher side enters as a constant.
template <typename T>
Tensor<T> gram_loss(Tape<T>& tape, const Tensor<T>& student_feats,
                    const Tensor<T>& gram_teacher_feats) {
  if (student_feats.rank() != 2 || gram_teacher_feats.rank() != 2)
    throw ShapeError("gram_loss: expected [P,d] feature matrices");
  if (student_feats.shape[0] != gram_teacher_feats.shape[0])
    throw ShapeError(
        "gram_loss: patch count mismatch " + shape_str(student_feats.shape) +
        " vs " + shape_str(gram_teacher_feats.shape) +
        "; bicubic-downsample the high-resolution teacher features to the "
        "student grid first");
  // teacher Gram, no tracing
  Tape<T> off(false);
  Tensor<T> xg = gram_teacher_feats.detached();
  Tensor<T> gg = off.matmul(xg, off.transpose(xg));
  Tensor<T> gs = tape.matmul(student_feats, tape.transpose(student_feats));
  Tensor<T> diff = tape.sub(gs, gg);
  return tape.sum_all(tape.mul(diff, diff));
}

// Weighted sum per the phase profile. The refinement phase requires a Gram
// term; a missing Gram teacher is a configuration error.
template <typename T>
Tensor<T> composite_loss(Tape<T>& tape, const Tensor<T>& dino,
                         const Tensor<T>& ibot, const Tensor<T>& koleo,
                         const Tensor<T>* gram, const LossWeights& w,
                         Phase phase) {
  if ((phase == Phase::refine || phase == Phase::adapt) && !gram)
    throw ConfigError(std::string(phase_name(phase)) +
                      " requires a Gram teacher");
  Tensor<T> total = tape.mul_scalar(dino, (T)w.dino);
  total = tape.add(total, tape.mul_scalar(ibot, (T)w.ibot));
  total = tape.add(total, tape.mul_scalar(koleo, (T)w.koleo));
  if (gram) total = tape.add(total, tape.mul_scalar(*gram, (T)w.gram));
  return total;
}

}  // namespace minidino
