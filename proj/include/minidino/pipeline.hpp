// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "minidino/data.hpp"
#include "minidino/heads.hpp"
#include "minidino/losses.hpp"
#include "minidino/vit.hpp"

namespace minidino {

// Student-side trainables: backbone plus the two dedicated projection heads.
// The EMA teacher is a second SslModel with the same tree.
template <typename T>
struct SslModel {
  ViTState<T> backbone;
  ProjectionHead<T> dino_head;
  ProjectionHead<T> ibot_head;

  static SslModel init(const ViTConfig& vit, int head_hidden,
                       int head_bottleneck, int dino_prototypes,
                       int ibot_prototypes, Rng& rng) {
    SslModel m{ViTState<T>::init(vit, rng),
               ProjectionHead<T>::init(vit.embed_dim, head_hidden,
                                       head_bottleneck, dino_prototypes, rng),
               ProjectionHead<T>::init(vit.embed_dim, head_hidden,
                                       head_bottleneck, ibot_prototypes,
                                       rng)};
    return m;
  }

  std::vector<ParamRef<T>> params() {
    auto out = backbone.params();
    const int top = backbone.cfg.depth;
    for (auto& p : dino_head.params("dino_head", top)) out.push_back(p);
    for (auto& p : ibot_head.params("ibot_head", top)) out.push_back(p);
    return out;
  }

  void renormalize_prototypes() {
    dino_head.renormalize_prototypes();
    ibot_head.renormalize_prototypes();
  }
};

struct PipelineConfig {
  Phase phase = Phase::pretrain;
  LossWeights weights = LossWeights::pretrain_profile();
  double student_temp = 0.1;
  double teacher_temp = 0.04;
  int sinkhorn_iters = 3;
  int koleo_group = 16;
};

template <typename T>
struct ForwardResult {
  Tensor<T> total;  // traced scalar
  LossReport report;
};

template <typename T>
Tensor<T> cast_tensor(const TensorF& x) {
  if constexpr (std::is_same_v<T, float>) {
    return x;
  } else {
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) out.at(i) = (T)x.at(i);
    return out;
  }
}

// Gram teacher features for one global crop: forward the higher-resolution
// copy of the crop, bicubic-downsample the patch map to the student grid,
// and row-normalize. Pure teacher path, never traced.
template <typename T>
Tensor<T> gram_teacher_features(ViTState<T>& gram_teacher,
                                const Tensor<T>& gram_image,
                                std::int64_t target_grid_h,
                                std::int64_t target_grid_w) {
  Tape<T> off(false);
  auto out = vit_forward(off, gram_teacher, gram_image, CropKind::global);
  Tensor<T> feats = out.patches;  // [P_hi, D]
  if (out.grid_h != target_grid_h || out.grid_w != target_grid_w) {
    Tensor<T> grid = off.reshape(
        feats, {out.grid_h, out.grid_w, (std::int64_t)feats.shape[1]});
    Tensor<T> down = off.bicubic_resize(grid, target_grid_h, target_grid_w);
    feats = off.reshape(down, {target_grid_h * target_grid_w,
                               (std::int64_t)down.shape[2]});
  }
  return off.l2_normalize(feats, (T)1e-8);
}

// Teacher-side targets for one crop batch: per-view DINO probabilities over
// the CLS tokens and iBOT patch targets at the student's masked positions,
// both Sinkhorn-normalized. Computed once per batch and shared by every
// student consuming it (multi-student distillation included). Untraced.
template <typename T>
struct TeacherTargets {
  std::vector<Tensor<T>> dino_probs;  // per global view: [B, K]
  Tensor<T> ibot_targets;             // [N, K] over all masked positions
  std::int64_t masked_total = 0;
};

template <typename T>
TeacherTargets<T> compute_teacher_targets(SslModel<T>& teacher,
                                          const CropBatch& batch,
                                          const PipelineConfig& pc) {
  const int b = batch.images;
  if (b < 1) throw ShapeError("compute_teacher_targets: empty batch");
  Tape<T> off(false);
  TeacherTargets<T> tt;
  std::vector<Tensor<T>> teacher_cls(2);
  std::vector<Tensor<T>> teacher_patches(batch.globals.size());
  {
    std::vector<std::vector<Tensor<T>>> cls_rows(2);
    for (int i = 0; i < b; ++i)
      for (int v = 0; v < 2; ++v) {
        const CropView& view = batch.globals[i * 2 + v];
        auto out = vit_forward(off, teacher.backbone,
                               cast_tensor<T>(view.image), CropKind::global);
        cls_rows[v].push_back(out.cls);
        teacher_patches[i * 2 + v] = out.patches;
      }
    for (int v = 0; v < 2; ++v)
      teacher_cls[v] = off.concat_rows(cls_rows[v]);
  }
  tt.dino_probs.resize(2);
  for (int v = 0; v < 2; ++v) {
    Tensor<T> logits = teacher.dino_head.logits(off, teacher_cls[v]);
    tt.dino_probs[v] =
        sinkhorn_knopp(logits, pc.sinkhorn_iters, (T)pc.teacher_temp);
  }
  std::vector<Tensor<T>> teacher_masked_rows;
  for (std::size_t c = 0; c < batch.globals.size(); ++c) {
    const auto& plan = batch.globals[c].mask;
    if (plan.empty()) continue;
    std::vector<std::int64_t> pos;
    for (std::size_t p = 0; p < plan.size(); ++p)
      if (plan[p]) pos.push_back((std::int64_t)p);
    if (pos.empty()) continue;
    teacher_masked_rows.push_back(off.gather_rows(teacher_patches[c], pos));
    tt.masked_total += (std::int64_t)pos.size();
  }
  if (tt.masked_total > 0) {
    Tensor<T> rows = off.concat_rows(teacher_masked_rows);
    Tensor<T> logits = teacher.ibot_head.logits(off, rows);
    tt.ibot_targets =
        sinkhorn_knopp(logits, pc.sinkhorn_iters, (T)pc.teacher_temp);
  }
  return tt;
}

// Student-side objective given precomputed teacher targets: student forwards
// of every crop, DINO/iBOT/Koleo routing, optional Gram anchoring, and the
// phase-weighted composite. Gradients flow only through `student`.
template <typename T>
ForwardResult<T> student_losses(Tape<T>& tape, SslModel<T>& student,
                                const TeacherTargets<T>& targets,
                                ViTState<T>* gram_teacher,
                                const CropBatch& batch,
                                const PipelineConfig& pc) {
  const int b = batch.images;
  if (b < 1) throw ShapeError("student_losses: empty batch");
  const int n_local = b > 0 ? (int)batch.locals.size() / b : 0;
  const std::vector<Tensor<T>>& teacher_dino_probs = targets.dino_probs;
  const Tensor<T>& ibot_targets = targets.ibot_targets;
  const std::int64_t masked_total = targets.masked_total;
  if (masked_total > 0 &&
      ibot_targets.shape[1] != student.ibot_head.prototype_count())
    throw ConfigError(
        "teacher iBOT targets cover " +
        std::to_string(ibot_targets.shape[1]) +
        " prototypes but the student head has " +
        std::to_string(student.ibot_head.prototype_count()));
  if (teacher_dino_probs[0].shape[1] != student.dino_head.prototype_count())
    throw ConfigError(
        "teacher DINO targets cover " +
        std::to_string(teacher_dino_probs[0].shape[1]) +
        " prototypes but the student head has " +
        std::to_string(student.dino_head.prototype_count()));

  // ---- student pass ----
  std::vector<Tensor<T>> student_global_cls(2);
  std::vector<Tensor<T>> student_patches(batch.globals.size());
  {
    std::vector<std::vector<Tensor<T>>> cls_rows(2);
    for (int i = 0; i < b; ++i)
      for (int v = 0; v < 2; ++v) {
        const CropView& view = batch.globals[i * 2 + v];
        ForwardOptions opt;
        opt.jitter_scale = view.jitter_scale;
        if (!view.mask.empty()) opt.mask = &view.mask;
        auto out = vit_forward(tape, student.backbone,
                               cast_tensor<T>(view.image), CropKind::global,
                               opt);
        cls_rows[v].push_back(out.cls);
        student_patches[i * 2 + v] = out.patches;
      }
    for (int v = 0; v < 2; ++v)
      student_global_cls[v] = tape.concat_rows(cls_rows[v]);
  }
  std::vector<Tensor<T>> student_local_cls(n_local);
  if (n_local > 0) {
    std::vector<std::vector<Tensor<T>>> cls_rows(n_local);
    for (int i = 0; i < b; ++i)
      for (int l = 0; l < n_local; ++l) {
        const CropView& view = batch.locals[i * n_local + l];
        ForwardOptions opt;
        opt.jitter_scale = view.jitter_scale;
        auto out = vit_forward(tape, student.backbone,
                               cast_tensor<T>(view.image), CropKind::local,
                               opt);
        cls_rows[l].push_back(out.cls);
      }
    for (int l = 0; l < n_local; ++l)
      student_local_cls[l] = tape.concat_rows(cls_rows[l]);
  }

  // ---- DINO routing: local crops vs both teacher views, and crossed
  // global views ----
  std::vector<std::pair<Tensor<T>, Tensor<T>>> routed;
  for (int v = 0; v < 2; ++v) {
    for (int l = 0; l < n_local; ++l)
      routed.push_back({student.dino_head.logits(tape, student_local_cls[l]),
                        teacher_dino_probs[v]});
    const int other = 1 - v;
    routed.push_back({student.dino_head.logits(tape, student_global_cls[other]),
                      teacher_dino_probs[v]});
  }
  Tensor<T> dino = dino_loss<T>(tape, routed, (T)pc.student_temp);

  // ---- iBOT on the masked positions of the student's global crops ----
  Tensor<T> ibot;
  if (masked_total > 0) {
    std::vector<Tensor<T>> student_masked_rows;
    for (std::size_t c = 0; c < batch.globals.size(); ++c) {
      const auto& plan = batch.globals[c].mask;
      if (plan.empty()) continue;
      std::vector<std::int64_t> pos;
      for (std::size_t p = 0; p < plan.size(); ++p)
        if (plan[p]) pos.push_back((std::int64_t)p);
      if (pos.empty()) continue;
      student_masked_rows.push_back(
          tape.gather_rows(student_patches[c], pos));
    }
    Tensor<T> rows = tape.concat_rows(student_masked_rows);
    Tensor<T> logits = student.ibot_head.logits(tape, rows);
    ibot = ibot_loss(tape, logits, ibot_targets, (T)pc.student_temp);
  } else {
    ibot = tape.out_like({1});
  }

  // ---- Koleo on the CLS tokens of the first global crop ----
  Tensor<T> koleo = b >= 2
                        ? koleo_loss(tape, student_global_cls[0],
                                     pc.koleo_group)
                        : tape.out_like({1});

  // ---- Gram anchoring on global crops ----
  std::optional<Tensor<T>> gram;
  const bool wants_gram =
      (pc.phase == Phase::refine || pc.phase == Phase::adapt);
  if (wants_gram) {
    if (!gram_teacher)
      throw ConfigError(std::string(phase_name(pc.phase)) +
                        " requires a Gram teacher");
    std::vector<Tensor<T>> terms;
    const std::int64_t gp = batch.global_size /
                            student.backbone.cfg.patch_size;
    for (std::size_t c = 0; c < batch.globals.size(); ++c) {
      const CropView& view = batch.globals[c];
      if (view.gram_image.numel() == 0)
        throw ConfigError(
            "gram anchoring needs the gram-teacher image stream; set a "
            "positive gram crop size");
      Tensor<T> xg = gram_teacher_features(
          *gram_teacher, cast_tensor<T>(view.gram_image), gp, gp);
      Tensor<T> xs = tape.l2_normalize(student_patches[c], (T)1e-8);
      terms.push_back(gram_loss(tape, xs, xg));
    }
    gram = mean_of_scalars(tape, terms);
  }

  Tensor<T> total = composite_loss<T>(tape, dino, ibot, koleo,
                                      gram ? &*gram : nullptr, pc.weights,
                                      pc.phase);

  ForwardResult<T> res;
  res.total = total;
  res.report.dino = (double)dino.value();
  res.report.ibot = (double)ibot.value();
  res.report.koleo = (double)koleo.value();
  res.report.gram = gram ? (double)gram->value() : 0.0;
  res.report.total = (double)total.value();
  res.report.teacher_temp = pc.teacher_temp;
  res.report.masked_positions = masked_total;
  return res;
}

// One full objective evaluation: teacher targets plus the student pass.
template <typename T>
ForwardResult<T> forward_losses(Tape<T>& tape, SslModel<T>& student,
                                SslModel<T>& teacher,
                                ViTState<T>* gram_teacher,
                                const CropBatch& batch,
                                const PipelineConfig& pc) {
  TeacherTargets<T> targets = compute_teacher_targets(teacher, batch, pc);
  return student_losses(tape, student, targets, gram_teacher, batch, pc);
}

}  // namespace minidino
