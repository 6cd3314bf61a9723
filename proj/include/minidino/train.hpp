// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "minidino/config.hpp"
#include "minidino/data.hpp"
#include "minidino/optim.hpp"
#include "minidino/pipeline.hpp"
#include "minidino/serialize.hpp"

namespace minidino {

struct CheckpointMeta {
  std::int64_t step = 0;
  std::int64_t phase_start = 0;
  Phase phase = Phase::pretrain;
  int gram_refreshes = 0;
  std::string run_id;
  std::vector<std::string> lineage;  // ancestor run ids, oldest first
  std::string config_text;
};

ViTConfig vit_config_from(const Config& cfg);
ScheduleConfig schedule_config_from(const Config& cfg);
CropConfig crop_config_from(const Config& cfg);

// Rebuilds a model from a checkpoint using the configuration embedded in
// it; `which` selects the "student" or "teacher" tree.
SslModel<float> load_model(const std::string& ckpt_path,
                           const std::string& which,
                           Config* cfg_out = nullptr);

// Copies src parameter values into dst; trees must match exactly.
template <typename T>
void copy_params(std::vector<ParamRef<T>> dst, std::vector<ParamRef<T>> src) {
  if (dst.size() != src.size())
    throw ShapeError("copy_params: tree size mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].name != src[i].name ||
        dst[i].tensor->shape != src[i].tensor->shape)
      throw ShapeError("copy_params: tree mismatch at '" + dst[i].name + "'");
    std::copy(src[i].tensor->data(),
              src[i].tensor->data() + src[i].tensor->numel(),
              dst[i].tensor->data());
  }
}

// Orchestrates one training phase: pretraining (composite objective),
// Gram-anchored refinement, or mixed-resolution adaptation. Owns the
// student, the EMA teacher, the optional frozen Gram teacher, the optimizer
// and the step counter; checkpoints capture all of it so resuming is
// bit-exact.
class Trainer {
 public:
  // Fresh run; only the pretraining phase may start without a parent.
  static std::unique_ptr<Trainer> create(const Config& cfg,
                                         const std::string& run_id);
  // Start `phase` from a parent checkpoint, or resume when the checkpoint's
  // phase already equals `phase`. `gram_teacher_ckpt` selects the frozen
  // Gram teacher for refine/adapt; empty means "the parent's EMA teacher".
  static std::unique_ptr<Trainer> from_checkpoint(
      const Config& cfg, Phase phase, const std::string& ckpt_path,
      const std::string& gram_teacher_ckpt, const std::string& run_id);

  static CheckpointMeta peek_meta(const std::string& path);

  LossReport train_step();
  void save_checkpoint(const std::string& path);

  std::int64_t step() const { return step_; }
  Phase phase() const { return phase_; }
  const Config& config() const { return cfg_; }
  SslModel<float>& student() { return student_; }
  SslModel<float>& teacher() { return teacher_; }
  ViTState<float>* gram_teacher() {
    return gram_teacher_ ? &*gram_teacher_ : nullptr;
  }
  int gram_refreshes() const { return gram_refreshes_; }
  const SyntheticShapes& dataset() const { return *dataset_; }
  std::uint64_t seed() const { return seed_; }

  // visible for tests: the batch the next train_step would consume
  CropBatch peek_batch() { return make_batch(step_); }

  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

 private:
  Trainer(const Config& cfg, const std::string& run_id);

  Config cfg_;
  Phase phase_ = Phase::pretrain;
  std::string run_id_;
  std::vector<std::string> lineage_;
  std::uint64_t seed_ = 0;
  std::optional<SyntheticShapes> dataset_;
  SslModel<float> student_, teacher_;
  std::optional<ViTState<float>> gram_teacher_;
  AdamW<float> opt_;
  ScheduleConfig sched_;
  CropConfig crops_;
  std::vector<ResolutionTriple> triples_;
  std::optional<MixSampler> sampler_;
  std::int64_t step_ = 0;
  std::int64_t phase_start_ = 0;
  int gram_refreshes_ = 0;

  CropBatch make_batch(std::int64_t step);
  std::vector<int> draw_indices(std::int64_t step);
  void maybe_refresh_gram_teacher();
  void attach_optimizer();
  void load_state(const TensorStore& store);
};

}  // namespace minidino
