// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "minidino/config.hpp"
#include "minidino/optim.hpp"
#include "minidino/pipeline.hpp"

namespace minidino {

// Per-GPU cost model of the shared-teacher distillation pipeline. Costs are
// abstract work units per sample; every worker joins the global teacher
// inference group, so the teacher share is B/N * C_T for everyone.
struct CostModel {
  double teacher_cost = 1.0;           // C_T
  std::vector<double> student_costs;   // C_Si, one per student
  double batch_size = 128;             // B
  int workers = 8;                     // N

  void validate() const;
};

struct DistillPlan {
  std::vector<int> workers_per_student;   // N_Si, sums to N
  double teacher_share = 0;               // B/N * C_T
  std::vector<double> student_shares;     // B/N_Si * C_Si
  double makespan = 0;                    // teacher share + max student share
  std::vector<double> idle;               // makespan - own finish, per group

  std::string csv() const;
};

// Exact integer allocation minimizing the makespan, by enumeration with
// branch-and-bound pruning. Ties resolve to the lexicographically smallest
// allocation (student index order).
DistillPlan plan_assignment(const CostModel& m);

// Evaluates a given allocation (shares, makespan, idle).
DistillPlan evaluate_plan(const CostModel& m, const std::vector<int>& alloc);

struct CostTable {
  double teacher_share = 0;
  std::vector<double> student_shares;
  double total_system_work = 0;  // B*C_T + sum_i B*C_Si
};

CostTable per_worker_cost(const DistillPlan& plan, const CostModel& m);

struct TimelineEvent {
  std::string stage;  // teacher_inference | all_gather | student_training
  int group;          // -1 for global stages
  double t0 = 0, t1 = 0;
};

struct Timeline {
  std::vector<TimelineEvent> events;
  double makespan = 0;                 // includes the all-gather duration
  std::vector<double> idle;            // per group
  std::string csv() const;
};

// Three-stage synchronized iteration: shared teacher inference, an
// all-gather barrier (zero duration unless a per-byte cost and payload are
// given), then per-group student training up to the closing barrier.
Timeline simulate_iteration(const DistillPlan& plan, const CostModel& m,
                            double per_byte_cost = 0.0,
                            double payload_bytes = 0.0);

// Roster file: one student per line, `name, depth, dim, cost`.
struct StudentSpec {
  std::string name;
  int depth = 2;
  int embed_dim = 32;
  double cost = 1.0;
};

std::vector<StudentSpec> parse_roster(const std::string& path);
std::vector<StudentSpec> parse_roster_text(const std::string& text,
                                           const std::string& origin);

// Executable toy distillation: a frozen teacher loaded from a checkpoint
// drives any number of smaller students with the pretraining objective
// minus Gram anchoring; teacher inference happens once per batch and the
// resulting targets are shared across students. No EMA is maintained.
class MultiStudentDistiller {
 public:
  static std::unique_ptr<MultiStudentDistiller> create(
      const Config& cfg, const std::string& teacher_ckpt,
      const std::vector<StudentSpec>& roster);

  std::vector<LossReport> distill_step();

  std::int64_t step() const { return step_; }
  int student_count() const { return (int)students_.size(); }
  SslModel<float>& student(int i) { return students_[i]->model; }
  const StudentSpec& spec(int i) const { return students_[i]->spec; }
  SslModel<float>& teacher() { return teacher_; }
  const SyntheticShapes& dataset() const { return *dataset_; }
  ViTConfig student_vit_config(int i) const;

  void save_student_checkpoint(int i, const std::string& path);

  MultiStudentDistiller(const MultiStudentDistiller&) = delete;

 private:
  MultiStudentDistiller() = default;

  struct Slot {
    StudentSpec spec;
    SslModel<float> model;
    AdamW<float> opt;
  };

  Config cfg_;
  std::uint64_t seed_ = 0;
  SslModel<float> teacher_;
  std::vector<std::unique_ptr<Slot>> students_;
  std::optional<SyntheticShapes> dataset_;
  CropConfig crops_;
  ScheduleConfig sched_;
  std::int64_t step_ = 0;
};

}  // namespace minidino
