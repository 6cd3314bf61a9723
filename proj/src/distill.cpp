// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#include "minidino/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "minidino/train.hpp"

namespace minidino {

void CostModel::validate() const {
  if (teacher_cost <= 0 || batch_size <= 0)
    throw ConfigError("cost model: teacher cost and batch size must be > 0");
  if (student_costs.empty())
    throw ConfigError("cost model: at least one student required");
  for (double c : student_costs)
    if (c <= 0) throw ConfigError("cost model: student costs must be > 0");
  if (workers < (int)student_costs.size())
    throw ConfigError("cost model: need at least one worker per student (" +
                      std::to_string(workers) + " workers for " +
                      std::to_string(student_costs.size()) + " students)");
}

DistillPlan evaluate_plan(const CostModel& m, const std::vector<int>& alloc) {
  m.validate();
  if (alloc.size() != m.student_costs.size())
    throw ConfigError("plan: allocation size mismatch");
  int total = 0;
  for (int n : alloc) {
    if (n < 1) throw ConfigError("plan: every group needs >= 1 worker");
    total += n;
  }
  if (total != m.workers)
    throw ConfigError("plan: allocation sums to " + std::to_string(total) +
                      ", expected " + std::to_string(m.workers));
  DistillPlan plan;
  plan.workers_per_student = alloc;
  plan.teacher_share = m.batch_size / (double)m.workers * m.teacher_cost;
  double max_share = 0;
  for (std::size_t i = 0; i < alloc.size(); ++i) {
    const double share =
        m.batch_size / (double)alloc[i] * m.student_costs[i];
    plan.student_shares.push_back(share);
    max_share = std::max(max_share, share);
  }
  plan.makespan = plan.teacher_share + max_share;
  for (double share : plan.student_shares)
    plan.idle.push_back(max_share - share);
  return plan;
}

namespace {

void search_alloc(const CostModel& m, std::size_t i, int remaining,
                  std::vector<int>& current, double& best_max,
                  std::vector<int>& best) {
  const std::size_t s = m.student_costs.size();
  if (i == s) {
    if (remaining != 0) return;
    double mx = 0;
    for (std::size_t j = 0; j < s; ++j)
      mx = std::max(mx, m.batch_size / (double)current[j] *
                            m.student_costs[j]);
    if (mx < best_max) {
      best_max = mx;
      best = current;
    }
    return;
  }
  const int slots_left = (int)(s - i - 1);
  for (int n = 1; n <= remaining - slots_left; ++n) {
    const double share = m.batch_size / (double)n * m.student_costs[i];
    if (share >= best_max) continue;  // this group already binds worse
    current[i] = n;
    search_alloc(m, i + 1, remaining - n, current, best_max, best);
  }
  current[i] = 0;
}

}  // namespace

DistillPlan plan_assignment(const CostModel& m) {
  m.validate();
  if (m.student_costs.size() > 16)
    throw ConfigError("plan_assignment: enumeration supports up to 16 "
                      "students");
  const std::size_t s = m.student_costs.size();
  std::vector<int> current(s, 0), best;
  double best_max = std::numeric_limits<double>::infinity();
  search_alloc(m, 0, m.workers, current, best_max, best);
  if (best.empty())
    throw ConfigError("plan_assignment: no feasible allocation for " +
                      std::to_string(m.workers) + " workers");
  return evaluate_plan(m, best);
}

CostTable per_worker_cost(const DistillPlan& plan, const CostModel& m) {
  CostTable t;
  t.teacher_share = plan.teacher_share;
  t.student_shares = plan.student_shares;
  t.total_system_work = m.batch_size * m.teacher_cost;
  for (double c : m.student_costs) t.total_system_work += m.batch_size * c;
  return t;
}

Timeline simulate_iteration(const DistillPlan& plan, const CostModel& m,
                            double per_byte_cost, double payload_bytes) {
  Timeline tl;
  const double t_teacher = plan.teacher_share;
  const double t_ag = per_byte_cost * payload_bytes;
  for (std::size_t g = 0; g < plan.student_shares.size(); ++g)
    tl.events.push_back({"teacher_inference", (int)g, 0.0, t_teacher});
  tl.events.push_back({"all_gather", -1, t_teacher, t_teacher + t_ag});
  double max_finish = 0;
  std::vector<double> finish(plan.student_shares.size());
  for (std::size_t g = 0; g < plan.student_shares.size(); ++g) {
    const double f = t_teacher + t_ag + plan.student_shares[g];
    tl.events.push_back({"student_training", (int)g, t_teacher + t_ag, f});
    finish[g] = f;
    max_finish = std::max(max_finish, f);
  }
  tl.makespan = max_finish;
  for (double f : finish) tl.idle.push_back(max_finish - f);
  return tl;
}

std::string DistillPlan::csv() const {
  std::ostringstream os;
  os << "student,workers,teacher_share,student_share,idle\n";
  for (std::size_t i = 0; i < workers_per_student.size(); ++i) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu,%d,%.10g,%.10g,%.10g\n", i,
                  workers_per_student[i], teacher_share, student_shares[i],
                  idle[i]);
    os << buf;
  }
  char tail[80];
  std::snprintf(tail, sizeof tail, "makespan,,,%.10g,\n", makespan);
  os << tail;
  return os.str();
}

std::string Timeline::csv() const {
  std::ostringstream os;
  os << "stage,group,start,end\n";
  for (const auto& e : events) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%d,%.10g,%.10g\n", e.stage.c_str(),
                  e.group, e.t0, e.t1);
    os << buf;
  }
  return os.str();
}

std::vector<StudentSpec> parse_roster_text(const std::string& text,
                                           const std::string& origin) {
  std::vector<StudentSpec> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string tok;
    while (std::getline(ls, tok, ',')) fields.push_back(trim(tok));
    if (fields.size() != 4)
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": expected `name, depth, dim, cost`");
    StudentSpec spec;
    spec.name = fields[0];
    spec.depth = std::stoi(fields[1]);
    spec.embed_dim = std::stoi(fields[2]);
    spec.cost = std::stod(fields[3]);
    if (spec.depth < 1 || spec.embed_dim < 16 || spec.cost <= 0)
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": invalid student spec for '" + spec.name + "'");
    out.push_back(std::move(spec));
  }
  if (out.empty()) throw ConfigError(origin + ": empty roster");
  return out;
}

std::vector<StudentSpec> parse_roster(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open roster file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_roster_text(ss.str(), path);
}

ViTConfig MultiStudentDistiller::student_vit_config(int i) const {
  const StudentSpec& spec = students_[i]->spec;
  ViTConfig v = vit_config_from(cfg_);
  v.depth = spec.depth;
  v.embed_dim = spec.embed_dim;
  // keep the teacher's head geometry: 16-wide heads
  v.head_count = std::max(1, spec.embed_dim / 16);
  v.ffn_hidden = 2 * spec.embed_dim;
  v.validate();
  return v;
}

std::unique_ptr<MultiStudentDistiller> MultiStudentDistiller::create(
    const Config& cfg, const std::string& teacher_ckpt,
    const std::vector<StudentSpec>& roster) {
  auto d = std::unique_ptr<MultiStudentDistiller>(new MultiStudentDistiller());
  d->cfg_ = cfg;
  d->seed_ = cfg.get_u64("run.seed");
  d->dataset_.emplace(d->seed_, (int)cfg.get_int("data.image_size"),
                      (int)cfg.get_int("data.dataset_size"));
  d->crops_ = crop_config_from(cfg);
  d->sched_ = schedule_config_from(cfg);

  // frozen teacher: the EMA teacher stored in the source checkpoint
  TensorStore store = TensorStore::load(teacher_ckpt);
  Config saved = Config::defaults();
  saved.apply_text(store.get_text("__config__"), teacher_ckpt);
  ViTConfig tv = vit_config_from(saved);
  Rng tmp(0);
  d->teacher_.backbone = ViTState<float>::init(tv, tmp);
  d->teacher_.dino_head = ProjectionHead<float>::init(
      tv.embed_dim, (int)saved.get_int("head.hidden"),
      (int)saved.get_int("head.bottleneck"),
      (int)saved.get_int("head.dino_prototypes"), tmp);
  d->teacher_.ibot_head = ProjectionHead<float>::init(
      tv.embed_dim, (int)saved.get_int("head.hidden"),
      (int)saved.get_int("head.bottleneck"),
      (int)saved.get_int("head.ibot_prototypes"), tmp);
  for (auto& p : d->teacher_.params())
    store.load_into("teacher/" + p.name, *p.tensor);

  const int dino_k = d->teacher_.dino_head.prototype_count();
  const int ibot_k = d->teacher_.ibot_head.prototype_count();
  if (dino_k != (int)cfg.get_int("head.dino_prototypes") ||
      ibot_k != (int)cfg.get_int("head.ibot_prototypes"))
    throw ConfigError(
        "distill: teacher prototypes (" + std::to_string(dino_k) + "/" +
        std::to_string(ibot_k) +
        ") do not match head.dino_prototypes/head.ibot_prototypes; student "
        "heads must share the teacher's prototype space");

  for (std::size_t i = 0; i < roster.size(); ++i) {
    auto slot = std::make_unique<Slot>();
    slot->spec = roster[i];
    d->students_.push_back(std::move(slot));
    ViTConfig sv = d->student_vit_config((int)i);
    if (sv.embed_dim > tv.embed_dim || sv.depth > tv.depth)
      throw ConfigError("distill: student '" + roster[i].name +
                        "' is not smaller than the teacher");
    Rng rng = rng_at(d->seed_, Stream::init, i + 1);
    d->students_[i]->model = SslModel<float>::init(
        sv, (int)cfg.get_int("head.hidden"),
        (int)cfg.get_int("head.bottleneck"), dino_k, ibot_k, rng);
    d->students_[i]->opt.attach(d->students_[i]->model.params(), sv.depth);
  }
  return d;
}

std::vector<LossReport> MultiStudentDistiller::distill_step() {
  const ScheduleValues sv = schedule_at(step_, sched_);
  Rng crop_rng = rng_at(seed_, Stream::crops, (std::uint64_t)step_);
  Rng mask_rng = rng_at(seed_, Stream::masks, (std::uint64_t)step_);
  Rng jitter_rng = rng_at(seed_, Stream::rope_jitter, (std::uint64_t)step_);
  Rng mix_rng = rng_at(seed_, Stream::mixer, (std::uint64_t)step_);
  const int bs = (int)cfg_.get_int("batch.size");
  std::vector<int> indices(bs);
  for (int i = 0; i < bs; ++i)
    indices[i] = (int)mix_rng.randint((std::uint64_t)dataset_->count());
  CropBatch batch =
      sample_crops(*dataset_, indices, crops_, crop_rng, mask_rng, jitter_rng);

  PipelineConfig pc;
  pc.phase = Phase::distill;
  pc.weights = LossWeights::distill_profile();
  pc.student_temp = sched_.student_temp;
  pc.teacher_temp = sv.teacher_temp;
  pc.sinkhorn_iters = (int)cfg_.get_int("loss.sinkhorn_iters");
  pc.koleo_group = (int)cfg_.get_int("loss.koleo_group");

  // teacher inference once, shared across every student
  TeacherTargets<float> targets =
      compute_teacher_targets(teacher_, batch, pc);

  std::vector<LossReport> reports;
  for (auto& slot : students_) {
    Tape<float> tape;
    auto res = student_losses<float>(tape, slot->model, targets, nullptr,
                                     batch, pc);
    if (!std::isfinite(res.report.total))
      throw NumericFault("non-finite distillation loss at step " +
                         std::to_string(step_));
    tape.backward(res.total);
    slot->opt.step(sv.lr, sv.wd, sched_.layerwise_decay);
    slot->model.renormalize_prototypes();
    slot->opt.zero_grad();
    res.report.step = step_;
    res.report.lr = sv.lr;
    reports.push_back(res.report);
  }
  ++step_;
  return reports;
}

void MultiStudentDistiller::save_student_checkpoint(int i,
                                                    const std::string& path) {
  TensorStore store;
  for (auto& p : students_[i]->model.params()) {
    store.put_f32("student/" + p.name, *p.tensor);
    store.put_f32("teacher/" + p.name, *p.tensor);  // probes read `teacher/`
  }
  students_[i]->opt.save(store, "opt");
  CheckpointMeta meta;
  meta.step = step_;
  meta.phase = Phase::distill;
  meta.run_id = "distill-" + students_[i]->spec.name;
  std::ostringstream ms;
  ms << "step = " << meta.step << "\nphase_start = 0\nphase = distill\n"
     << "gram_refreshes = 0\nrun_id = " << meta.run_id << "\nlineage =\n";
  store.put_text("__meta__", ms.str());
  Config scfg = cfg_;
  ViTConfig sv = student_vit_config(i);
  scfg.set("vit.depth", std::to_string(sv.depth));
  scfg.set("vit.embed_dim", std::to_string(sv.embed_dim));
  scfg.set("vit.heads", std::to_string(sv.head_count));
  scfg.set("vit.ffn_hidden", std::to_string(sv.ffn_hidden));
  store.put_text("__config__", scfg.canonical_text());
  store.save(path);
}

}  // namespace minidino
