// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "minidino/train.hpp"
#include "oracles.hpp"

using namespace minidino;

namespace {

Config tiny_config(std::uint64_t seed = 1) {
  Config cfg = Config::defaults();
  cfg.set("run.seed", std::to_string(seed));
  cfg.set("vit.depth", "2");
  cfg.set("vit.embed_dim", "32");
  cfg.set("vit.heads", "2");
  cfg.set("vit.ffn_hidden", "48");
  cfg.set("head.hidden", "48");
  cfg.set("head.bottleneck", "24");
  cfg.set("head.dino_prototypes", "16");
  cfg.set("head.ibot_prototypes", "16");
  cfg.set("data.image_size", "32");
  cfg.set("data.dataset_size", "64");
  cfg.set("crops.global_size", "16");
  cfg.set("crops.local_size", "8");
  cfg.set("crops.n_local", "2");
  cfg.set("batch.size", "2");
  cfg.set("sched.warmup_steps", "10");
  cfg.set("run.steps", "100");
  return cfg;
}

std::vector<float> param_snapshot(SslModel<float>& m) {
  std::vector<float> out;
  for (auto& p : m.params())
    out.insert(out.end(), p.tensor->data(), p.tensor->data() + p.tensor->numel());
  return out;
}

struct TmpDir {
  std::filesystem::path path;
  explicit TmpDir(const std::string& name) {
    path = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TmpDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& f) const { return (path / f).string(); }
};

}  // namespace

TEST_CASE("crop sampling contract") {
  SyntheticShapes ds(7, 64, 32);
  CropConfig cc;
  Rng r1(1), r2(2), r3(3);
  auto batch = sample_crops(ds, {0, 1, 2, 3}, cc, r1, r2, r3);
  CHECK(batch.globals.size() == 8);  // 2 per image
  CHECK(batch.locals.size() == 32);  // 8 per image
  CHECK(batch.globals[0].image.shape == Shape{32, 32, 3});
  CHECK(batch.locals[0].image.shape == Shape{16, 16, 3});

  SUBCASE("identical streams give an identical batch") {
    Rng a1(1), a2(2), a3(3);
    auto again = sample_crops(ds, {0, 1, 2, 3}, cc, a1, a2, a3);
    for (std::size_t i = 0; i < batch.globals.size(); ++i) {
      CHECK(*batch.globals[i].image.data_ == *again.globals[i].image.data_);
      CHECK(batch.globals[i].mask == again.globals[i].mask);
      CHECK(batch.globals[i].jitter_scale == again.globals[i].jitter_scale);
    }
  }

  SUBCASE("mask plans stay within the fraction bounds; rate is ~1/2") {
    const int patches = 16;  // 32px global, patch 8
    int masked_crops = 0, total_crops = 0;
    for (int trial = 0; trial < 800; ++trial) {
      Rng c(100 + trial), m(200 + trial), j(300 + trial);
      auto b = sample_crops(ds, {0, 1}, cc, c, m, j);
      for (const auto& g : b.globals) {
        ++total_crops;
        if (g.mask.empty()) continue;
        ++masked_crops;
        int n = 0;
        for (auto v : g.mask) n += v;
        CHECK(n >= (int)std::ceil(0.1 * patches));
        CHECK(n <= (int)std::floor(0.5 * patches));
      }
    }
    const double rate = (double)masked_crops / total_crops;
    CHECK(rate == doctest::Approx(0.5).epsilon(0.04));
  }

  SUBCASE("jitter scales live in the configured range") {
    for (const auto& g : batch.globals) {
      CHECK(g.jitter_scale >= 0.5f);
      CHECK(g.jitter_scale <= 2.0f);
    }
  }

  SUBCASE("source smaller than the global crop is an error") {
    SyntheticShapes small(7, 16, 4);
    CropConfig big = cc;
    big.global_size = 32;
    Rng c(1), m(2), j(3);
    CHECK_THROWS_AS(sample_crops(small, {0}, big, c, m, j), ShapeError);
    big.allow_upsample = true;
    CHECK_NOTHROW(sample_crops(small, {0}, big, c, m, j));
  }

  SUBCASE("gram stream carries the same region at higher resolution") {
    CropConfig gc = cc;
    gc.gram_size = 64;
    gc.color_jitter = false;
    Rng c(5), m(6), j(7);
    auto b = sample_crops(ds, {0}, gc, c, m, j);
    CHECK(b.globals[0].gram_image.shape == Shape{64, 64, 3});
    // downsampling the hi-res copy approximates the base crop
    Tape<float> tp(false);
    auto down = tp.bicubic_resize(b.globals[0].gram_image, 32, 32);
    double diff = 0;
    for (std::int64_t i = 0; i < down.numel(); ++i)
      diff += std::fabs(down.at(i) - b.globals[0].image.at(i));
    diff /= down.numel();
    CHECK(diff < 0.05);
  }
}

TEST_CASE("adaptation triples frequencies match the table") {
  auto table = default_adapt_triples();
  std::vector<int> counts(table.size(), 0);
  Rng rng(99);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto& t = draw_triple(table, rng);
    for (std::size_t k = 0; k < table.size(); ++k)
      if (&t == &table[k]) ++counts[k];
  }
  for (std::size_t k = 0; k < table.size(); ++k) {
    const double freq = (double)counts[k] / draws;
    CHECK(std::fabs(freq - table[k].prob) < 0.02);
  }
}

TEST_CASE("mix sampler frequencies") {
  MixSampler ms;
  ms.homogeneous = {"hq", {0, 1, 2, 3}, 1.0};
  ms.parts = {{"a", {10, 11, 12}, 3.0}, {"b", {20, 21}, 1.0}};

  SUBCASE("p = 1 always draws the homogeneous part") {
    ms.p_homogeneous = 1.0;
    Rng rng(1);
    for (int i = 0; i < 50; ++i) {
      auto b = ms.next_batch(4, rng);
      CHECK(b.homogeneous);
      for (int idx : b.indices) CHECK(idx <= 3);
    }
  }
  SUBCASE("homogeneous rate 0.1 +- 0.01 over 20k draws") {
    ms.p_homogeneous = 0.1;
    Rng rng(2);
    int hom = 0;
    const int draws = 20000;
    for (int i = 0; i < draws; ++i)
      if (ms.next_batch(2, rng).homogeneous) ++hom;
    CHECK(std::fabs((double)hom / draws - 0.1) < 0.01);
  }
  SUBCASE("heterogeneous composition matches weights within 2%") {
    ms.p_homogeneous = 0.0;
    Rng rng(3);
    std::int64_t n_a = 0, n_total = 0;
    for (int i = 0; i < 20000; ++i) {
      auto b = ms.next_batch(1, rng);
      n_total += 1;
      if (b.part_of[0] == 0) ++n_a;
    }
    CHECK(std::fabs((double)n_a / n_total - 0.75) < 0.02);
  }
  SUBCASE("empty part is an error") {
    ms.p_homogeneous = 1.0;
    ms.homogeneous.indices.clear();
    Rng rng(4);
    CHECK_THROWS_AS(ms.next_batch(2, rng), ConfigError);
  }
}

TEST_CASE("schedule: warmup into constants") {
  ScheduleConfig sc;
  sc.base_lr = 4e-4;
  sc.warmup_steps = 1000;
  sc.total_steps = 20000;
  CHECK(schedule_at(0, sc).lr == 0.0);
  CHECK(schedule_at(1000, sc).lr == doctest::Approx(4e-4));
  CHECK(schedule_at(10000, sc).lr == schedule_at(1000, sc).lr);
  CHECK(schedule_at(0, sc).teacher_temp == doctest::Approx(0.04));
  CHECK(schedule_at(1000, sc).teacher_temp == doctest::Approx(0.07));
  CHECK(schedule_at(5000, sc).teacher_temp == doctest::Approx(0.07));
  CHECK(schedule_at(500, sc).wd == doctest::Approx(0.04));
  CHECK(schedule_at(500, sc).ema_momentum == doctest::Approx(0.999));
  ScheduleConfig bad = sc;
  bad.warmup_steps = 30000;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("ema update") {
  SUBCASE("m = 1 is a fixed point; scalar arithmetic") {
    auto t = TensorF::param_full({1}, 1.0f);
    auto s = TensorF::param_full({1}, 0.0f);
    std::vector<ParamRef<float>> tp = {{"x", &t, 0}};
    std::vector<ParamRef<float>> sp = {{"x", &s, 0}};
    ema_update<float>(tp, sp, 1.0f);
    CHECK(t.at(0) == 1.0f);
    ema_update<float>(tp, sp, 0.9f);
    CHECK(t.at(0) == doctest::Approx(0.9f));
  }
  SUBCASE("geometric contraction toward a constant student") {
    auto t = TensorD::param_full({1}, 1.0);
    auto s = TensorD::param_full({1}, 0.0);
    std::vector<ParamRef<double>> tp = {{"x", &t, 0}};
    std::vector<ParamRef<double>> sp = {{"x", &s, 0}};
    const double m = 0.9;
    for (int k = 1; k <= 40; ++k) {
      ema_update<double>(tp, sp, m);
      CHECK(t.at(0) == doctest::Approx(std::pow(m, k)).epsilon(1e-12));
    }
  }
  SUBCASE("tree mismatch is an error") {
    auto t = TensorF::param_full({2}, 1.0f);
    auto s = TensorF::param_full({3}, 0.0f);
    std::vector<ParamRef<float>> tp = {{"x", &t, 0}};
    std::vector<ParamRef<float>> sp = {{"x", &s, 0}};
    CHECK_THROWS_AS(ema_update<float>(tp, sp, 0.9f), ShapeError);
  }
}

TEST_CASE("pretrain step determinism and teacher contract") {
  Config cfg = tiny_config(11);
  auto a = Trainer::create(cfg, "run-a");
  auto b = Trainer::create(cfg, "run-b");
  for (int i = 0; i < 3; ++i) {
    auto ra = a->train_step();
    auto rb = b->train_step();
    CHECK(ra.total == rb.total);
    CHECK(ra.csv_row() == rb.csv_row());
  }
  CHECK(param_snapshot(a->student()) == param_snapshot(b->student()));
  CHECK(param_snapshot(a->teacher()) == param_snapshot(b->teacher()));

  // teacher receives no gradients: its grad buffers stay exactly zero
  for (auto& p : a->teacher().params())
    for (std::int64_t i = 0; i < p.tensor->numel(); ++i)
      CHECK(p.tensor->grad()[i] == 0.0f);
}

TEST_CASE("gradient reaches every learnable tensor") {
  Config cfg = tiny_config(13);
  cfg.set("crops.mask_prob", "1.0");  // guarantee masked-token traffic
  auto tr = Trainer::create(cfg, "gradflow");
  CropBatch batch = tr->peek_batch();
  PipelineConfig pc;
  pc.phase = Phase::pretrain;
  pc.teacher_temp = 0.07;
  Tape<float> tape;
  auto res = forward_losses<float>(tape, tr->student(), tr->teacher(),
                                   nullptr, batch, pc);
  tape.backward(res.total);
  for (auto& p : tr->student().params()) {
    float asum = 0;
    for (std::int64_t i = 0; i < p.tensor->numel(); ++i)
      asum += std::fabs(p.tensor->grad()[i]);
    INFO("param ", p.name);
    CHECK(asum > 0.0f);
  }
}

TEST_CASE("overfit sanity: loss decreases on a fixed batch") {
  Config cfg = tiny_config(17);
  auto tr = Trainer::create(cfg, "overfit");
  CropBatch batch = tr->peek_batch();
  AdamW<float> opt;
  opt.attach(tr->student().params(), tr->student().backbone.cfg.depth);
  PipelineConfig pc;
  pc.phase = Phase::pretrain;
  pc.teacher_temp = 0.07;
  double first = 0, last = 0;
  for (int it = 0; it < 50; ++it) {
    Tape<float> tape;
    auto res = forward_losses<float>(tape, tr->student(), tr->teacher(),
                                     nullptr, batch, pc);
    if (it == 0) first = res.report.total;
    last = res.report.total;
    tape.backward(res.total);
    opt.step(3e-4, 0.0, 1.0);
    tr->student().renormalize_prototypes();
    opt.zero_grad();
  }
  CHECK(last < first);
}

TEST_CASE("refine with w_gram = 0 reproduces the pretrain step exactly") {
  TmpDir tmp("md_refine0");
  Config cfg = tiny_config(19);
  auto tr = Trainer::create(cfg, "base");
  for (int i = 0; i < 2; ++i) tr->train_step();
  tr->save_checkpoint(tmp.file("ck.dnv3"));

  Config cfg_pre = cfg;
  auto cont = Trainer::from_checkpoint(cfg_pre, Phase::pretrain,
                                       tmp.file("ck.dnv3"), "", "base");
  Config cfg_ref = cfg;
  cfg_ref.set("loss.w_gram", "0.0");
  cfg_ref.set("gram.refresh_interval", "0");
  auto refi = Trainer::from_checkpoint(cfg_ref, Phase::refine,
                                       tmp.file("ck.dnv3"), "", "refi");
  auto rp = cont->train_step();
  auto rr = refi->train_step();
  CHECK(rr.total == rp.total);
  CHECK(rr.dino == rp.dino);
  CHECK(rr.ibot == rp.ibot);
  CHECK(param_snapshot(cont->student()) == param_snapshot(refi->student()));
  CHECK(rr.gram > 0.0);  // still measured, just unweighted
}

TEST_CASE("highres factor 1 equals same-resolution anchoring") {
  TmpDir tmp("md_hires1");
  Config cfg = tiny_config(23);
  auto tr = Trainer::create(cfg, "base");
  tr->train_step();
  tr->save_checkpoint(tmp.file("ck.dnv3"));

  Config c1 = cfg;
  c1.set("gram.highres_factor", "1");
  c1.set("gram.refresh_interval", "0");
  auto a = Trainer::from_checkpoint(c1, Phase::refine, tmp.file("ck.dnv3"),
                                    "", "f1");
  auto rep = a->train_step();
  // same-resolution anchoring: the teacher saw exactly the student's crop,
  // so the gram stream equals the base image stream
  CropBatch b = a->peek_batch();
  CHECK(b.gram_size == b.global_size);
  CHECK(rep.gram >= 0.0);
}

TEST_CASE("gram refresh counter saturates at the maximum") {
  TmpDir tmp("md_refresh");
  Config cfg = tiny_config(29);
  auto tr = Trainer::create(cfg, "base");
  tr->train_step();
  tr->save_checkpoint(tmp.file("ck.dnv3"));

  Config cr = cfg;
  cr.set("gram.refresh_interval", "5");
  cr.set("gram.max_refreshes", "3");
  auto refi = Trainer::from_checkpoint(cr, Phase::refine, tmp.file("ck.dnv3"),
                                       "", "refresh");
  for (int i = 0; i < 30; ++i) refi->train_step();
  CHECK(refi->gram_refreshes() == 3);
}

TEST_CASE("one refine step reduces gram loss on the same batch") {
  Config cfg = tiny_config(31);
  cfg.set("sched.warmup_steps", "0");  // lr = 4e-4 from the first step
  auto tr = Trainer::create(cfg, "gramdesc");
  for (int i = 0; i < 5; ++i) tr->train_step();

  // frozen gram teacher = current teacher backbone
  ViTState<float> gram_teacher;
  {
    Rng tmp_rng(0);
    gram_teacher = ViTState<float>::init(tr->student().backbone.cfg, tmp_rng);
    copy_params(gram_teacher.params(), tr->teacher().backbone.params());
  }
  // perturb the student so the gram gap is nonzero
  {
    Rng noise(123);
    for (auto& p : tr->student().params())
      for (std::int64_t i = 0; i < p.tensor->numel(); ++i)
        p.tensor->data()[i] += 0.02f * (float)noise.normal();
  }
  CropConfig cc = crop_config_from(cfg);
  cc.gram_size = cc.global_size * 2;
  Rng c(1), m(2), j(3);
  SyntheticShapes ds(31, 32, 64);
  CropBatch batch = sample_crops(ds, {0, 1}, cc, c, m, j);

  PipelineConfig pc;
  pc.phase = Phase::refine;
  pc.weights = LossWeights::refine_profile(2.0);
  pc.teacher_temp = 0.07;
  AdamW<float> opt;
  opt.attach(tr->student().params(), tr->student().backbone.cfg.depth);

  Tape<float> t1;
  auto before = forward_losses<float>(t1, tr->student(), tr->teacher(),
                                      &gram_teacher, batch, pc);
  t1.backward(before.total);
  opt.step(1e-3, 0.0, 1.0);
  tr->student().renormalize_prototypes();
  opt.zero_grad();
  Tape<float> t2(true);
  auto after = forward_losses<float>(t2, tr->student(), tr->teacher(),
                                     &gram_teacher, batch, pc);
  CHECK(after.report.gram < before.report.gram);
}

TEST_CASE("checkpoint round-trip and resume equivalence") {
  TmpDir tmp("md_resume");
  Config cfg = tiny_config(37);

  // straight run: 10 steps
  auto full = Trainer::create(cfg, "run");
  std::vector<LossReport> full_reports;
  for (int i = 0; i < 10; ++i) full_reports.push_back(full->train_step());

  // split run: 6 steps, checkpoint, resume, 4 steps
  auto part = Trainer::create(cfg, "run");
  for (int i = 0; i < 6; ++i) part->train_step();
  part->save_checkpoint(tmp.file("ck6.dnv3"));
  auto resumed = Trainer::from_checkpoint(cfg, Phase::pretrain,
                                          tmp.file("ck6.dnv3"), "", "run");
  CHECK(resumed->step() == 6);
  std::vector<LossReport> tail;
  for (int i = 0; i < 4; ++i) tail.push_back(resumed->train_step());

  for (int i = 0; i < 4; ++i)
    CHECK(tail[i].csv_row() == full_reports[6 + i].csv_row());
  CHECK(param_snapshot(resumed->student()) == param_snapshot(full->student()));
  CHECK(param_snapshot(resumed->teacher()) == param_snapshot(full->teacher()));
}

TEST_CASE("phase lineage rules") {
  TmpDir tmp("md_lineage");
  Config cfg = tiny_config(41);
  auto tr = Trainer::create(cfg, "pre");
  tr->train_step();
  tr->save_checkpoint(tmp.file("pre.dnv3"));

  auto refi = Trainer::from_checkpoint(cfg, Phase::refine, tmp.file("pre.dnv3"),
                                       "", "ref");
  refi->train_step();
  refi->save_checkpoint(tmp.file("ref.dnv3"));

  // pretraining cannot restart from a refined checkpoint
  CHECK_THROWS_AS(Trainer::from_checkpoint(cfg, Phase::pretrain,
                                           tmp.file("ref.dnv3"), "", "again"),
                  LineageError);
  // lineage cycles are rejected
  CHECK_THROWS_AS(Trainer::from_checkpoint(cfg, Phase::refine,
                                           tmp.file("ref.dnv3"), "", "pre"),
                  LineageError);
  // model-shape mismatches are rejected
  Config other = tiny_config(41);
  other.set("vit.embed_dim", "64");
  other.set("vit.heads", "4");
  CHECK_THROWS_AS(Trainer::from_checkpoint(other, Phase::refine,
                                           tmp.file("pre.dnv3"), "", "x"),
                  LineageError);
}

TEST_CASE("ema teacher norm stays within the historical envelope") {
  Config cfg = tiny_config(43);
  auto tr = Trainer::create(cfg, "envelope");
  float max_student_inf = 0;
  for (auto& p : tr->teacher().params())
    for (std::int64_t i = 0; i < p.tensor->numel(); ++i)
      max_student_inf =
          std::max(max_student_inf, std::fabs(p.tensor->data()[i]));
  float envelope = max_student_inf;  // initial teacher = initial student
  for (int s = 0; s < 5; ++s) {
    tr->train_step();
    for (auto& p : tr->student().params())
      for (std::int64_t i = 0; i < p.tensor->numel(); ++i)
        envelope = std::max(envelope, std::fabs(p.tensor->data()[i]));
    float teacher_inf = 0;
    for (auto& p : tr->teacher().params())
      for (std::int64_t i = 0; i < p.tensor->numel(); ++i)
        teacher_inf = std::max(teacher_inf, std::fabs(p.tensor->data()[i]));
    CHECK(teacher_inf <= envelope + 1e-6f);
  }
}

TEST_CASE("adaptation phase draws mixed resolutions") {
  TmpDir tmp("md_adapt");
  Config cfg = tiny_config(47);
  auto tr = Trainer::create(cfg, "pre");
  tr->train_step();
  tr->save_checkpoint(tmp.file("pre.dnv3"));

  Config ca = cfg;
  ca.set("gram.refresh_interval", "0");
  auto ad = Trainer::from_checkpoint(ca, Phase::adapt, tmp.file("pre.dnv3"),
                                     "", "adapt");
  auto table = default_adapt_triples();
  bool saw_upsampled = false;
  for (int i = 0; i < 3; ++i) {
    CropBatch b = ad->peek_batch();
    bool known = false;
    for (const auto& t : table)
      if (b.global_size == t.global_size && b.local_size == t.local_size &&
          b.gram_size == t.gram_size)
        known = true;
    CHECK(known);
    if (b.global_size > 32) saw_upsampled = true;
    auto rep = ad->train_step();
    CHECK(std::isfinite(rep.total));
    CHECK(rep.gram >= 0.0);
  }
  (void)saw_upsampled;
}
