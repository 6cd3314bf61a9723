// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
//
// minidino — self-supervised ViT training at desk scale.
//
// Subcommands: pretrain, refine, hires-adapt, distill, curate, probe,
// diagnose, simulate-distill. Exit codes: 0 success, 2 configuration error,
// 3 numeric fault (NaN/Inf), 4 lineage error.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include <CLI11.hpp>

#include "minidino/curation.hpp"
#include "minidino/diagnostics.hpp"
#include "minidino/distill.hpp"
#include "minidino/image_io.hpp"
#include "minidino/runner.hpp"
#include "minidino/train.hpp"

namespace fs = std::filesystem;
using namespace minidino;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::string seed;
  std::string steps;
  std::string kernel;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool needs_out = true) {
  cmd->add_option("--config", o.config_path, "key = value configuration file");
  cmd->add_option("--set", o.overrides, "override, key=value (repeatable)");
  auto* out = cmd->add_option("--out", o.out, "run directory");
  if (needs_out) out->required();
  cmd->add_option("--seed", o.seed, "master seed (overrides run.seed)");
  cmd->add_option("--steps", o.steps, "steps to run (overrides run.steps)");
  cmd->add_option("--kernel", o.kernel,
                  "arithmetic backend (overrides run.kernel)");
}

Config resolve_config(const CommonOpts& o) {
  Config cfg = Config::defaults();
  if (!o.config_path.empty()) cfg.apply_file(o.config_path);
  for (const auto& kv : o.overrides) cfg.apply_override(kv);
  if (!o.seed.empty()) cfg.set("run.seed", o.seed);
  if (!o.steps.empty()) cfg.set("run.steps", o.steps);
  if (!o.kernel.empty()) cfg.set("run.kernel", o.kernel);
  kernels::Backend backend;
  bool is_auto;
  if (!kernels::parse_backend(cfg.get("run.kernel"), backend, is_auto))
    throw ConfigError("run.kernel: unknown backend '" +
                      cfg.get("run.kernel") + "'");
  kernels::select(backend);
  return cfg;
}

void log_collapse_metrics(RunDir& dir, Trainer& tr) {
  const Config& cfg = tr.config();
  const int n = (int)cfg.get_int("diag.images");
  const int res = (int)cfg.get_int("diag.resolution");
  const int radius = (int)cfg.get_int("diag.radius");
  double cls_cos = 0, loc = 0;
  Tape<float> off(false);
  for (int i = 0; i < n; ++i) {
    const int idx = tr.dataset().count() - 1 - i;  // held-out tail images
    TensorF img = tr.dataset().image(idx);
    if ((int)img.shape[0] != res)
      img = resize_region(img, 0, 0, (float)img.shape[0], res, false);
    auto out = vit_forward(off, tr.teacher().backbone, img, CropKind::global);
    cls_cos += cls_patch_cosine(out);
    FeatureMap f;
    f.h = (int)out.grid_h;
    f.w = (int)out.grid_w;
    f.d = (int)out.patches.shape[1];
    f.data.assign(out.patches.data(),
                  out.patches.data() + out.patches.numel());
    loc += locality_score(f, radius);
  }
  dir.append_diagnostic(tr.step(), "cls_patch_cosine", cls_cos / n);
  dir.append_diagnostic(tr.step(), "locality_score", loc / n);
}

int run_training(const std::string& subcommand, Phase phase,
                 const CommonOpts& opts, const std::string& from,
                 const std::string& gram_teacher) {
  Config cfg = resolve_config(opts);
  if (phase != Phase::pretrain && from.empty() ) {
    RunDir probe_dir(opts.out);  // still validates/locks the directory
    throw LineageError(subcommand + " requires --from <checkpoint>");
  }
  RunDir dir(opts.out);

  std::unique_ptr<Trainer> tr;
  const std::string resume_ckpt = dir.latest_checkpoint();
  if (!resume_ckpt.empty()) {
    const std::string stored = dir.manifest_config_hash();
    if (!stored.empty() && stored != cfg.hash_hex())
      throw ConfigError("run directory " + opts.out +
                        " was produced with a different configuration; "
                        "refusing to resume");
    tr = Trainer::from_checkpoint(cfg, phase, resume_ckpt, "", dir.run_id());
  } else if (phase == Phase::pretrain) {
    tr = Trainer::create(cfg, dir.run_id());
  } else {
    tr = Trainer::from_checkpoint(cfg, phase, from, gram_teacher,
                                  dir.run_id());
  }

  dir.write_config(cfg);
  const std::int64_t start = tr->step();
  const std::int64_t target = start + cfg.get_int("run.steps");
  const std::int64_t ckpt_interval = cfg.get_int("run.ckpt_interval");
  const std::int64_t diag_interval = cfg.get_int("diag.interval");
  dir.write_manifest(subcommand, cfg, phase, start, target, from);

  while (tr->step() < target) {
    LossReport rep = tr->train_step();
    dir.append_metrics(rep);
    if (ckpt_interval > 0 && tr->step() % ckpt_interval == 0)
      tr->save_checkpoint(dir.checkpoint_name(tr->step()));
    if (diag_interval > 0 && tr->step() % diag_interval == 0)
      log_collapse_metrics(dir, *tr);
  }
  tr->save_checkpoint(dir.checkpoint_name(tr->step()));
  dir.write_manifest(subcommand, cfg, phase, start, tr->step(), from);
  std::printf("%s: %lld steps complete, final checkpoint %s\n",
              subcommand.c_str(), (long long)(tr->step() - start),
              dir.checkpoint_name(tr->step()).c_str());
  return 0;
}

int run_distill(const CommonOpts& opts, const std::string& teacher_ckpt,
                const std::string& roster_path) {
  Config cfg = resolve_config(opts);
  RunDir dir(opts.out);
  auto roster = parse_roster(roster_path);
  auto dist = MultiStudentDistiller::create(cfg, teacher_ckpt, roster);
  dir.write_config(cfg);
  const std::int64_t target = cfg.get_int("run.steps");
  dir.write_manifest("distill", cfg, Phase::distill, 0, target, teacher_ckpt);

  std::vector<std::ofstream> metrics;
  for (int i = 0; i < dist->student_count(); ++i) {
    metrics.emplace_back(dir.file("metrics_" + roster[i].name + ".csv"),
                         std::ios::trunc);
    metrics.back() << LossReport::csv_header() << "\n";
  }
  while (dist->step() < target) {
    auto reports = dist->distill_step();
    for (int i = 0; i < dist->student_count(); ++i)
      metrics[i] << reports[i].csv_row() << "\n";
  }
  for (int i = 0; i < dist->student_count(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "student_%s_%08lld.dnv3",
                  roster[i].name.c_str(), (long long)dist->step());
    dist->save_student_checkpoint(i, dir.file(buf));
  }
  std::printf("distill: %lld steps over %d students complete\n",
              (long long)dist->step(), dist->student_count());
  return 0;
}

int run_curate(const CommonOpts& opts) {
  Config cfg = resolve_config(opts);
  RunDir dir(opts.out);
  dir.write_config(cfg);
  SyntheticShapes ds(cfg.get_u64("run.seed"),
                     (int)cfg.get_int("data.image_size"),
                     (int)cfg.get_int("data.dataset_size"));

  // embeddings
  std::vector<std::vector<double>> points;
  const std::string source = cfg.get("curate.embedding");
  if (source == "pixels") {
    // 8x8 RGB thumbnail per image
    Tape<float> off(false);
    for (int i = 0; i < ds.count(); ++i) {
      TensorF img = ds.image(i);
      TensorF small = off.bicubic_resize(img, 8, 8);
      points.emplace_back(small.data(), small.data() + small.numel());
    }
  } else if (source == "cls") {
    const std::string ckpt = cfg.get("curate.ckpt");
    if (ckpt.empty())
      throw ConfigError("curate.embedding = cls requires curate.ckpt");
    SslModel<float> model = load_model(ckpt, "teacher");
    std::vector<int> all(ds.count());
    std::iota(all.begin(), all.end(), 0);
    auto rows = cls_features(model.backbone, ds, all,
                             (int)cfg.get_int("diag.resolution"));
    for (auto& r : rows) points.emplace_back(r.begin(), r.end());
  } else {
    throw ConfigError("curate.embedding must be pixels or cls");
  }

  std::vector<int> levels;
  {
    std::istringstream ls(cfg.get("curate.levels"));
    std::string tok;
    while (std::getline(ls, tok, ',')) levels.push_back(std::stoi(tok));
  }
  auto h = build_hierarchy(points, levels,
                           (int)cfg.get_int("curate.max_iter"),
                           cfg.get_u64("run.seed"));
  CurationReport report;
  auto sample = balanced_sample(h, (int)cfg.get_int("curate.sample_size"),
                                cfg.get_u64("run.seed"), &report);
  {
    std::ofstream os(dir.file("part_curated.txt"), std::ios::trunc);
    for (int idx : sample) os << idx << "\n";
  }
  {
    std::ofstream os(dir.file("curation_report.csv"), std::ios::trunc);
    os << report.csv();
  }
  dir.write_manifest("curate", cfg, Phase::pretrain, 0, 0, "");
  std::printf("curate: sampled %d of %d into %s (top-level entropy %.4f)\n",
              report.sampled, ds.count(),
              dir.file("part_curated.txt").c_str(),
              report.balance_entropy.back());
  return 0;
}

int run_probe(const CommonOpts& opts, const std::string& ckpt,
              const std::string& task, const std::string& which) {
  Config cfg = resolve_config(opts);
  Config saved;
  SslModel<float> model = load_model(ckpt, which, &saved);
  SyntheticShapes ds(saved.get_u64("run.seed"),
                     (int)saved.get_int("data.image_size"),
                     (int)saved.get_int("data.dataset_size"));
  const int train_n = (int)cfg.get_int("probe.train_n");
  const int test_n = (int)cfg.get_int("probe.test_n");
  if (train_n + test_n > ds.count())
    throw ConfigError("probe: train_n + test_n exceeds the dataset");
  const int res = (int)cfg.get_int("diag.resolution");
  std::vector<int> train_idx(train_n), test_idx(test_n);
  std::iota(train_idx.begin(), train_idx.end(), 0);
  std::iota(test_idx.begin(), test_idx.end(), train_n);

  ProbeResult result;
  if (task == "knn" || task == "linear") {
    auto feats = [&](const std::vector<int>& idx) {
      return cls_features(model.backbone, ds, idx, res);
    };
    std::vector<int> ytr, yte;
    for (int i : train_idx) ytr.push_back(ds.label(i));
    for (int i : test_idx) yte.push_back(ds.label(i));
    if (task == "knn") {
      result = knn_probe(feats(train_idx), ytr, feats(test_idx), yte,
                         (int)cfg.get_int("probe.knn_k"));
    } else {
      result = linear_probe(feats(train_idx), ytr, feats(test_idx), yte,
                            SyntheticShapes::num_classes(),
                            {1e-4, 3e-4, 1e-3}, {1e-4, 1e-3},
                            (int)cfg.get_int("probe.epochs"),
                            saved.get_u64("run.seed"));
    }
  } else if (task == "dense") {
    // per-patch linear probe against the shape masks
    const int patch = (int)saved.get_int("vit.patch");
    auto patch_rows = [&](const std::vector<int>& idx,
                          std::vector<std::vector<float>>& feats,
                          std::vector<int>& labels) {
      Tape<float> off(false);
      for (int i : idx) {
        TensorF img = ds.image(i);
        if ((int)img.shape[0] != res)
          img = resize_region(img, 0, 0, (float)img.shape[0], res, false);
        auto out = vit_forward(off, model.backbone, img, CropKind::global);
        auto mask = ds.shape_mask(i);
        const int src = ds.image_size();
        const int gw = (int)out.grid_w;
        for (int p = 0; p < (int)out.patches.shape[0]; ++p) {
          feats.emplace_back(
              out.patches.data() + p * out.patches.shape[1],
              out.patches.data() + (p + 1) * out.patches.shape[1]);
          // majority pixel class inside the patch cell (source resolution)
          const int py = p / gw, px = p % gw;
          const int cell = res / gw;
          int counts[4] = {0, 0, 0, 0};
          for (int yy = 0; yy < cell; ++yy)
            for (int xx = 0; xx < cell; ++xx) {
              const int sy = std::min(src - 1, (py * cell + yy) * src / res);
              const int sx = std::min(src - 1, (px * cell + xx) * src / res);
              counts[mask[sy * src + sx]]++;
            }
          int best = 0;
          for (int c = 1; c < 4; ++c)
            if (counts[c] > counts[best]) best = c;
          labels.push_back(best);
        }
      }
      (void)patch;
    };
    std::vector<std::vector<float>> ftr, fte;
    std::vector<int> ytr, yte;
    const int dense_train = std::min(train_n, 48);
    const int dense_test = std::min(test_n, 24);
    std::vector<int> dtr(train_idx.begin(), train_idx.begin() + dense_train);
    std::vector<int> dte(test_idx.begin(), test_idx.begin() + dense_test);
    patch_rows(dtr, ftr, ytr);
    patch_rows(dte, fte, yte);
    result = linear_probe(ftr, ytr, fte, yte, 4, {1e-4, 3e-4, 1e-3},
                          {1e-4, 1e-3}, (int)cfg.get_int("probe.epochs"),
                          saved.get_u64("run.seed"));
    result.task = "dense";
  } else {
    throw ConfigError("probe: task must be knn, linear or dense");
  }

  std::printf("probe %s on %s(%s): %s = %.4f  [%s] train=%d test=%d\n",
              result.task.c_str(), ckpt.c_str(), which.c_str(),
              result.metric.c_str(), result.value,
              result.hyperparameters.c_str(), result.train_n, result.test_n);
  if (!opts.out.empty()) {
    RunDir dir(opts.out);
    std::ofstream os(dir.file("probes.csv"), std::ios::app);
    os << result.task << "," << result.metric << "," << result.value << ","
       << result.hyperparameters << "," << ckpt << "\n";
  }
  return 0;
}

int run_diagnose(const CommonOpts& opts, const std::string& ckpt, int layer,
                 int res, int image_index, const std::string& which) {
  Config cfg = resolve_config(opts);
  Config saved;
  SslModel<float> model = load_model(ckpt, which, &saved);
  SyntheticShapes ds(saved.get_u64("run.seed"),
                     (int)saved.get_int("data.image_size"),
                     (int)saved.get_int("data.dataset_size"));
  if (image_index < 0 || image_index >= ds.count())
    throw ConfigError("diagnose: image index out of range");
  RunDir dir(opts.out);
  TensorF img = ds.image(image_index);
  if ((int)img.shape[0] != res)
    img = resize_region(img, 0, 0, (float)img.shape[0], res, false);

  FeatureMap f = backbone_features(model.backbone, img, layer, true);
  f.prov.checkpoint = ckpt;

  auto cosmap = cosine_map(f, f.h / 2, f.w / 2);
  write_pgm(dir.file("images/cosine_map.pgm"), cosmap, f.h, f.w, -1.0f, 1.0f);
  auto pca = pca_rgb(f, -1);
  write_ppm(dir.file("images/pca.ppm"), pca.rgb, pca.h, pca.w);
  {
    std::vector<float> rgb(img.data(), img.data() + img.numel());
    write_ppm(dir.file("images/input.ppm"), rgb, (int)img.shape[0],
              (int)img.shape[1]);
  }
  Tape<float> off(false);
  auto out = vit_forward(off, model.backbone, img, CropKind::global);
  const double ccos = cls_patch_cosine(out);
  const double loc = locality_score(f, (int)cfg.get_int("diag.radius"));
  CheckpointMeta meta = Trainer::peek_meta(ckpt);
  dir.append_diagnostic(meta.step, "cls_patch_cosine", ccos);
  dir.append_diagnostic(meta.step, "locality_score", loc);
  dir.append_diagnostic(meta.step, "pca_variant", pca.variant);
  std::printf(
      "diagnose %s layer=%d res=%d: cls_patch_cosine=%.4f locality=%.4f "
      "pca_variant=%d -> %s\n",
      ckpt.c_str(), layer, res, ccos, loc, pca.variant,
      dir.file("images").c_str());
  return 0;
}

int run_simulate(const CommonOpts& opts, const std::string& roster_path,
                 double teacher_cost, double batch, int workers) {
  auto roster = parse_roster(roster_path);
  CostModel m;
  m.teacher_cost = teacher_cost;
  m.batch_size = batch;
  m.workers = workers;
  for (const auto& s : roster) m.student_costs.push_back(s.cost);
  auto plan = plan_assignment(m);
  auto timeline = simulate_iteration(plan, m);
  std::printf("plan for %d workers, B=%g, C_T=%g:\n", workers, batch,
              teacher_cost);
  for (std::size_t i = 0; i < roster.size(); ++i)
    std::printf("  %-12s workers=%d teacher_share=%g student_share=%g "
                "idle=%g\n",
                roster[i].name.c_str(), plan.workers_per_student[i],
                plan.teacher_share, plan.student_shares[i], plan.idle[i]);
  std::printf("  makespan=%g\n", plan.makespan);
  if (!opts.out.empty()) {
    RunDir dir(opts.out);
    std::ofstream os(dir.file("plan.csv"), std::ios::trunc);
    os << plan.csv();
    std::ofstream ts(dir.file("timeline.csv"), std::ios::trunc);
    ts << timeline.csv();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "minidino: desk-scale self-supervised ViT training with Gram-anchored "
      "refinement, multi-student distillation and curation tooling"};
  app.require_subcommand(1);

  CommonOpts pre_o, ref_o, adapt_o, dist_o, cur_o, probe_o, diag_o, sim_o;
  std::string from, gram_teacher, teacher_ckpt, roster, probe_ckpt,
      probe_task = "knn", probe_which = "teacher", diag_ckpt,
      diag_which = "teacher";
  int diag_layer = -1, diag_res = 64, diag_image = 0;
  double sim_ct = 4.0, sim_batch = 128.0;
  int sim_workers = 8;

  auto* pre = app.add_subcommand("pretrain", "composite-objective pretraining");
  add_common(pre, pre_o);

  auto* ref = app.add_subcommand("refine", "Gram-anchored refinement");
  add_common(ref, ref_o);
  ref->add_option("--from", from, "source checkpoint");
  ref->add_option("--gram-teacher", gram_teacher,
                  "frozen Gram teacher checkpoint (default: parent teacher)");

  auto* adapt = app.add_subcommand("hires-adapt",
                                   "mixed-resolution adaptation");
  add_common(adapt, adapt_o);
  adapt->add_option("--from", from, "source checkpoint");
  adapt->add_option("--gram-teacher", gram_teacher,
                    "frozen Gram teacher checkpoint");

  auto* dist = app.add_subcommand("distill", "multi-student distillation");
  add_common(dist, dist_o);
  dist->add_option("--teacher", teacher_ckpt, "frozen teacher checkpoint")
      ->required();
  dist->add_option("--roster", roster, "roster file: name, depth, dim, cost")
      ->required();

  auto* cur = app.add_subcommand("curate", "hierarchical k-means curation");
  add_common(cur, cur_o);

  auto* prb = app.add_subcommand("probe", "kNN / linear / dense probes");
  add_common(prb, probe_o, /*needs_out=*/false);
  prb->add_option("--ckpt", probe_ckpt, "checkpoint to evaluate")->required();
  prb->add_option("--task", probe_task, "knn | linear | dense");
  prb->add_option("--which", probe_which, "student | teacher");

  auto* diag = app.add_subcommand("diagnose", "feature maps and collapse "
                                              "metrics");
  add_common(diag, diag_o);
  diag->add_option("--ckpt", diag_ckpt, "checkpoint to inspect")->required();
  diag->add_option("--layer", diag_layer, "tap layer (1-based, -1 = final)");
  diag->add_option("--res", diag_res, "input resolution");
  diag->add_option("--image", diag_image, "dataset image index");
  diag->add_option("--which", diag_which, "student | teacher");

  auto* sim = app.add_subcommand("simulate-distill",
                                 "cost model and pipeline simulation");
  add_common(sim, sim_o, /*needs_out=*/false);
  sim->add_option("--roster", roster, "roster file")->required();
  sim->add_option("--ct", sim_ct, "teacher cost per sample");
  sim->add_option("--batch", sim_batch, "global batch size");
  sim->add_option("--workers", sim_workers, "total worker count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    if (pre->parsed())
      return run_training("pretrain", Phase::pretrain, pre_o, "", "");
    if (ref->parsed())
      return run_training("refine", Phase::refine, ref_o, from, gram_teacher);
    if (adapt->parsed())
      return run_training("hires-adapt", Phase::adapt, adapt_o, from,
                          gram_teacher);
    if (dist->parsed()) return run_distill(dist_o, teacher_ckpt, roster);
    if (cur->parsed()) return run_curate(cur_o);
    if (prb->parsed())
      return run_probe(probe_o, probe_ckpt, probe_task, probe_which);
    if (diag->parsed())
      return run_diagnose(diag_o, diag_ckpt, diag_layer, diag_res, diag_image,
                          diag_which);
    if (sim->parsed())
      return run_simulate(sim_o, roster, sim_ct, sim_batch, sim_workers);
  } catch (const NumericFault& e) {
    std::fprintf(stderr, "numeric fault: %s\n", e.what());
    return 3;
  } catch (const LineageError& e) {
    std::fprintf(stderr, "lineage error: %s\n", e.what());
    return 4;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
