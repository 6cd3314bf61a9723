// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#include "minidino/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace minidino {

namespace {

std::string meta_text(const CheckpointMeta& m) {
  std::ostringstream os;
  os << "step = " << m.step << "\n";
  os << "phase_start = " << m.phase_start << "\n";
  os << "phase = " << phase_name(m.phase) << "\n";
  os << "gram_refreshes = " << m.gram_refreshes << "\n";
  os << "run_id = " << m.run_id << "\n";
  os << "lineage =";
  for (const auto& l : m.lineage) os << " " << l;
  os << "\n";
  return os.str();
}

CheckpointMeta parse_meta(const std::string& text) {
  CheckpointMeta m;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string()
                                    : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "step") m.step = std::stoll(value);
    else if (key == "phase_start") m.phase_start = std::stoll(value);
    else if (key == "phase") m.phase = parse_phase(value);
    else if (key == "gram_refreshes") m.gram_refreshes = std::stoi(value);
    else if (key == "run_id") m.run_id = value;
    else if (key == "lineage") {
      std::istringstream ls(value);
      std::string tok;
      while (ls >> tok) m.lineage.push_back(tok);
    }
  }
  return m;
}

// Model-defining keys must agree between a checkpoint and the resuming or
// derived run.
const char* kModelKeys[] = {
    "run.seed",          "data.image_size",   "data.dataset_size",
    "vit.depth",         "vit.embed_dim",     "vit.heads",
    "vit.patch",         "vit.ffn_hidden",    "vit.registers",
    "vit.outlier_strategy", "vit.separate_output_norms",
    "head.hidden",       "head.bottleneck",   "head.dino_prototypes",
    "head.ibot_prototypes"};

void check_model_compat(const Config& current, const std::string& ckpt_text,
                        const std::string& ckpt_path) {
  Config saved = Config::defaults();
  saved.apply_text(ckpt_text, ckpt_path + ":__config__");
  for (const char* key : kModelKeys)
    if (current.get(key) != saved.get(key))
      throw LineageError("checkpoint " + ckpt_path + " was produced with " +
                         key + " = " + saved.get(key) +
                         ", current config says " + current.get(key));
}

void save_params_f32(TensorStore& store, const std::string& prefix,
                     std::vector<ParamRef<float>> params) {
  for (auto& p : params) store.put_f32(prefix + "/" + p.name, *p.tensor);
}

void load_params_f32(const TensorStore& store, const std::string& prefix,
                     std::vector<ParamRef<float>> params) {
  for (auto& p : params)
    store.load_into(prefix + "/" + p.name, *p.tensor);
}

std::vector<int> load_index_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open part index file " + path);
  std::vector<int> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(std::stoi(line));
  }
  return out;
}

}  // namespace

ViTConfig vit_config_from(const Config& cfg) {
  ViTConfig v;
  v.depth = (int)cfg.get_int("vit.depth");
  v.embed_dim = (int)cfg.get_int("vit.embed_dim");
  v.head_count = (int)cfg.get_int("vit.heads");
  v.patch_size = (int)cfg.get_int("vit.patch");
  v.ffn_hidden = (int)cfg.get_int("vit.ffn_hidden");
  v.register_count = (int)cfg.get_int("vit.registers");
  v.strategy = parse_outlier_strategy(cfg.get("vit.outlier_strategy"));
  v.stochastic_depth = (float)cfg.get_double("vit.stochastic_depth");
  v.separate_output_norms = cfg.get_bool("vit.separate_output_norms");
  v.jitter_min = (float)cfg.get_double("vit.jitter_min");
  v.jitter_max = (float)cfg.get_double("vit.jitter_max");
  v.validate();
  return v;
}

ScheduleConfig schedule_config_from(const Config& cfg) {
  ScheduleConfig s;
  s.base_lr = cfg.get_double("sched.base_lr");
  s.warmup_steps = (int)cfg.get_int("sched.warmup_steps");
  s.weight_decay = cfg.get_double("sched.weight_decay");
  s.layerwise_decay = cfg.get_double("sched.layerwise_decay");
  s.ema_momentum = cfg.get_double("sched.ema_momentum");
  s.total_steps = (int)cfg.get_int("run.steps");
  s.teacher_temp_start = cfg.get_double("loss.teacher_temp_start");
  s.teacher_temp_end = cfg.get_double("loss.teacher_temp_end");
  s.student_temp = cfg.get_double("loss.student_temp");
  s.validate();
  return s;
}

CropConfig crop_config_from(const Config& cfg) {
  CropConfig c;
  c.global_size = (int)cfg.get_int("crops.global_size");
  c.local_size = (int)cfg.get_int("crops.local_size");
  c.n_local = (int)cfg.get_int("crops.n_local");
  c.patch_size = (int)cfg.get_int("vit.patch");
  c.global_area_min = (float)cfg.get_double("crops.global_area_min");
  c.global_area_max = (float)cfg.get_double("crops.global_area_max");
  c.local_area_min = (float)cfg.get_double("crops.local_area_min");
  c.local_area_max = (float)cfg.get_double("crops.local_area_max");
  c.mask_prob = (float)cfg.get_double("crops.mask_prob");
  c.mask_frac_min = (float)cfg.get_double("crops.mask_frac_min");
  c.mask_frac_max = (float)cfg.get_double("crops.mask_frac_max");
  c.jitter_min = (float)cfg.get_double("vit.jitter_min");
  c.jitter_max = (float)cfg.get_double("vit.jitter_max");
  c.color_jitter = cfg.get_bool("crops.color_jitter");
  c.flip = cfg.get_bool("crops.flip");
  return c;
}

SslModel<float> load_model(const std::string& ckpt_path,
                           const std::string& which, Config* cfg_out) {
  TensorStore store = TensorStore::load(ckpt_path);
  Config saved = Config::defaults();
  saved.apply_text(store.get_text("__config__"), ckpt_path + ":__config__");
  Rng tmp(0);
  SslModel<float> model = SslModel<float>::init(
      vit_config_from(saved), (int)saved.get_int("head.hidden"),
      (int)saved.get_int("head.bottleneck"),
      (int)saved.get_int("head.dino_prototypes"),
      (int)saved.get_int("head.ibot_prototypes"), tmp);
  load_params_f32(store, which, model.params());
  if (cfg_out) *cfg_out = saved;
  return model;
}

Trainer::Trainer(const Config& cfg, const std::string& run_id)
    : cfg_(cfg), run_id_(run_id), seed_(cfg.get_u64("run.seed")) {
  const ViTConfig vcfg = vit_config_from(cfg);
  const int hidden = (int)cfg.get_int("head.hidden");
  const int bottleneck = (int)cfg.get_int("head.bottleneck");
  const int dino_k = (int)cfg.get_int("head.dino_prototypes");
  const int ibot_k = (int)cfg.get_int("head.ibot_prototypes");
  Rng init_rng = rng_at(seed_, Stream::init);
  student_ = SslModel<float>::init(vcfg, hidden, bottleneck, dino_k, ibot_k,
                                   init_rng);
  Rng teacher_rng = rng_at(seed_, Stream::init);
  teacher_ = SslModel<float>::init(vcfg, hidden, bottleneck, dino_k, ibot_k,
                                   teacher_rng);
  dataset_.emplace(seed_, (int)cfg.get_int("data.image_size"),
                   (int)cfg.get_int("data.dataset_size"));
  sched_ = schedule_config_from(cfg);
  crops_ = crop_config_from(cfg);
  triples_ = default_adapt_triples();
  // teacher starts as an exact copy of the student
  copy_params(teacher_.params(), student_.params());

  const std::string parts = cfg.get("data.parts");
  const double p_hom = cfg.get_double("data.p_homogeneous");
  if (!parts.empty() || p_hom > 0.0) {
    MixSampler ms;
    ms.p_homogeneous = p_hom;
    const std::string hom = cfg.get("data.homogeneous_part");
    if (hom.empty()) {
      ms.homogeneous.name = "all";
      for (int i = 0; i < dataset_->count(); ++i)
        ms.homogeneous.indices.push_back(i);
    } else {
      ms.homogeneous.name = hom;
      ms.homogeneous.indices = load_index_file(hom);
    }
    if (parts.empty()) {
      ms.parts.push_back(ms.homogeneous);
    } else {
      std::istringstream ps(parts);
      std::string tok;
      while (std::getline(ps, tok, ',')) {
        const auto colon = tok.rfind(':');
        DataPart part;
        part.name = colon == std::string::npos ? tok : tok.substr(0, colon);
        part.weight =
            colon == std::string::npos ? 1.0 : std::stod(tok.substr(colon + 1));
        part.indices = load_index_file(part.name);
        ms.parts.push_back(std::move(part));
      }
    }
    sampler_ = std::move(ms);
  }
}

void Trainer::attach_optimizer() {
  opt_ = AdamW<float>();
  opt_.attach(student_.params(), student_.backbone.cfg.depth);
}

std::unique_ptr<Trainer> Trainer::create(const Config& cfg,
                                         const std::string& run_id) {
  auto t = std::unique_ptr<Trainer>(new Trainer(cfg, run_id));
  t->phase_ = Phase::pretrain;
  t->attach_optimizer();
  return t;
}

std::unique_ptr<Trainer> Trainer::from_checkpoint(
    const Config& cfg, Phase phase, const std::string& ckpt_path,
    const std::string& gram_teacher_ckpt, const std::string& run_id) {
  TensorStore store = TensorStore::load(ckpt_path);
  CheckpointMeta meta = parse_meta(store.get_text("__meta__"));
  check_model_compat(cfg, store.get_text("__config__"), ckpt_path);
  for (const auto& ancestor : meta.lineage)
    if (ancestor == run_id)
      throw LineageError("lineage cycle: run id '" + run_id +
                         "' already appears in the ancestry of " + ckpt_path);

  const bool resuming = meta.phase == phase && meta.run_id == run_id;
  if (!resuming) {
    // phase transitions: refine/adapt continue from any trained state;
    // pretraining never starts from a refined model
    if (phase == Phase::pretrain && meta.phase != Phase::pretrain)
      throw LineageError("cannot resume pretraining from a " +
                         std::string(phase_name(meta.phase)) + " checkpoint");
  }

  auto t = std::unique_ptr<Trainer>(new Trainer(cfg, run_id));
  t->phase_ = phase;
  t->attach_optimizer();
  t->load_state(store);
  t->lineage_ = meta.lineage;
  if (!resuming) {
    t->lineage_.push_back(meta.run_id);
    t->phase_start_ = t->step_;
    t->gram_refreshes_ = 0;
  } else {
    t->phase_start_ = meta.phase_start;
    t->gram_refreshes_ = meta.gram_refreshes;
  }

  if (phase == Phase::refine || phase == Phase::adapt) {
    ViTConfig vcfg = vit_config_from(cfg);
    Rng tmp(0);
    if (!t->gram_teacher_) t->gram_teacher_.emplace();
    if (!gram_teacher_ckpt.empty()) {
      TensorStore gstore = TensorStore::load(gram_teacher_ckpt);
      check_model_compat(cfg, gstore.get_text("__config__"),
                         gram_teacher_ckpt);
      *t->gram_teacher_ = ViTState<float>::init(vcfg, tmp);
      load_params_f32(gstore, "teacher", t->gram_teacher_->params());
    } else if (store.contains("gram_teacher/patch_embed/w")) {
      // resuming a refinement run: the frozen teacher travels in the ckpt
      *t->gram_teacher_ = ViTState<float>::init(vcfg, tmp);
      load_params_f32(store, "gram_teacher", t->gram_teacher_->params());
    } else {
      // default: the parent checkpoint's EMA teacher
      *t->gram_teacher_ = ViTState<float>::init(vcfg, tmp);
      copy_params(t->gram_teacher_->params(), t->teacher_.backbone.params());
    }
  }
  return t;
}

void Trainer::load_state(const TensorStore& store) {
  load_params_f32(store, "student", student_.params());
  load_params_f32(store, "teacher", teacher_.params());
  opt_.load(store, "opt");
  CheckpointMeta meta = parse_meta(store.get_text("__meta__"));
  step_ = meta.step;
  if (store.contains("gram_teacher/patch_embed/w")) {
    Rng tmp(0);
    gram_teacher_.emplace(
        ViTState<float>::init(vit_config_from(cfg_), tmp));
    load_params_f32(store, "gram_teacher", gram_teacher_->params());
  }
}

void Trainer::save_checkpoint(const std::string& path) {
  TensorStore store;
  save_params_f32(store, "student", student_.params());
  save_params_f32(store, "teacher", teacher_.params());
  opt_.save(store, "opt");
  if (gram_teacher_)
    save_params_f32(store, "gram_teacher", gram_teacher_->params());
  CheckpointMeta meta;
  meta.step = step_;
  meta.phase_start = phase_start_;
  meta.phase = phase_;
  meta.gram_refreshes = gram_refreshes_;
  meta.run_id = run_id_;
  meta.lineage = lineage_;
  store.put_text("__meta__", meta_text(meta));
  store.put_text("__config__", cfg_.canonical_text());
  store.save(path);
}

CheckpointMeta Trainer::peek_meta(const std::string& path) {
  TensorStore store = TensorStore::load(path);
  CheckpointMeta m = parse_meta(store.get_text("__meta__"));
  m.config_text = store.get_text("__config__");
  return m;
}

std::vector<int> Trainer::draw_indices(std::int64_t step) {
  const int bs = (int)cfg_.get_int("batch.size");
  Rng rng = rng_at(seed_, Stream::mixer, (std::uint64_t)step);
  if (sampler_) return sampler_->next_batch(bs, rng).indices;
  std::vector<int> out(bs);
  for (int i = 0; i < bs; ++i)
    out[i] = (int)rng.randint((std::uint64_t)dataset_->count());
  return out;
}

CropBatch Trainer::make_batch(std::int64_t step) {
  CropConfig cc = crops_;
  if (phase_ == Phase::adapt) {
    Rng rng = rng_at(seed_, Stream::resolution, (std::uint64_t)step);
    const ResolutionTriple& t = draw_triple(triples_, rng);
    cc.global_size = t.global_size;
    cc.local_size = t.local_size;
    cc.gram_size = t.gram_size;
    cc.allow_upsample = true;
  } else if (phase_ == Phase::refine) {
    cc.gram_size =
        cc.global_size * (int)cfg_.get_int("gram.highres_factor");
  }
  Rng crop_rng = rng_at(seed_, Stream::crops, (std::uint64_t)step);
  Rng mask_rng = rng_at(seed_, Stream::masks, (std::uint64_t)step);
  Rng jitter_rng = rng_at(seed_, Stream::rope_jitter, (std::uint64_t)step);
  return sample_crops(*dataset_, draw_indices(step), cc, crop_rng, mask_rng,
                      jitter_rng);
}

void Trainer::maybe_refresh_gram_teacher() {
  if (phase_ != Phase::refine && phase_ != Phase::adapt) return;
  const int interval = (int)cfg_.get_int("gram.refresh_interval");
  const int max_refresh = (int)cfg_.get_int("gram.max_refreshes");
  if (interval <= 0 || gram_refreshes_ >= max_refresh) return;
  const std::int64_t into_phase = step_ - phase_start_;
  if (into_phase > 0 && into_phase % interval == 0) {
    copy_params(gram_teacher_->params(), teacher_.backbone.params());
    ++gram_refreshes_;
  }
}

LossReport Trainer::train_step() {
  const ScheduleValues sv = schedule_at(step_, sched_);
  maybe_refresh_gram_teacher();
  CropBatch batch = make_batch(step_);

  PipelineConfig pc;
  pc.phase = phase_;
  pc.weights.dino = cfg_.get_double("loss.w_dino");
  pc.weights.ibot = 1.0;
  pc.weights.koleo = cfg_.get_double("loss.w_koleo");
  pc.weights.gram = (phase_ == Phase::refine || phase_ == Phase::adapt)
                        ? cfg_.get_double("loss.w_gram")
                        : 0.0;
  pc.student_temp = sched_.student_temp;
  pc.teacher_temp = sv.teacher_temp;
  pc.sinkhorn_iters = (int)cfg_.get_int("loss.sinkhorn_iters");
  pc.koleo_group = (int)cfg_.get_int("loss.koleo_group");

  Tape<float> tape;
  auto res = forward_losses<float>(tape, student_, teacher_,
                                   gram_teacher_ ? &*gram_teacher_ : nullptr,
                                   batch, pc);
  if (!std::isfinite(res.report.total))
    throw NumericFault("non-finite training loss at step " +
                       std::to_string(step_));
  tape.backward(res.total);
  opt_.step(sv.lr, sv.wd, sched_.layerwise_decay);
  student_.renormalize_prototypes();
  opt_.zero_grad();
  ema_update(teacher_.params(), student_.params(), (float)sv.ema_momentum);

  res.report.step = step_;
  res.report.lr = sv.lr;
  ++step_;
  return res.report;
}

}  // namespace minidino
