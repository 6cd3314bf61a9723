// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#include "minidino/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace minidino {

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void Config::add(const std::string& key, const std::string& value,
                 const std::string& help) {
  index_[key] = entries_.size();
  entries_.push_back({key, value, help});
}

Config Config::defaults() {
  Config c;
  // run
  c.add("run.seed", "0", "master seed; every random stream derives from it");
  c.add("run.steps", "10000", "steps to train in this phase run");
  c.add("run.ckpt_interval", "2000", "checkpoint every N steps");
  c.add("run.kernel", "auto", "arithmetic backend: auto|scalar|avx2|neon");
  // data
  c.add("data.image_size", "64", "synthetic scene side length in pixels");
  c.add("data.dataset_size", "2048", "number of synthetic samples");
  c.add("data.p_homogeneous", "0.0",
        "probability of a homogeneous batch from the designated part");
  c.add("data.homogeneous_part", "",
        "index file of the high-quality part (empty = whole dataset)");
  c.add("data.parts", "",
        "comma list of part index files with weights, file:weight,...");
  // vit
  c.add("vit.depth", "4", "transformer block count");
  c.add("vit.embed_dim", "64", "token embedding dimension");
  c.add("vit.heads", "4", "attention head count");
  c.add("vit.patch", "8", "patch size in pixels");
  c.add("vit.ffn_hidden", "128", "SwiGLU hidden dimension");
  c.add("vit.registers", "4", "register token count");
  c.add("vit.outlier_strategy", "registers",
        "registers|attention_bias|value_gating|none");
  c.add("vit.stochastic_depth", "0.0", "residual branch drop rate");
  c.add("vit.separate_output_norms", "true",
        "dedicated output norms for global and local crops");
  c.add("vit.jitter_min", "0.5", "RoPE box jitter lower bound");
  c.add("vit.jitter_max", "2.0", "RoPE box jitter upper bound");
  // heads
  c.add("head.hidden", "256", "projection head hidden width");
  c.add("head.bottleneck", "64", "projection head bottleneck width");
  c.add("head.dino_prototypes", "64", "DINO prototype count");
  c.add("head.ibot_prototypes", "64", "iBOT prototype count");
  // losses
  c.add("loss.w_dino", "1.0", "DINO loss weight");
  c.add("loss.w_koleo", "0.1", "Koleo loss weight");
  c.add("loss.w_gram", "2.0", "Gram loss weight in refinement");
  c.add("loss.koleo_group", "16", "Koleo sub-batch size");
  c.add("loss.sinkhorn_iters", "3", "Sinkhorn-Knopp iterations");
  c.add("loss.student_temp", "0.1", "student softmax temperature");
  c.add("loss.teacher_temp_start", "0.04", "teacher temperature at step 0");
  c.add("loss.teacher_temp_end", "0.07",
        "teacher temperature after warmup (constant thereafter)");
  // schedule
  c.add("sched.base_lr", "0.0004", "constant learning rate after warmup");
  c.add("sched.warmup_steps", "1000", "linear warmup length");
  c.add("sched.weight_decay", "0.04", "decoupled weight decay");
  c.add("sched.layerwise_decay", "0.98", "per-layer learning rate decay");
  c.add("sched.ema_momentum", "0.999", "teacher EMA momentum");
  // crops
  c.add("crops.global_size", "32", "global crop side in pixels");
  c.add("crops.local_size", "16", "local crop side in pixels");
  c.add("crops.n_local", "8", "local crops per image");
  c.add("crops.global_area_min", "0.3", "global crop area fraction lower");
  c.add("crops.global_area_max", "1.0", "global crop area fraction upper");
  c.add("crops.local_area_min", "0.08", "local crop area fraction lower");
  c.add("crops.local_area_max", "0.4", "local crop area fraction upper");
  c.add("crops.mask_prob", "0.5", "probability a global crop is masked");
  c.add("crops.mask_frac_min", "0.1", "masked patch fraction lower bound");
  c.add("crops.mask_frac_max", "0.5", "masked patch fraction upper bound");
  c.add("crops.color_jitter", "true", "brightness/contrast jitter");
  c.add("crops.flip", "true", "random horizontal flip");
  // batch
  c.add("batch.size", "4", "images per step");
  // gram anchoring
  c.add("gram.highres_factor", "2",
        "gram teacher input resolution multiple of the global crop");
  c.add("gram.refresh_interval", "100",
        "refresh the gram teacher from the EMA teacher every N steps (0 = "
        "never)");
  c.add("gram.max_refreshes", "3", "refresh count ceiling");
  // probes
  c.add("probe.knn_k", "5", "kNN neighbor count");
  c.add("probe.train_n", "256", "probe training set size");
  c.add("probe.test_n", "128", "probe test set size");
  c.add("probe.epochs", "30", "linear probe epochs per grid cell");
  // in-run diagnostics
  c.add("diag.interval", "0",
        "log collapse metrics every N steps (0 = off)");
  c.add("diag.images", "16", "held-out images per diagnostic evaluation");
  c.add("diag.resolution", "64", "diagnostic forward resolution");
  c.add("diag.radius", "1", "locality score Chebyshev radius");
  // curation
  c.add("curate.levels", "64,16,4",
        "cluster counts per hierarchy level, highest resolution first");
  c.add("curate.sample_size", "512", "curated part size");
  c.add("curate.embedding", "pixels",
        "embedding source: pixels | cls (needs curate.ckpt)");
  c.add("curate.ckpt", "", "checkpoint supplying CLS embeddings");
  c.add("curate.max_iter", "50", "Lloyd iteration cap");
  return c;
}

void Config::apply_text(const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  std::vector<std::string> unknown;
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
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": expected `key = value`, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = index_.find(key);
    if (it == index_.end()) {
      unknown.push_back(key);
      continue;
    }
    entries_[it->second].value = value;
  }
  if (!unknown.empty()) {
    std::string msg = origin + ": unknown configuration keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }
}

void Config::apply_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  apply_text(ss.str(), path);
}

void Config::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must be key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  auto it = index_.find(key);
  if (it == index_.end())
    throw ConfigError("unknown configuration keys: " + key);
  entries_[it->second].value = assignment.substr(eq + 1);
}

bool Config::has(const std::string& key) const { return index_.count(key); }

const std::string& Config::get(const std::string& key) const {
  auto it = index_.find(key);
  if (it == index_.end())
    throw ConfigError("unknown configuration keys: " + key);
  return entries_[it->second].value;
}

void Config::set(const std::string& key, const std::string& value) {
  auto it = index_.find(key);
  if (it == index_.end())
    throw ConfigError("unknown configuration keys: " + key);
  entries_[it->second].value = value;
}

std::int64_t Config::get_int(const std::string& key) const {
  try {
    std::size_t pos = 0;
    auto v = std::stoll(get(key), &pos);
    if (pos != get(key).size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected integer, got '" + get(key) + "'");
  }
}

std::uint64_t Config::get_u64(const std::string& key) const {
  try {
    std::size_t pos = 0;
    auto v = std::stoull(get(key), &pos);
    if (pos != get(key).size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected unsigned integer, got '" + get(key) +
                      "'");
  }
}

double Config::get_double(const std::string& key) const {
  try {
    std::size_t pos = 0;
    auto v = std::stod(get(key), &pos);
    if (pos != get(key).size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected number, got '" + get(key) + "'");
  }
}

bool Config::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected boolean, got '" + v + "'");
}

std::string Config::canonical_text() const {
  std::string out;
  for (const auto& e : entries_) out += e.key + " = " + e.value + "\n";
  return out;
}

std::uint64_t Config::hash() const { return fnv1a64(canonical_text()); }

std::string Config::hash_hex() const {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)hash());
  return buf;
}

}  // namespace minidino
