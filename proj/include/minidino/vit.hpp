// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "minidino/tensor.hpp"

namespace minidino {

enum class OutlierStrategy { registers, attention_bias, value_gating, none };

enum class CropKind { global, local };

inline const char* outlier_strategy_name(OutlierStrategy s) {
  switch (s) {
    case OutlierStrategy::registers:
      return "registers";
    case OutlierStrategy::attention_bias:
      return "attention_bias";
    case OutlierStrategy::value_gating:
      return "value_gating";
    case OutlierStrategy::none:
      return "none";
  }
  return "?";
}

inline OutlierStrategy parse_outlier_strategy(const std::string& s) {
  if (s == "registers") return OutlierStrategy::registers;
  if (s == "attention_bias") return OutlierStrategy::attention_bias;
  if (s == "value_gating") return OutlierStrategy::value_gating;
  if (s == "none") return OutlierStrategy::none;
  throw ConfigError("unknown outlier strategy '" + s + "'");
}

struct ViTConfig {
  int depth = 4;
  int embed_dim = 64;
  int head_count = 4;
  int patch_size = 8;
  int ffn_hidden = 128;
  int register_count = 4;
  float jitter_min = 0.5f;
  float jitter_max = 2.0f;
  OutlierStrategy strategy = OutlierStrategy::registers;
  float stochastic_depth = 0.0f;
  bool separate_output_norms = true;

  int head_dim() const { return embed_dim / head_count; }

  void validate() const {
    if (depth < 1) throw ConfigError("vit: depth must be >= 1");
    if (head_count < 1 || embed_dim % head_count != 0)
      throw ConfigError("vit: embed_dim must equal head_count * head_dim");
    if (head_dim() % 4 != 0)
      throw ConfigError(
          "vit: head_dim must be divisible by 4 (two axes x sin/cos pairs), "
          "got " +
          std::to_string(head_dim()));
    if (patch_size < 1) throw ConfigError("vit: patch_size must be positive");
    if (register_count < 0)
      throw ConfigError("vit: register_count must be >= 0");
    if (stochastic_depth < 0.0f || stochastic_depth >= 1.0f)
      throw ConfigError("vit: stochastic_depth must be in [0, 1)");
    if (jitter_min <= 0.0f || jitter_max < jitter_min)
      throw ConfigError("vit: invalid rope jitter range");
  }
};

template <typename T>
struct BlockParams {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> qkv_w, qkv_b;
  Tensor<T> proj_w, proj_b;
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> ffn_gate_w, ffn_gate_b;
  Tensor<T> ffn_up_w, ffn_up_b;
  Tensor<T> ffn_down_w, ffn_down_b;
  // only materialized for the attention_bias / value_gating strategies
  Tensor<T> k_bias, v_bias;
};

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor;
  int layer;  // 0 = embeddings, 1..depth = blocks, depth = output norms
};

template <typename T>
struct ViTState {
  ViTConfig cfg;
  Tensor<T> patch_w, patch_b;  // [patch^2*3, D], [D]
  Tensor<T> cls_token;         // [1, D]
  Tensor<T> reg_tokens;        // [R, D]
  Tensor<T> mask_token;        // [D]
  std::vector<BlockParams<T>> blocks;
  Tensor<T> out_norm_g_global, out_norm_b_global;
  Tensor<T> out_norm_g_local, out_norm_b_local;

  static ViTState init(const ViTConfig& cfg, Rng& rng) {
    cfg.validate();
    ViTState st;
    st.cfg = cfg;
    const int d = cfg.embed_dim;
    const T w0 = (T)0.02;
    st.patch_w = Tensor<T>::param({cfg.patch_size * cfg.patch_size * 3, d},
                                  rng, w0);
    st.patch_b = Tensor<T>::param_zeros({d});
    st.cls_token = Tensor<T>::param({1, d}, rng, w0);
    st.reg_tokens = cfg.register_count > 0
                        ? Tensor<T>::param({cfg.register_count, d}, rng, w0)
                        : Tensor<T>::param_zeros({0, d});
    st.mask_token = Tensor<T>::param({d}, rng, w0);
    const bool wants_biases = cfg.strategy == OutlierStrategy::attention_bias ||
                              cfg.strategy == OutlierStrategy::value_gating;
    for (int b = 0; b < cfg.depth; ++b) {
      BlockParams<T> blk;
      blk.ln1_g = Tensor<T>::param_full({d}, (T)1);
      blk.ln1_b = Tensor<T>::param_zeros({d});
      blk.qkv_w = Tensor<T>::param({d, 3 * d}, rng, w0);
      blk.qkv_b = Tensor<T>::param_zeros({3 * d});
      blk.proj_w = Tensor<T>::param({d, d}, rng, w0);
      blk.proj_b = Tensor<T>::param_zeros({d});
      blk.ln2_g = Tensor<T>::param_full({d}, (T)1);
      blk.ln2_b = Tensor<T>::param_zeros({d});
      blk.ffn_gate_w = Tensor<T>::param({d, cfg.ffn_hidden}, rng, w0);
      blk.ffn_gate_b = Tensor<T>::param_zeros({cfg.ffn_hidden});
      blk.ffn_up_w = Tensor<T>::param({d, cfg.ffn_hidden}, rng, w0);
      blk.ffn_up_b = Tensor<T>::param_zeros({cfg.ffn_hidden});
      blk.ffn_down_w = Tensor<T>::param({cfg.ffn_hidden, d}, rng, w0);
      blk.ffn_down_b = Tensor<T>::param_zeros({d});
      if (cfg.strategy == OutlierStrategy::attention_bias)
        blk.k_bias = Tensor<T>::param({d}, rng, w0);
      if (wants_biases) blk.v_bias = Tensor<T>::param_zeros({d});
      st.blocks.push_back(std::move(blk));
    }
    st.out_norm_g_global = Tensor<T>::param_full({d}, (T)1);
    st.out_norm_b_global = Tensor<T>::param_zeros({d});
    if (cfg.separate_output_norms) {
      st.out_norm_g_local = Tensor<T>::param_full({d}, (T)1);
      st.out_norm_b_local = Tensor<T>::param_zeros({d});
    }
    return st;
  }

  bool has_attn_biases() const {
    return !blocks.empty() && blocks[0].v_bias.numel() > 0;
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> out;
    auto add = [&](const std::string& n, Tensor<T>& t, int layer) {
      if (t.numel() > 0) out.push_back({n, &t, layer});
    };
    add("patch_embed/w", patch_w, 0);
    add("patch_embed/b", patch_b, 0);
    add("cls_token", cls_token, 0);
    add("reg_tokens", reg_tokens, 0);
    add("mask_token", mask_token, 0);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string p = "block" + std::to_string(b) + "/";
      const int layer = (int)b + 1;
      auto& blk = blocks[b];
      add(p + "ln1_g", blk.ln1_g, layer);
      add(p + "ln1_b", blk.ln1_b, layer);
      add(p + "qkv_w", blk.qkv_w, layer);
      add(p + "qkv_b", blk.qkv_b, layer);
      add(p + "proj_w", blk.proj_w, layer);
      add(p + "proj_b", blk.proj_b, layer);
      add(p + "ln2_g", blk.ln2_g, layer);
      add(p + "ln2_b", blk.ln2_b, layer);
      add(p + "ffn_gate_w", blk.ffn_gate_w, layer);
      add(p + "ffn_gate_b", blk.ffn_gate_b, layer);
      add(p + "ffn_up_w", blk.ffn_up_w, layer);
      add(p + "ffn_up_b", blk.ffn_up_b, layer);
      add(p + "ffn_down_w", blk.ffn_down_w, layer);
      add(p + "ffn_down_b", blk.ffn_down_b, layer);
      add(p + "k_bias", blk.k_bias, layer);
      add(p + "v_bias", blk.v_bias, layer);
    }
    add("out_norm_global/g", out_norm_g_global, cfg.depth);
    add("out_norm_global/b", out_norm_b_global, cfg.depth);
    add("out_norm_local/g", out_norm_g_local, cfg.depth);
    add("out_norm_local/b", out_norm_b_local, cfg.depth);
    return out;
  }
};

template <typename T>
struct BackboneOutput {
  Tensor<T> cls;        // [1, D]
  Tensor<T> registers;  // [R, D]
  Tensor<T> patches;    // [P, D]
  std::int64_t grid_h = 0, grid_w = 0;
  std::vector<Tensor<T>> taps;  // residual-stream patch tokens per block
};

// Axial rotary table: the first head_dim/4 rotation pairs encode the x
// coordinate, the rest the y coordinate, each over a geometric frequency
// ladder. Patch centers live on the [-1,1]^2 box scaled by jitter; CLS and
// register rows carry the identity rotation.
template <typename T>
std::shared_ptr<RopeTable<T>> build_rope_table(std::int64_t grid_h,
                                               std::int64_t grid_w,
                                               std::int64_t n_special,
                                               int head_dim, T jitter_scale) {
  if (head_dim % 4 != 0)
    throw ConfigError("rope: head_dim must be divisible by 4, got " +
                      std::to_string(head_dim));
  const std::int64_t pairs = head_dim / 2;
  const std::int64_t bands = head_dim / 4;
  auto tab = std::make_shared<RopeTable<T>>();
  tab->tokens = n_special + grid_h * grid_w;
  tab->pairs = pairs;
  tab->cosv.assign(tab->tokens * pairs, (T)1);
  tab->sinv.assign(tab->tokens * pairs, (T)0);
  std::vector<T> freq(bands);
  const T f0 = (T)1.5, f1 = (T)28.0;
  for (std::int64_t j = 0; j < bands; ++j)
    freq[j] = bands == 1 ? f0
                         : f0 * std::pow(f1 / f0, (T)j / (T)(bands - 1));
  for (std::int64_t py = 0; py < grid_h; ++py)
    for (std::int64_t px = 0; px < grid_w; ++px) {
      const T cx = jitter_scale * ((T)(2 * px + 1) / (T)grid_w - (T)1);
      const T cy = jitter_scale * ((T)(2 * py + 1) / (T)grid_h - (T)1);
      const std::int64_t row = n_special + py * grid_w + px;
      for (std::int64_t t = 0; t < pairs; ++t) {
        const T ang = t < bands ? cx * freq[t] : cy * freq[t - bands];
        tab->cosv[row * pairs + t] = std::cos(ang);
        tab->sinv[row * pairs + t] = std::sin(ang);
      }
    }
  return tab;
}

// Splits an [H, W, 3] image into a [P, patch^2*3] matrix of flattened
// patches, row-major over the patch grid. Input pixels are constants, so
// this never traces.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, int patch) {
  if (image.rank() != 3 || image.shape[2] != 3)
    throw ShapeError("patchify: expected [H,W,3] image, got " +
                     shape_str(image.shape));
  const std::int64_t h = image.shape[0], w = image.shape[1];
  if (h % patch != 0 || w % patch != 0)
    throw ShapeError("patchify: image sides " + shape_str(image.shape) +
                     " not divisible by patch size " + std::to_string(patch));
  const std::int64_t gh = h / patch, gw = w / patch;
  const std::int64_t k = (std::int64_t)patch * patch * 3;
  Tensor<T> out = Tensor<T>::zeros({gh * gw, k});
  for (std::int64_t py = 0; py < gh; ++py)
    for (std::int64_t px = 0; px < gw; ++px) {
      T* dst = out.data() + (py * gw + px) * k;
      for (int dy = 0; dy < patch; ++dy)
        for (int dx = 0; dx < patch; ++dx)
          for (int c = 0; c < 3; ++c)
            *dst++ = image.at(((py * patch + dy) * w + px * patch + dx) * 3 +
                              c);
    }
  return out;
}

struct ForwardOptions {
  const std::vector<std::uint8_t>* mask = nullptr;  // per-patch, 1 = masked
  float jitter_scale = 1.0f;
  Rng* drop_rng = nullptr;  // enables stochastic depth when rate > 0
  bool want_taps = false;
};

template <typename T>
BackboneOutput<T> vit_forward(Tape<T>& tape, ViTState<T>& st,
                              const Tensor<T>& image, CropKind kind,
                              const ForwardOptions& opt = {}) {
  const ViTConfig& cfg = st.cfg;
  const AttnVariant variant =
      cfg.strategy == OutlierStrategy::value_gating
          ? AttnVariant::value_gating
          : cfg.strategy == OutlierStrategy::attention_bias
                ? AttnVariant::attention_bias
                : AttnVariant::standard;

  Tensor<T> patches = patchify(image, cfg.patch_size);
  const std::int64_t gh = image.shape[0] / cfg.patch_size;
  const std::int64_t gw = image.shape[1] / cfg.patch_size;
  const std::int64_t p = gh * gw;
  const std::int64_t r = cfg.register_count;

  Tensor<T> emb = tape.add_rowvec(tape.matmul(patches, st.patch_w),
                                  st.patch_b);
  if (opt.mask) {
    if ((std::int64_t)opt.mask->size() != p)
      throw ShapeError("vit_forward: mask length " +
                       std::to_string(opt.mask->size()) +
                       " does not match patch count " + std::to_string(p));
    Tensor<T> keep = Tensor<T>::zeros({p});
    Tensor<T> m = Tensor<T>::zeros({p});
    for (std::int64_t i = 0; i < p; ++i) {
      m.at(i) = (*opt.mask)[i] ? (T)1 : (T)0;
      keep.at(i) = (T)1 - m.at(i);
    }
    emb = tape.add_outer(tape.mul_colvec(emb, keep), m, st.mask_token);
  }

  Tensor<T> x = tape.concat_rows({st.cls_token, st.reg_tokens, emb});
  auto rope_tab = build_rope_table<T>(gh, gw, 1 + r, cfg.head_dim(),
                                      (T)opt.jitter_scale);

  const int d = cfg.embed_dim;
  std::vector<Tensor<T>> taps;
  for (int b = 0; b < cfg.depth; ++b) {
    auto& blk = st.blocks[b];
    const bool drop_attn =
        cfg.stochastic_depth > 0 && opt.drop_rng &&
        opt.drop_rng->bernoulli(cfg.stochastic_depth);
    if (!drop_attn) {
      Tensor<T> h = tape.layer_norm(x, blk.ln1_g, blk.ln1_b);
      Tensor<T> qkv = tape.add_rowvec(tape.matmul(h, blk.qkv_w), blk.qkv_b);
      Tensor<T> q = tape.rope(tape.slice_cols(qkv, 0, d), rope_tab,
                              cfg.head_count);
      Tensor<T> k = tape.rope(tape.slice_cols(qkv, d, d), rope_tab,
                              cfg.head_count);
      Tensor<T> v = tape.slice_cols(qkv, 2 * d, d);
      const Tensor<T>* kb =
          variant == AttnVariant::attention_bias ? &blk.k_bias : nullptr;
      const Tensor<T>* vb =
          variant != AttnVariant::standard ? &blk.v_bias : nullptr;
      if (variant != AttnVariant::standard && blk.v_bias.numel() == 0)
        throw ConfigError(
            "vit_forward: state has no attention bias parameters for "
            "strategy " +
            std::string(outlier_strategy_name(cfg.strategy)));
      Tensor<T> attn =
          tape.attention(q, k, v, cfg.head_count, variant, kb, vb);
      Tensor<T> proj = tape.add_rowvec(tape.matmul(attn, blk.proj_w),
                                       blk.proj_b);
      if (cfg.stochastic_depth > 0 && opt.drop_rng)
        proj = tape.mul_scalar(proj, (T)1 / ((T)1 - (T)cfg.stochastic_depth));
      x = tape.add(x, proj);
    }
    const bool drop_ffn =
        cfg.stochastic_depth > 0 && opt.drop_rng &&
        opt.drop_rng->bernoulli(cfg.stochastic_depth);
    if (!drop_ffn) {
      Tensor<T> h2 = tape.layer_norm(x, blk.ln2_g, blk.ln2_b);
      Tensor<T> gate =
          tape.add_rowvec(tape.matmul(h2, blk.ffn_gate_w), blk.ffn_gate_b);
      Tensor<T> up =
          tape.add_rowvec(tape.matmul(h2, blk.ffn_up_w), blk.ffn_up_b);
      Tensor<T> act = tape.swiglu(gate, up);
      Tensor<T> down =
          tape.add_rowvec(tape.matmul(act, blk.ffn_down_w), blk.ffn_down_b);
      if (cfg.stochastic_depth > 0 && opt.drop_rng)
        down = tape.mul_scalar(down, (T)1 / ((T)1 - (T)cfg.stochastic_depth));
      x = tape.add(x, down);
    }
    if (opt.want_taps) taps.push_back(tape.slice_rows(x, 1 + r, p));
  }

  const bool use_local = kind == CropKind::local && cfg.separate_output_norms;
  Tensor<T>& ng = use_local ? st.out_norm_g_local : st.out_norm_g_global;
  Tensor<T>& nb = use_local ? st.out_norm_b_local : st.out_norm_b_global;
  Tensor<T> y = tape.layer_norm(x, ng, nb);

  BackboneOutput<T> out;
  out.cls = tape.slice_rows(y, 0, 1);
  out.registers = tape.slice_rows(y, 1, r);
  out.patches = tape.slice_rows(y, 1 + r, p);
  out.grid_h = gh;
  out.grid_w = gw;
  out.taps = std::move(taps);
  return out;
}

// Residual-stream patch tokens after block `layer_index` (1-based), before
// the output norm; optionally passes them through the final (global) norm.
template <typename T>
Tensor<T> extract_layer_features(ViTState<T>& st, const Tensor<T>& image,
                                 int layer_index, bool apply_final_norm) {
  if (layer_index < 1 || layer_index > st.cfg.depth)
    throw ShapeError("extract_layer_features: layer " +
                     std::to_string(layer_index) + " out of [1," +
                     std::to_string(st.cfg.depth) + "]");
  Tape<T> tape(false);
  ForwardOptions opt;
  opt.want_taps = true;
  auto out = vit_forward(tape, st, image, CropKind::global, opt);
  Tensor<T> tap = out.taps[layer_index - 1];
  if (apply_final_norm)
    tap = tape.layer_norm(tap, st.out_norm_g_global, st.out_norm_b_global);
  return tap;
}

}  // namespace minidino
