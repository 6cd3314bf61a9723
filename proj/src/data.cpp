// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#include "minidino/data.hpp"

#include <algorithm>
#include <cmath>

#include "minidino/errors.hpp"

namespace minidino {

namespace {

// Canonical multiset -> class id over shape kinds {0,1,2}, sizes 1..3.
int multiset_class(std::vector<int> kinds) {
  std::sort(kinds.begin(), kinds.end());
  static const std::vector<std::vector<int>> table = [] {
    std::vector<std::vector<int>> t;
    for (int a = 0; a < 3; ++a) t.push_back({a});
    for (int a = 0; a < 3; ++a)
      for (int b = a; b < 3; ++b) t.push_back({a, b});
    for (int a = 0; a < 3; ++a)
      for (int b = a; b < 3; ++b)
        for (int c = b; c < 3; ++c) t.push_back({a, b, c});
    return t;
  }();
  for (std::size_t i = 0; i < table.size(); ++i)
    if (table[i] == kinds) return (int)i;
  throw std::logic_error("unreachable multiset");
}

float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

}  // namespace

SyntheticShapes::SyntheticShapes(std::uint64_t seed, int image_size, int count)
    : seed_(seed), image_size_(image_size), count_(count) {
  if (image_size < 16) throw ConfigError("dataset: image_size must be >= 16");
  if (count < 1) throw ConfigError("dataset: count must be >= 1");
}

SyntheticShapes::Scene SyntheticShapes::scene(int index) const {
  Rng rng = rng_at(seed_, Stream::dataset, (std::uint64_t)index);
  Scene sc;
  sc.bg_r = (float)rng.uniform(0.15, 0.45);
  sc.bg_g = (float)rng.uniform(0.15, 0.45);
  sc.bg_b = (float)rng.uniform(0.15, 0.45);
  sc.grad_fx = (float)rng.uniform(-2.0, 2.0);
  sc.grad_fy = (float)rng.uniform(-2.0, 2.0);
  sc.grad_phase = (float)rng.uniform(0.0, 6.2831853);
  sc.grad_amp = (float)rng.uniform(0.05, 0.15);
  sc.noise_amp = (float)rng.uniform(0.04, 0.10);
  const int n_shapes = 1 + (int)rng.randint(3);
  for (int s = 0; s < n_shapes; ++s) {
    Shape sh;
    sh.kind = (int)rng.randint(3);
    sh.radius = (float)rng.uniform(0.10, 0.22) * (float)image_size_;
    sh.cx = (float)rng.uniform(0.18, 0.82) * (float)image_size_;
    sh.cy = (float)rng.uniform(0.18, 0.82) * (float)image_size_;
    // saturated color well separated from the muted background
    const double hue = rng.uniform(0.0, 6.0);
    const float v = (float)rng.uniform(0.75, 1.0);
    const int hi = (int)hue;
    const float f = (float)(hue - hi);
    const float p = v * 0.15f, q = v * (1.0f - 0.85f * f),
                t = v * (0.15f + 0.85f * f);
    switch (hi % 6) {
      case 0: sh.r = v; sh.g = t; sh.b = p; break;
      case 1: sh.r = q; sh.g = v; sh.b = p; break;
      case 2: sh.r = p; sh.g = v; sh.b = t; break;
      case 3: sh.r = p; sh.g = q; sh.b = v; break;
      case 4: sh.r = t; sh.g = p; sh.b = v; break;
      default: sh.r = v; sh.g = p; sh.b = q; break;
    }
    sc.shapes.push_back(sh);
  }
  return sc;
}

void SyntheticShapes::render(int index, const Scene& sc, TensorF* img,
                             std::vector<std::uint8_t>* mask) const {
  const int s = image_size_;
  if (img) *img = TensorF::zeros({s, s, 3});
  if (mask) mask->assign((std::size_t)s * s, 0);
  // per-image speckle, consumed in scan order
  Rng noise(Rng::derive(seed_, 0x5eed, (std::uint64_t)index));
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const float u = (float)x / (float)s, v = (float)y / (float)s;
      const float g =
          sc.grad_amp *
          std::sin(6.2831853f * (sc.grad_fx * u + sc.grad_fy * v) +
                   sc.grad_phase);
      float r = sc.bg_r + g, gg = sc.bg_g + g, b = sc.bg_b + g;
      std::uint8_t owner = 0;
      for (std::size_t k = 0; k < sc.shapes.size(); ++k) {
        const Shape& sh = sc.shapes[k];
        const float dx = (float)x + 0.5f - sh.cx;
        const float dy = (float)y + 0.5f - sh.cy;
        bool inside = false;
        switch (sh.kind) {
          case 0:
            inside = dx * dx + dy * dy <= sh.radius * sh.radius;
            break;
          case 1:
            inside = std::fabs(dx) <= sh.radius && std::fabs(dy) <= sh.radius;
            break;
          default: {
            // upward triangle inscribed in the radius box
            const float ny = dy / sh.radius, nx = dx / sh.radius;
            inside = ny <= 1.0f && ny >= -1.0f &&
                     std::fabs(nx) <= (ny + 1.0f) * 0.5f;
            break;
          }
        }
        if (inside) {
          r = sh.r;
          gg = sh.g;
          b = sh.b;
          owner = (std::uint8_t)(sh.kind + 1);
        }
      }
      if (img) {
        const float n1 = (float)(noise.uniform() - 0.5) * 2.0f * sc.noise_amp;
        const float n2 = (float)(noise.uniform() - 0.5) * 2.0f * sc.noise_amp;
        const float n3 = (float)(noise.uniform() - 0.5) * 2.0f * sc.noise_amp;
        img->at((y * s + x) * 3 + 0) = clamp01(r + n1);
        img->at((y * s + x) * 3 + 1) = clamp01(gg + n2);
        img->at((y * s + x) * 3 + 2) = clamp01(b + n3);
      }
      if (mask) (*mask)[y * s + x] = owner;
    }
}

TensorF SyntheticShapes::image(int index) const {
  TensorF img;
  render(index, scene(index), &img, nullptr);
  return img;
}

int SyntheticShapes::label(int index) const {
  const Scene sc = scene(index);
  std::vector<int> kinds;
  for (const auto& sh : sc.shapes) kinds.push_back(sh.kind);
  return multiset_class(kinds);
}

std::vector<std::uint8_t> SyntheticShapes::shape_mask(int index) const {
  std::vector<std::uint8_t> m;
  render(index, scene(index), nullptr, &m);
  return m;
}

TensorF resize_region(const TensorF& src, float y0, float x0, float side,
                      int out_size, bool flip) {
  if (src.rank() != 3 || src.shape[2] != 3)
    throw ShapeError("resize_region: expected [H,W,3], got " +
                     shape_str(src.shape));
  const std::int64_t h = src.shape[0], w = src.shape[1];
  TensorF out = TensorF::zeros({out_size, out_size, 3});
  const float step = side / (float)out_size;
  for (int r = 0; r < out_size; ++r)
    for (int c = 0; c < out_size; ++c) {
      const int cc = flip ? out_size - 1 - c : c;
      const float sy = y0 + ((float)r + 0.5f) * step - 0.5f;
      const float sx = x0 + ((float)cc + 0.5f) * step - 0.5f;
      const std::int64_t iy = (std::int64_t)std::floor(sy);
      const std::int64_t ix = (std::int64_t)std::floor(sx);
      const float fy = sy - (float)iy, fx = sx - (float)ix;
      const std::int64_t y1 = std::clamp<std::int64_t>(iy, 0, h - 1);
      const std::int64_t y2 = std::clamp<std::int64_t>(iy + 1, 0, h - 1);
      const std::int64_t x1 = std::clamp<std::int64_t>(ix, 0, w - 1);
      const std::int64_t x2 = std::clamp<std::int64_t>(ix + 1, 0, w - 1);
      for (int ch = 0; ch < 3; ++ch) {
        const float v11 = src.at((y1 * w + x1) * 3 + ch);
        const float v12 = src.at((y1 * w + x2) * 3 + ch);
        const float v21 = src.at((y2 * w + x1) * 3 + ch);
        const float v22 = src.at((y2 * w + x2) * 3 + ch);
        const float top = v11 + (v12 - v11) * fx;
        const float bot = v21 + (v22 - v21) * fx;
        out.at((r * out_size + c) * 3 + ch) = top + (bot - top) * fy;
      }
    }
  return out;
}

namespace {

void apply_color_jitter(TensorF& img, float brightness, float contrast) {
  float mean = 0;
  for (std::int64_t i = 0; i < img.numel(); ++i) mean += img.at(i);
  mean /= (float)img.numel();
  for (std::int64_t i = 0; i < img.numel(); ++i) {
    float v = img.at(i) * brightness;
    v = (v - mean) * contrast + mean;
    img.at(i) = clamp01(v);
  }
}

std::vector<std::uint8_t> draw_mask_plan(int patches, const CropConfig& cfg,
                                         Rng& rng) {
  if (!rng.bernoulli(cfg.mask_prob)) return {};
  const float frac =
      (float)rng.uniform(cfg.mask_frac_min, cfg.mask_frac_max);
  const int lo = (int)std::ceil(cfg.mask_frac_min * patches);
  const int hi = (int)std::floor(cfg.mask_frac_max * patches);
  int n = (int)std::lround(frac * patches);
  n = std::clamp(n, std::max(lo, 1), std::max(hi, 1));
  std::vector<int> order(patches);
  for (int i = 0; i < patches; ++i) order[i] = i;
  for (int i = 0; i < n; ++i) {
    const int j = i + (int)rng.randint(patches - i);
    std::swap(order[i], order[j]);
  }
  std::vector<std::uint8_t> plan(patches, 0);
  for (int i = 0; i < n; ++i) plan[order[i]] = 1;
  return plan;
}

CropView make_crop(const TensorF& src, int target, int gram_target,
                   const CropConfig& cfg, float area_min, float area_max,
                   Rng& crop_rng, Rng& jitter_rng) {
  const float s = (float)src.shape[0];
  const float frac = std::sqrt((float)crop_rng.uniform(area_min, area_max));
  float side = frac * s;
  side = std::max(side, 2.0f);
  const float y0 = (float)crop_rng.uniform(0.0, (double)(s - side));
  const float x0 = (float)crop_rng.uniform(0.0, (double)(s - side));
  const bool flip = cfg.flip && crop_rng.bernoulli(0.5);
  const float brightness =
      cfg.color_jitter ? (float)crop_rng.uniform(0.8, 1.2) : 1.0f;
  const float contrast =
      cfg.color_jitter ? (float)crop_rng.uniform(0.8, 1.2) : 1.0f;

  CropView view;
  view.image = resize_region(src, y0, x0, side, target, flip);
  if (cfg.color_jitter) apply_color_jitter(view.image, brightness, contrast);
  if (gram_target > 0) {
    view.gram_image = resize_region(src, y0, x0, side, gram_target, flip);
    if (cfg.color_jitter)
      apply_color_jitter(view.gram_image, brightness, contrast);
  }
  view.jitter_scale =
      (float)jitter_rng.log_uniform(cfg.jitter_min, cfg.jitter_max);
  return view;
}

}  // namespace

CropBatch sample_crops(const SyntheticShapes& ds,
                       const std::vector<int>& indices, const CropConfig& cfg,
                       Rng& crop_rng, Rng& mask_rng, Rng& jitter_rng) {
  if (cfg.global_size % cfg.patch_size != 0 ||
      cfg.local_size % cfg.patch_size != 0 ||
      (cfg.gram_size > 0 && cfg.gram_size % cfg.patch_size != 0))
    throw ConfigError("crops: crop sizes must be multiples of the patch size");
  if (!cfg.allow_upsample && cfg.global_size > ds.image_size())
    throw ShapeError("crops: source image " +
                     std::to_string(ds.image_size()) +
                     "px is smaller than the global crop " +
                     std::to_string(cfg.global_size) + "px");
  CropBatch batch;
  batch.images = (int)indices.size();
  batch.global_size = cfg.global_size;
  batch.local_size = cfg.local_size;
  batch.gram_size = cfg.gram_size;
  const int gp = cfg.global_size / cfg.patch_size;
  const int patches = gp * gp;
  for (int idx : indices) {
    const TensorF src = ds.image(idx);
    for (int g = 0; g < 2; ++g) {
      CropView view =
          make_crop(src, cfg.global_size, cfg.gram_size, cfg,
                    cfg.global_area_min, cfg.global_area_max, crop_rng,
                    jitter_rng);
      view.mask = draw_mask_plan(patches, cfg, mask_rng);
      view.source_index = idx;
      batch.globals.push_back(std::move(view));
    }
    for (int l = 0; l < cfg.n_local; ++l) {
      CropView view = make_crop(src, cfg.local_size, 0, cfg,
                                cfg.local_area_min, cfg.local_area_max,
                                crop_rng, jitter_rng);
      view.source_index = idx;
      batch.locals.push_back(std::move(view));
    }
  }
  return batch;
}

BatchDescriptor MixSampler::next_batch(int batch_size, Rng& rng) const {
  if (p_homogeneous < 0.0 || p_homogeneous > 1.0)
    throw ConfigError("mix sampler: p_homogeneous must be in [0,1]");
  BatchDescriptor out;
  if (rng.bernoulli(p_homogeneous)) {
    if (homogeneous.indices.empty())
      throw ConfigError("mix sampler: homogeneous part '" +
                        homogeneous.name + "' is empty");
    out.homogeneous = true;
    for (int i = 0; i < batch_size; ++i) {
      out.indices.push_back(
          homogeneous.indices[rng.randint(homogeneous.indices.size())]);
      out.part_of.push_back(-1);
    }
    return out;
  }
  if (parts.empty())
    throw ConfigError("mix sampler: no heterogeneous parts configured");
  double wsum = 0;
  for (const auto& p : parts) {
    if (p.weight < 0) throw ConfigError("mix sampler: negative part weight");
    wsum += p.weight;
  }
  if (wsum <= 0) throw ConfigError("mix sampler: zero total part weight");
  for (int i = 0; i < batch_size; ++i) {
    double u = rng.uniform() * wsum;
    std::size_t chosen = parts.size() - 1;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      if (u < parts[p].weight) {
        chosen = p;
        break;
      }
      u -= parts[p].weight;
    }
    const auto& part = parts[chosen];
    if (part.indices.empty())
      throw ConfigError("mix sampler: part '" + part.name + "' is empty");
    out.indices.push_back(part.indices[rng.randint(part.indices.size())]);
    out.part_of.push_back((int)chosen);
  }
  return out;
}

std::vector<ResolutionTriple> default_adapt_triples() {
  // paper-scale rows (512,112,768)... (768,336,1152) divided by 8 and
  // snapped to patch-size multiples
  return {
      {64, 16, 96, 0.30}, {96, 16, 144, 0.30}, {96, 24, 144, 0.30},
      {96, 32, 144, 0.05}, {96, 40, 144, 0.05},
  };
}

const ResolutionTriple& draw_triple(const std::vector<ResolutionTriple>& table,
                                    Rng& rng) {
  if (table.empty()) throw ConfigError("resolution table is empty");
  double wsum = 0;
  for (const auto& t : table) wsum += t.prob;
  double u = rng.uniform() * wsum;
  for (const auto& t : table) {
    if (u < t.prob) return t;
    u -= t.prob;
  }
  return table.back();
}

}  // namespace minidino
