// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "minidino/rng.hpp"
#include "minidino/tensor.hpp"

namespace minidino {

// Procedurally generated scenes: 1-3 colored geometric shapes (circle,
// square, triangle) over a textured noise background. The class is the
// multiset of shape kinds (19 classes); per-pixel shape masks back the
// dense probes. Every sample is a pure function of (seed, index).
class SyntheticShapes {
 public:
  SyntheticShapes(std::uint64_t seed, int image_size = 64, int count = 2048);

  int count() const { return count_; }
  int image_size() const { return image_size_; }
  std::uint64_t seed() const { return seed_; }

  TensorF image(int index) const;                    // [S, S, 3] in [0, 1]
  int label(int index) const;                        // 0..18
  std::vector<std::uint8_t> shape_mask(int index) const;  // 0=bg, 1..3=kind

  static int num_classes() { return 19; }

 private:
  std::uint64_t seed_;
  int image_size_;
  int count_;

  struct Shape {
    int kind;  // 0 circle, 1 square, 2 triangle
    float cx, cy, radius;
    float r, g, b;
  };
  struct Scene {
    float bg_r, bg_g, bg_b;
    float grad_fx, grad_fy, grad_phase, grad_amp;
    float noise_amp;
    std::vector<Shape> shapes;
  };
  Scene scene(int index) const;
  void render(int index, const Scene& sc, TensorF* img,
              std::vector<std::uint8_t>* mask) const;
};

struct CropView {
  TensorF image;                    // [S, S, 3]
  TensorF gram_image;               // [G, G, 3]; empty if no gram stream
  std::vector<std::uint8_t> mask;   // per-patch plan; empty = unmasked
  float jitter_scale = 1.0f;
  int source_index = -1;
};

struct CropBatch {
  std::vector<CropView> globals;  // 2 per image, image-major order
  std::vector<CropView> locals;   // n_local per image
  int images = 0;
  int global_size = 0, local_size = 0, gram_size = 0;
};

struct CropConfig {
  int global_size = 32;
  int local_size = 16;
  int n_local = 8;
  int gram_size = 0;  // 0 disables the gram-teacher image stream
  int patch_size = 8;
  float global_area_min = 0.30f, global_area_max = 1.0f;
  float local_area_min = 0.08f, local_area_max = 0.40f;
  float mask_prob = 0.5f;
  float mask_frac_min = 0.1f, mask_frac_max = 0.5f;
  float jitter_min = 0.5f, jitter_max = 2.0f;
  bool flip = true;
  bool color_jitter = true;
  bool allow_upsample = false;  // adaptation draws targets above the source
};

// Random-resized square crops with flip and brightness/contrast jitter.
// Global crops carry an optional same-region higher-resolution copy for the
// Gram teacher, a mask plan (each global crop masked with probability
// mask_prob at a fraction within [mask_frac_min, mask_frac_max]) and a
// log-uniform RoPE jitter scale.
CropBatch sample_crops(const SyntheticShapes& ds,
                       const std::vector<int>& indices, const CropConfig& cfg,
                       Rng& crop_rng, Rng& mask_rng, Rng& jitter_rng);

// Bilinear resize of the square region [x0, x0+side) x [y0, y0+side) of a
// [H, W, 3] image to out_size x out_size, optionally mirrored horizontally.
TensorF resize_region(const TensorF& src, float y0, float x0, float side,
                      int out_size, bool flip);

struct DataPart {
  std::string name;
  std::vector<int> indices;
  double weight = 1.0;  // heterogeneous mixing ratio
};

struct BatchDescriptor {
  bool homogeneous = false;
  std::vector<int> indices;
  std::vector<int> part_of;  // -1 for the homogeneous part
};

// Draws either a homogeneous batch from the designated high-quality part
// (probability p_homogeneous) or a heterogeneous batch mixing the remaining
// parts by weight.
struct MixSampler {
  DataPart homogeneous;
  std::vector<DataPart> parts;
  double p_homogeneous = 0.1;

  BatchDescriptor next_batch(int batch_size, Rng& rng) const;
};

struct ResolutionTriple {
  int global_size, local_size, gram_size;
  double prob;
};

// Mixed-resolution adaptation table, scaled to the toy patch size.
std::vector<ResolutionTriple> default_adapt_triples();
const ResolutionTriple& draw_triple(const std::vector<ResolutionTriple>& table,
                                    Rng& rng);

}  // namespace minidino
