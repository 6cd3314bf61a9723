// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <vector>

#include "minidino/data.hpp"
#include "minidino/vit.hpp"

namespace minidino {

// Dense patch-feature grid with provenance.
struct FeatureMap {
  int h = 0, w = 0, d = 0;
  std::vector<float> data;  // (y, x, c) row-major

  struct Provenance {
    std::string checkpoint;
    int layer = -1;  // -1 = final output
    int resolution = 0;
    bool norm_applied = false;
  } prov;

  const float* at(int y, int x) const { return data.data() + (y * w + x) * d; }
  float* at(int y, int x) { return data.data() + (y * w + x) * d; }
};

// Patch features of one image through a backbone; layer = -1 takes the
// final normalized output, otherwise the residual-stream tap after that
// block (1-based) with an optional final norm.
FeatureMap backbone_features(ViTState<float>& model, const TensorF& image,
                             int layer, bool apply_final_norm);

// Cosine similarity between the reference patch and every patch.
std::vector<float> cosine_map(const FeatureMap& f, int ref_y, int ref_x);

// Mean cosine between the CLS token and every patch token.
double cls_patch_cosine(const BackboneOutput<float>& out);

// Mean over patches of (mean cosine to neighbors within Chebyshev radius r)
// minus (mean cosine to patches at Chebyshev distance >= 2r). Higher means
// more localized features.
double locality_score(const FeatureMap& f, int radius);

struct PcaRgbResult {
  int h = 0, w = 0;
  std::vector<float> rgb;               // h*w*3 in [0,1]
  std::array<double, 3> explained{};    // variance fraction per component
  std::array<bool, 3> degenerate{};     // channel padded with zeros
  int variant = 0;                      // chosen variant in [0, 48)
};

// Top-3 PCA of mean-centered patch features rendered as RGB. 48 variants
// (8 sign x 6 channel permutations); variant -1 selects automatically by
// maximizing rendered luminance, ties to the lowest index.
PcaRgbResult pca_rgb(const FeatureMap& f, int variant = -1);

// Bicubic s-fold downsample of a high-resolution feature map followed by
// row re-normalization; the result feeds gram_loss as the teacher side.
FeatureMap highres_smooth(const FeatureMap& f_hi, int s);

struct ProbeResult {
  std::string task;
  std::string metric;
  double value = 0;
  std::string hyperparameters;
  int train_n = 0, test_n = 0;
};

// Cosine-similarity k-nearest-neighbor classification; ties break by summed
// similarity, then by the lower class id.
ProbeResult knn_probe(const std::vector<std::vector<float>>& train_features,
                      const std::vector<int>& train_labels,
                      const std::vector<std::vector<float>>& test_features,
                      const std::vector<int>& test_labels, int k);

// Softmax linear classifier over frozen features, trained per grid cell
// (learning rate x weight decay), selected on a held-out validation split.
ProbeResult linear_probe(const std::vector<std::vector<float>>& train_features,
                         const std::vector<int>& train_labels,
                         const std::vector<std::vector<float>>& test_features,
                         const std::vector<int>& test_labels, int n_classes,
                         const std::vector<double>& lr_grid,
                         const std::vector<double>& wd_grid, int epochs,
                         std::uint64_t seed);

// Symmetric eigendecomposition by cyclic Jacobi rotations; eigenvalues
// descending, eigenvectors as rows.
void jacobi_eigh(std::vector<double> matrix, int d,
                 std::vector<double>& eigenvalues,
                 std::vector<std::vector<double>>& eigenvectors);

// CLS feature rows for a set of dataset images at a given resolution.
std::vector<std::vector<float>> cls_features(ViTState<float>& model,
                                             const SyntheticShapes& ds,
                                             const std::vector<int>& indices,
                                             int resolution);

}  // namespace minidino
