// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#include "minidino/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

namespace minidino {

namespace {

double row_cos(const float* a, const float* b, int d) {
  double dot = 0, na = 0, nb = 0;
  for (int i = 0; i < d; ++i) {
    dot += (double)a[i] * b[i];
    na += (double)a[i] * a[i];
    nb += (double)b[i] * b[i];
  }
  const double den = std::sqrt(na) * std::sqrt(nb);
  return den > 0 ? dot / den : 0.0;
}

}  // namespace

FeatureMap backbone_features(ViTState<float>& model, const TensorF& image,
                             int layer, bool apply_final_norm) {
  FeatureMap f;
  Tape<float> off(false);
  if (layer < 0) {
    auto out = vit_forward(off, model, image, CropKind::global);
    f.h = (int)out.grid_h;
    f.w = (int)out.grid_w;
    f.d = (int)out.patches.shape[1];
    f.data.assign(out.patches.data(),
                  out.patches.data() + out.patches.numel());
    f.prov.norm_applied = true;
  } else {
    Tensor<float> tap = extract_layer_features(model, image, layer,
                                               apply_final_norm);
    const int gh = (int)(image.shape[0] / model.cfg.patch_size);
    const int gw = (int)(image.shape[1] / model.cfg.patch_size);
    f.h = gh;
    f.w = gw;
    f.d = (int)tap.shape[1];
    f.data.assign(tap.data(), tap.data() + tap.numel());
    f.prov.norm_applied = apply_final_norm;
  }
  f.prov.layer = layer;
  f.prov.resolution = (int)image.shape[0];
  return f;
}

std::vector<float> cosine_map(const FeatureMap& f, int ref_y, int ref_x) {
  if (ref_y < 0 || ref_y >= f.h || ref_x < 0 || ref_x >= f.w)
    throw ShapeError("cosine_map: reference (" + std::to_string(ref_y) + "," +
                     std::to_string(ref_x) + ") outside the " +
                     std::to_string(f.h) + "x" + std::to_string(f.w) +
                     " grid");
  std::vector<float> out(f.h * f.w);
  const float* ref = f.at(ref_y, ref_x);
  for (int y = 0; y < f.h; ++y)
    for (int x = 0; x < f.w; ++x)
      out[y * f.w + x] = (float)row_cos(ref, f.at(y, x), f.d);
  return out;
}

double cls_patch_cosine(const BackboneOutput<float>& out) {
  const std::int64_t p = out.patches.shape[0];
  const std::int64_t d = out.patches.shape[1];
  if (p == 0) return 0.0;
  double acc = 0;
  for (std::int64_t i = 0; i < p; ++i)
    acc += row_cos(out.cls.data(), out.patches.data() + i * d, (int)d);
  return acc / (double)p;
}

double locality_score(const FeatureMap& f, int radius) {
  if (radius < 1) throw ShapeError("locality_score: radius must be >= 1");
  const int max_cheb = std::max(f.h, f.w) - 1;
  if (max_cheb < 2 * radius)
    throw ShapeError("locality_score: grid " + std::to_string(f.h) + "x" +
                     std::to_string(f.w) + " too small for distance " +
                     std::to_string(2 * radius));
  double total = 0;
  int counted = 0;
  for (int y = 0; y < f.h; ++y)
    for (int x = 0; x < f.w; ++x) {
      double near_sum = 0, far_sum = 0;
      int near_n = 0, far_n = 0;
      for (int yy = 0; yy < f.h; ++yy)
        for (int xx = 0; xx < f.w; ++xx) {
          const int dist = std::max(std::abs(yy - y), std::abs(xx - x));
          if (dist == 0) continue;
          if (dist <= radius) {
            near_sum += row_cos(f.at(y, x), f.at(yy, xx), f.d);
            ++near_n;
          } else if (dist >= 2 * radius) {
            far_sum += row_cos(f.at(y, x), f.at(yy, xx), f.d);
            ++far_n;
          }
        }
      if (near_n == 0 || far_n == 0) continue;
      total += near_sum / near_n - far_sum / far_n;
      ++counted;
    }
  if (counted == 0)
    throw ShapeError("locality_score: no patch has both neighbor sets");
  return total / counted;
}

void jacobi_eigh(std::vector<double> a, int d, std::vector<double>& evals,
                 std::vector<std::vector<double>>& evecs) {
  std::vector<double> v(d * d, 0.0);
  for (int i = 0; i < d; ++i) v[i * d + i] = 1.0;
  const int max_sweeps = 64;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0;
    for (int i = 0; i < d; ++i)
      for (int j = i + 1; j < d; ++j) off += a[i * d + j] * a[i * d + j];
    if (off < 1e-22) break;
    for (int p = 0; p < d - 1; ++p)
      for (int q = p + 1; q < d; ++q) {
        const double apq = a[p * d + q];
        if (std::fabs(apq) < 1e-300) continue;
        const double app = a[p * d + p], aqq = a[q * d + q];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < d; ++k) {
          const double akp = a[k * d + p], akq = a[k * d + q];
          a[k * d + p] = c * akp - s * akq;
          a[k * d + q] = s * akp + c * akq;
        }
        for (int k = 0; k < d; ++k) {
          const double apk = a[p * d + k], aqk = a[q * d + k];
          a[p * d + k] = c * apk - s * aqk;
          a[q * d + k] = s * apk + c * aqk;
        }
        for (int k = 0; k < d; ++k) {
          const double vkp = v[k * d + p], vkq = v[k * d + q];
          v[k * d + p] = c * vkp - s * vkq;
          v[k * d + q] = s * vkp + c * vkq;
        }
      }
  }
  std::vector<int> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> diag(d);
  for (int i = 0; i < d; ++i) diag[i] = a[i * d + i];
  std::stable_sort(order.begin(), order.end(),
                   [&](int x, int y) { return diag[x] > diag[y]; });
  evals.resize(d);
  evecs.assign(d, std::vector<double>(d));
  for (int r = 0; r < d; ++r) {
    evals[r] = diag[order[r]];
    for (int k = 0; k < d; ++k) evecs[r][k] = v[k * d + order[r]];
  }
}

PcaRgbResult pca_rgb(const FeatureMap& f, int variant) {
  const int n = f.h * f.w, d = f.d;
  if (n < 3) throw ShapeError("pca_rgb: need at least 3 patches");
  if (variant < -1 || variant >= 48)
    throw ShapeError("pca_rgb: variant must be in [-1, 48)");
  // column means
  std::vector<double> mean(d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) mean[c] += f.data[i * d + c];
  for (auto& m : mean) m /= n;
  // covariance
  std::vector<double> cov(d * d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < d; ++a) {
      const double xa = f.data[i * d + a] - mean[a];
      for (int b = a; b < d; ++b)
        cov[a * d + b] += xa * (f.data[i * d + b] - mean[b]);
    }
  for (int a = 0; a < d; ++a)
    for (int b = a; b < d; ++b) {
      cov[a * d + b] /= n;
      cov[b * d + a] = cov[a * d + b];
    }
  std::vector<double> evals;
  std::vector<std::vector<double>> evecs;
  jacobi_eigh(cov, d, evals, evecs);
  double total_var = 0;
  for (double e : evals) total_var += std::max(e, 0.0);

  PcaRgbResult res;
  res.h = f.h;
  res.w = f.w;
  // scores per component, min-max scaled
  std::vector<std::vector<float>> comp(3, std::vector<float>(n, 0.0f));
  for (int c = 0; c < 3; ++c) {
    const double ev = c < d ? std::max(evals[c], 0.0) : 0.0;
    res.explained[c] = total_var > 0 ? ev / total_var : 0.0;
    res.degenerate[c] = c >= d || ev <= 1e-12 * std::max(total_var, 1e-300);
    if (res.degenerate[c]) continue;
    float lo = 0, hi = 0;
    for (int i = 0; i < n; ++i) {
      double s = 0;
      for (int k = 0; k < d; ++k)
        s += (f.data[i * d + k] - mean[k]) * evecs[c][k];
      comp[c][i] = (float)s;
      if (i == 0) lo = hi = comp[c][i];
      lo = std::min(lo, comp[c][i]);
      hi = std::max(hi, comp[c][i]);
    }
    if (hi - lo < 1e-12f) {
      res.degenerate[c] = true;
      std::fill(comp[c].begin(), comp[c].end(), 0.0f);
    }
  }

  static const int kPerm[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2},
                                  {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  auto render = [&](int var, std::vector<float>& out) {
    const int perm = var / 8;
    const int signs = var % 8;
    out.assign(n * 3, 0.0f);
    for (int ch = 0; ch < 3; ++ch) {
      const int src = kPerm[perm][ch];
      if (res.degenerate[src]) continue;
      float lo = comp[src][0], hi = comp[src][0];
      for (int i = 1; i < n; ++i) {
        lo = std::min(lo, comp[src][i]);
        hi = std::max(hi, comp[src][i]);
      }
      const bool flip = (signs >> src) & 1;
      for (int i = 0; i < n; ++i) {
        float v = (comp[src][i] - lo) / (hi - lo);
        if (flip) v = 1.0f - v;
        out[i * 3 + ch] = v;
      }
    }
  };

  if (variant >= 0) {
    res.variant = variant;
    render(variant, res.rgb);
    return res;
  }
  // auto selection: maximize mean rendered luminance, ties to lowest index
  double best_score = -1;
  int best_var = 0;
  std::vector<float> buf;
  for (int var = 0; var < 48; ++var) {
    render(var, buf);
    double lum = 0;
    for (int i = 0; i < n; ++i)
      lum += 0.299 * buf[i * 3] + 0.587 * buf[i * 3 + 1] +
             0.114 * buf[i * 3 + 2];
    if (lum > best_score + 1e-12) {
      best_score = lum;
      best_var = var;
      res.rgb = buf;
    }
  }
  res.variant = best_var;
  return res;
}

FeatureMap highres_smooth(const FeatureMap& f_hi, int s) {
  if (s < 1) throw ShapeError("highres_smooth: factor must be >= 1");
  if (f_hi.h % s != 0 || f_hi.w % s != 0)
    throw ShapeError("highres_smooth: grid " + std::to_string(f_hi.h) + "x" +
                     std::to_string(f_hi.w) + " not divisible by " +
                     std::to_string(s));
  Tape<float> off(false);
  TensorF grid = TensorF::from_vec({f_hi.h, f_hi.w, f_hi.d},
                                   std::vector<float>(f_hi.data));
  TensorF down = s == 1 ? grid : off.bicubic_resize(grid, f_hi.h / s,
                                                    f_hi.w / s);
  FeatureMap out;
  out.h = (int)down.shape[0];
  out.w = (int)down.shape[1];
  out.d = f_hi.d;
  out.data.assign(down.data(), down.data() + down.numel());
  out.prov = f_hi.prov;
  // row re-normalization
  for (int i = 0; i < out.h * out.w; ++i) {
    float* row = out.data.data() + i * out.d;
    double nrm = 0;
    for (int c = 0; c < out.d; ++c) nrm += (double)row[c] * row[c];
    nrm = std::sqrt(nrm);
    if (nrm > 1e-12)
      for (int c = 0; c < out.d; ++c) row[c] = (float)(row[c] / nrm);
  }
  return out;
}

ProbeResult knn_probe(const std::vector<std::vector<float>>& train_features,
                      const std::vector<int>& train_labels,
                      const std::vector<std::vector<float>>& test_features,
                      const std::vector<int>& test_labels, int k) {
  if (train_features.empty())
    throw ShapeError("knn_probe: empty training set");
  if (k < 1) throw ShapeError("knn_probe: k must be >= 1");
  const int d = (int)train_features[0].size();
  auto normalize = [&](const std::vector<std::vector<float>>& rows) {
    std::vector<std::vector<float>> out = rows;
    for (auto& r : out) {
      double nrm = 0;
      for (float v : r) nrm += (double)v * v;
      nrm = std::sqrt(nrm);
      if (nrm > 1e-12)
        for (auto& v : r) v = (float)(v / nrm);
    }
    return out;
  };
  auto train = normalize(train_features);
  auto test = normalize(test_features);
  const int kk = std::min<int>(k, (int)train.size());
  int correct = 0;
  for (std::size_t t = 0; t < test.size(); ++t) {
    std::vector<std::pair<double, int>> sims(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) {
      double s = 0;
      for (int c = 0; c < d; ++c) s += (double)test[t][c] * train[i][c];
      sims[i] = {s, (int)i};
    }
    std::partial_sort(sims.begin(), sims.begin() + kk, sims.end(),
                      [](const auto& a, const auto& b) {
                        if (a.first != b.first) return a.first > b.first;
                        return a.second < b.second;
                      });
    std::map<int, std::pair<int, double>> votes;  // class -> (count, sim sum)
    for (int i = 0; i < kk; ++i) {
      auto& v = votes[train_labels[sims[i].second]];
      v.first += 1;
      v.second += sims[i].first;
    }
    int best_class = -1;
    std::pair<int, double> best{-1, 0};
    for (const auto& [cls, v] : votes) {
      if (v.first > best.first ||
          (v.first == best.first && v.second > best.second + 1e-12)) {
        best = v;
        best_class = cls;
      }
    }
    if (best_class == test_labels[t]) ++correct;
  }
  ProbeResult res;
  res.task = "knn";
  res.metric = "accuracy";
  res.value = test.empty() ? 0.0 : (double)correct / (double)test.size();
  res.hyperparameters = "k=" + std::to_string(k);
  res.train_n = (int)train.size();
  res.test_n = (int)test.size();
  return res;
}

namespace {

struct LinearModel {
  std::vector<double> w;  // (d+1) x c, bias row last
  int d, c;
};

double train_linear(LinearModel& m,
                    const std::vector<std::vector<float>>& x,
                    const std::vector<int>& y, double lr, double wd,
                    int epochs) {
  const int n = (int)x.size(), d = m.d, c = m.c;
  std::vector<double> mom(m.w.size(), 0.0), vel(m.w.size(), 0.0);
  std::vector<double> logits(c), probs(c), grad(m.w.size());
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double loss = 0;
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    std::fill(grad.begin(), grad.end(), 0.0);
    loss = 0;
    for (int i = 0; i < n; ++i) {
      for (int cc = 0; cc < c; ++cc) {
        double s = m.w[d * c + cc];  // bias
        for (int k = 0; k < d; ++k) s += m.w[k * c + cc] * x[i][k];
        logits[cc] = s;
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0;
      for (int cc = 0; cc < c; ++cc) {
        probs[cc] = std::exp(logits[cc] - mx);
        z += probs[cc];
      }
      for (int cc = 0; cc < c; ++cc) probs[cc] /= z;
      loss -= std::log(std::max(probs[y[i]], 1e-300));
      for (int cc = 0; cc < c; ++cc) {
        const double g = (probs[cc] - (cc == y[i] ? 1.0 : 0.0)) / n;
        for (int k = 0; k < d; ++k) grad[k * c + cc] += g * x[i][k];
        grad[d * c + cc] += g;
      }
    }
    const double bc1 = 1.0 - std::pow(b1, epoch);
    const double bc2 = 1.0 - std::pow(b2, epoch);
    for (std::size_t j = 0; j < m.w.size(); ++j) {
      mom[j] = b1 * mom[j] + (1 - b1) * grad[j];
      vel[j] = b2 * vel[j] + (1 - b2) * grad[j] * grad[j];
      double upd = (mom[j] / bc1) / (std::sqrt(vel[j] / bc2) + eps);
      if (j < (std::size_t)(m.d * m.c)) upd += wd * m.w[j];
      m.w[j] -= lr * upd;
    }
  }
  return loss / std::max(n, 1);
}

double eval_linear(const LinearModel& m,
                   const std::vector<std::vector<float>>& x,
                   const std::vector<int>& y) {
  int correct = 0;
  const int d = m.d, c = m.c;
  for (std::size_t i = 0; i < x.size(); ++i) {
    int best = 0;
    double best_s = -1e300;
    for (int cc = 0; cc < c; ++cc) {
      double s = m.w[d * c + cc];
      for (int k = 0; k < d; ++k) s += m.w[k * c + cc] * x[i][k];
      if (s > best_s) {
        best_s = s;
        best = cc;
      }
    }
    if (best == y[i]) ++correct;
  }
  return x.empty() ? 0.0 : (double)correct / (double)x.size();
}

}  // namespace

ProbeResult linear_probe(const std::vector<std::vector<float>>& train_features,
                         const std::vector<int>& train_labels,
                         const std::vector<std::vector<float>>& test_features,
                         const std::vector<int>& test_labels, int n_classes,
                         const std::vector<double>& lr_grid,
                         const std::vector<double>& wd_grid, int epochs,
                         std::uint64_t seed) {
  if (n_classes < 2)
    throw ShapeError("linear_probe: need at least two classes");
  {
    bool multi = false;
    for (int y : train_labels)
      if (y != train_labels[0]) multi = true;
    if (!multi) throw ShapeError("linear_probe: single-class training set");
  }
  const int d = (int)train_features[0].size();
  // deterministic 80/20 train/validation split
  Rng rng = rng_at(seed, Stream::probe);
  std::vector<int> order(train_features.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i + 1 < order.size(); ++i) {
    const std::size_t j = i + rng.randint(order.size() - i);
    std::swap(order[i], order[j]);
  }
  const int n_val = std::max<int>(1, (int)order.size() / 5);
  std::vector<std::vector<float>> fit_x, val_x;
  std::vector<int> fit_y, val_y;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if ((int)i < n_val) {
      val_x.push_back(train_features[order[i]]);
      val_y.push_back(train_labels[order[i]]);
    } else {
      fit_x.push_back(train_features[order[i]]);
      fit_y.push_back(train_labels[order[i]]);
    }
  }

  double best_val = -1;
  double best_lr = lr_grid[0], best_wd = wd_grid[0];
  for (double lr : lr_grid)
    for (double wd : wd_grid) {
      LinearModel m{std::vector<double>((d + 1) * n_classes, 0.0), d,
                    n_classes};
      train_linear(m, fit_x, fit_y, lr, wd, epochs);
      const double acc = eval_linear(m, val_x, val_y);
      if (acc > best_val + 1e-12) {
        best_val = acc;
        best_lr = lr;
        best_wd = wd;
      }
    }
  // retrain the winner on the full training set, report on test
  LinearModel m{std::vector<double>((d + 1) * n_classes, 0.0), d, n_classes};
  train_linear(m, train_features, train_labels, best_lr, best_wd, epochs);
  ProbeResult res;
  res.task = "linear";
  res.metric = "accuracy";
  res.value = eval_linear(m, test_features, test_labels);
  char buf[96];
  std::snprintf(buf, sizeof buf, "lr=%g,wd=%g,epochs=%d", best_lr, best_wd,
                epochs);
  res.hyperparameters = buf;
  res.train_n = (int)train_features.size();
  res.test_n = (int)test_features.size();
  return res;
}

std::vector<std::vector<float>> cls_features(ViTState<float>& model,
                                             const SyntheticShapes& ds,
                                             const std::vector<int>& indices,
                                             int resolution) {
  std::vector<std::vector<float>> out;
  Tape<float> off(false);
  for (int idx : indices) {
    TensorF img = ds.image(idx);
    if ((int)img.shape[0] != resolution) {
      img = resize_region(img, 0, 0, (float)img.shape[0], resolution, false);
    }
    auto o = vit_forward(off, model, img, CropKind::global);
    out.emplace_back(o.cls.data(), o.cls.data() + o.cls.numel());
  }
  return out;
}

}  // namespace minidino
