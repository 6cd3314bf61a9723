// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#include "minidino/curation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "minidino/errors.hpp"

namespace minidino {

namespace {

double dist2(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

Clustering kmeans(const std::vector<std::vector<double>>& points, int k,
                  int max_iter, std::uint64_t seed) {
  const int n = (int)points.size();
  if (k < 1) throw ShapeError("kmeans: k must be >= 1");
  if (n < k)
    throw ShapeError("kmeans: " + std::to_string(n) + " points cannot form " +
                     std::to_string(k) + " clusters");
  const std::size_t d = points[0].size();
  Rng rng = rng_at(seed, Stream::curation);

  // k-means++ seeding
  Clustering c;
  c.centroids.push_back(points[rng.randint(n)]);
  std::vector<double> best_d2(n, std::numeric_limits<double>::infinity());
  while ((int)c.centroids.size() < k) {
    double total = 0;
    for (int i = 0; i < n; ++i) {
      best_d2[i] = std::min(best_d2[i], dist2(points[i], c.centroids.back()));
      total += best_d2[i];
    }
    int chosen = 0;
    if (total <= 0) {
      chosen = (int)rng.randint(n);  // all points coincide with a centroid
    } else {
      double u = rng.uniform() * total;
      for (int i = 0; i < n; ++i) {
        if (u < best_d2[i]) {
          chosen = i;
          break;
        }
        u -= best_d2[i];
        chosen = i;
      }
    }
    c.centroids.push_back(points[chosen]);
  }

  // Lloyd iterations to a fixpoint
  c.assignment.assign(n, -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double bd = dist2(points[i], c.centroids[0]);
      for (int j = 1; j < k; ++j) {
        const double dj = dist2(points[i], c.centroids[j]);
        if (dj < bd) {
          bd = dj;
          best = j;
        }
      }
      if (c.assignment[i] != best) {
        c.assignment[i] = best;
        changed = true;
      }
    }
    c.iterations = it + 1;
    // recompute centroids; empty clusters grab the farthest point
    std::vector<std::vector<double>> sums(k, std::vector<double>(d, 0.0));
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) sums[c.assignment[i]][j] += points[i][j];
      ++counts[c.assignment[i]];
    }
    for (int j = 0; j < k; ++j) {
      if (counts[j] == 0) {
        int far = 0;
        double fd = -1;
        for (int i = 0; i < n; ++i) {
          const double di = dist2(points[i], c.centroids[c.assignment[i]]);
          if (di > fd) {
            fd = di;
            far = i;
          }
        }
        c.centroids[j] = points[far];
        c.assignment[far] = j;
        changed = true;
      } else {
        for (std::size_t jj = 0; jj < d; ++jj)
          c.centroids[j][jj] = sums[j][jj] / counts[j];
      }
    }
    if (!changed) break;
  }
  c.sse = 0;
  for (int i = 0; i < n; ++i)
    c.sse += dist2(points[i], c.centroids[c.assignment[i]]);
  return c;
}

ClusterHierarchy build_hierarchy(
    const std::vector<std::vector<double>>& points,
    const std::vector<int>& level_counts, int max_iter, std::uint64_t seed) {
  if (level_counts.empty())
    throw ShapeError("build_hierarchy: need at least one level");
  for (std::size_t l = 1; l < level_counts.size(); ++l)
    if (level_counts[l] >= level_counts[l - 1])
      throw ShapeError("build_hierarchy: level counts must strictly decrease");
  ClusterHierarchy h;
  const std::vector<std::vector<double>>* current = &points;
  std::vector<std::vector<double>> scratch;
  for (std::size_t l = 0; l < level_counts.size(); ++l) {
    h.levels.push_back(
        kmeans(*current, level_counts[l], max_iter, seed + 1000 * l));
    scratch = h.levels.back().centroids;
    current = &scratch;
  }
  // compose assignments down to points
  const int n = (int)points.size();
  h.point_level_assignment.resize(h.levels.size());
  h.point_level_assignment[0] = h.levels[0].assignment;
  for (std::size_t l = 1; l < h.levels.size(); ++l) {
    h.point_level_assignment[l].resize(n);
    for (int i = 0; i < n; ++i)
      h.point_level_assignment[l][i] =
          h.levels[l].assignment[h.point_level_assignment[l - 1][i]];
  }
  return h;
}

double occupancy_entropy(const std::vector<int>& counts) {
  double total = 0;
  for (int c : counts) total += c;
  if (total <= 0) return 0;
  double ent = 0;
  for (int c : counts) {
    if (c <= 0) continue;
    const double p = c / total;
    ent -= p * std::log(p);
  }
  return ent;
}

namespace {

// Recursive even-quota split. `members` maps each child cluster id at this
// level to the point indices beneath it; quotas that exceed a child's
// capacity spill over to its siblings (waterfilling in ascending capacity).
void split_quota(const std::vector<std::vector<int>>& members, int m,
                 Rng& rng, std::vector<int>& chosen_per_child) {
  const int k = (int)members.size();
  chosen_per_child.assign(k, 0);
  std::vector<int> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return members[a].size() < members[b].size();
  });
  int remaining = m;
  int slots_left = k;
  for (int oi = 0; oi < k; ++oi) {
    const int child = order[oi];
    const int cap = (int)members[child].size();
    const int fair = (remaining + slots_left - 1) / slots_left;  // ceil share
    const int take = std::min(cap, std::min(fair, remaining));
    chosen_per_child[child] = take;
    remaining -= take;
    --slots_left;
  }
  // distribute leftovers to children with spare capacity, largest first
  if (remaining > 0) {
    std::vector<int> by_cap(order.rbegin(), order.rend());
    for (int child : by_cap) {
      const int spare = (int)members[child].size() - chosen_per_child[child];
      const int take = std::min(spare, remaining);
      chosen_per_child[child] += take;
      remaining -= take;
      if (remaining == 0) break;
    }
  }
  (void)rng;
}

void sample_recursive(const ClusterHierarchy& h, int level,
                      const std::vector<int>& pool, int m, Rng& rng,
                      std::vector<int>& out) {
  if (m <= 0) return;
  if (level < 0) {
    // leaf: without-replacement sample from the pool
    std::vector<int> scratch = pool;
    for (int i = 0; i < m; ++i) {
      const int j = i + (int)rng.randint(scratch.size() - i);
      std::swap(scratch[i], scratch[j]);
      out.push_back(scratch[i]);
    }
    return;
  }
  const int k = h.cluster_count(level);
  std::vector<std::vector<int>> members(k);
  for (int idx : pool)
    members[h.point_level_assignment[level][idx]].push_back(idx);
  // drop empty clusters so quotas only see real capacity
  std::vector<std::vector<int>> occupied;
  for (auto& mem : members)
    if (!mem.empty()) occupied.push_back(std::move(mem));
  std::vector<int> quota;
  split_quota(occupied, m, rng, quota);
  for (std::size_t cch = 0; cch < occupied.size(); ++cch)
    sample_recursive(h, level - 1, occupied[cch], quota[cch], rng, out);
}

}  // namespace

std::vector<int> balanced_sample(const ClusterHierarchy& h, int m,
                                 std::uint64_t seed, CurationReport* report) {
  const int n = (int)h.point_level_assignment[0].size();
  if (m > n)
    throw ShapeError("balanced_sample: requested " + std::to_string(m) +
                     " of " + std::to_string(n) + " samples");
  Rng rng = rng_at(seed, Stream::curation, 0x5a5a);
  std::vector<int> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  std::vector<int> out;
  sample_recursive(h, h.level_count() - 1, pool, m, rng, out);
  std::sort(out.begin(), out.end());
  if (report) {
    report->requested = m;
    report->sampled = (int)out.size();
    report->occupancy.clear();
    report->balance_entropy.clear();
    for (int l = 0; l < h.level_count(); ++l) {
      std::vector<int> occ(h.cluster_count(l), 0);
      for (int idx : out) ++occ[h.point_level_assignment[l][idx]];
      report->balance_entropy.push_back(occupancy_entropy(occ));
      report->occupancy.push_back(std::move(occ));
    }
  }
  return out;
}

std::string CurationReport::csv() const {
  std::ostringstream os;
  os << "level,cluster,occupancy,entropy\n";
  for (std::size_t l = 0; l < occupancy.size(); ++l)
    for (std::size_t c = 0; c < occupancy[l].size(); ++c) {
      char buf[120];
      std::snprintf(buf, sizeof buf, "%zu,%zu,%d,%.10g\n", l, c,
                    occupancy[l][c], balance_entropy[l]);
      os << buf;
    }
  return os.str();
}

}  // namespace minidino
