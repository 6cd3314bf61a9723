// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "minidino/rng.hpp"

namespace minidino {

// Flat clustering of n points in R^d: k-means++ seeding, Lloyd iterations
// to an assignment fixpoint (or max_iter), empty clusters re-seeded from
// the point farthest from its centroid. Deterministic under the seed.
struct Clustering {
  std::vector<std::vector<double>> centroids;  // k x d
  std::vector<int> assignment;                 // n
  double sse = 0;                              // within-cluster squared error
  int iterations = 0;
};

Clustering kmeans(const std::vector<std::vector<double>>& points, int k,
                  int max_iter, std::uint64_t seed);

// Hierarchy over strictly decreasing level counts: level 0 clusters the
// points, level l+1 clusters level l's centroids. assignment_of composes
// the chain downward, so every point has a cluster at every level.
struct ClusterHierarchy {
  std::vector<Clustering> levels;
  std::vector<std::vector<int>> point_level_assignment;  // levels x n

  int level_count() const { return (int)levels.size(); }
  int cluster_count(int level) const {
    return (int)levels[level].centroids.size();
  }
};

ClusterHierarchy build_hierarchy(const std::vector<std::vector<double>>& points,
                                 const std::vector<int>& level_counts,
                                 int max_iter, std::uint64_t seed);

struct CurationReport {
  std::vector<std::vector<int>> occupancy;  // per level: samples per cluster
  std::vector<double> balance_entropy;      // per level, nats
  int requested = 0;
  int sampled = 0;

  std::string csv() const;
};

// Top-down balanced sampling: the request splits as evenly as integer
// arithmetic allows among the top-level clusters, recursively down the
// hierarchy; shortfall in small clusters redistributes to their siblings;
// leaves sample without replacement.
std::vector<int> balanced_sample(const ClusterHierarchy& h, int m,
                                 std::uint64_t seed, CurationReport* report);

// Entropy (nats) of a normalized occupancy histogram.
double occupancy_entropy(const std::vector<int>& counts);

}  // namespace minidino
