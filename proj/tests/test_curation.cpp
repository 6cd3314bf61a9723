// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "minidino/curation.hpp"
#include "minidino/errors.hpp"
#include "oracles.hpp"

using namespace minidino;

namespace {

// blobs of `per` points around each center
std::vector<std::vector<double>> make_blobs(
    const std::vector<std::pair<double, double>>& centers, int per,
    double spread, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> pts;
  for (const auto& c : centers)
    for (int i = 0; i < per; ++i)
      pts.push_back({c.first + spread * rng.normal(),
                     c.second + spread * rng.normal()});
  return pts;
}

}  // namespace

TEST_CASE("kmeans 1-D exhaustive oracle") {
  std::vector<std::vector<double>> pts = {{0}, {0}, {0}, {10}};
  auto c = kmeans(pts, 2, 50, 7);
  // exhaustive over all 2^4 assignments: optimum is {0,0,0} | {10}
  const int zero_cluster = c.assignment[0];
  CHECK(c.assignment[1] == zero_cluster);
  CHECK(c.assignment[2] == zero_cluster);
  CHECK(c.assignment[3] != zero_cluster);
  CHECK(c.centroids[zero_cluster][0] == doctest::Approx(0.0));
  CHECK(c.centroids[1 - zero_cluster][0] == doctest::Approx(10.0));
  CHECK(c.sse == doctest::Approx(0.0));
}

TEST_CASE("kmeans closed forms and contracts") {
  SUBCASE("k = 1 centroid is the mean") {
    std::vector<std::vector<double>> pts = {{1, 2}, {3, 4}, {5, 0}};
    auto c = kmeans(pts, 1, 10, 1);
    CHECK(c.centroids[0][0] == doctest::Approx(3.0));
    CHECK(c.centroids[0][1] == doctest::Approx(2.0));
  }
  SUBCASE("SSE is non-increasing across Lloyd iterations") {
    Rng rng(5);
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 60; ++i)
      pts.push_back({rng.uniform(-3, 3), rng.uniform(-3, 3)});
    double prev = 1e300;
    for (int iters = 1; iters <= 8; ++iters) {
      auto c = kmeans(pts, 4, iters, 11);
      CHECK(c.sse <= prev + 1e-9);
      prev = c.sse;
    }
  }
  SUBCASE("deterministic under the seed, bit for bit") {
    Rng rng(9);
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 40; ++i)
      pts.push_back({rng.normal(), rng.normal(), rng.normal()});
    auto a = kmeans(pts, 5, 30, 123);
    auto b = kmeans(pts, 5, 30, 123);
    CHECK(a.assignment == b.assignment);
    CHECK(a.centroids == b.centroids);
  }
  SUBCASE("n < k is an error") {
    std::vector<std::vector<double>> pts = {{0}, {1}};
    CHECK_THROWS_AS(kmeans(pts, 3, 10, 1), ShapeError);
  }
}

TEST_CASE("hierarchy construction") {
  SUBCASE("degenerate single level with n clusters is the identity") {
    std::vector<std::vector<double>> pts = {{0}, {5}, {10}, {15}};
    auto h = build_hierarchy(pts, {4}, 20, 3);
    CHECK(h.level_count() == 1);
    std::set<int> ids(h.point_level_assignment[0].begin(),
                      h.point_level_assignment[0].end());
    CHECK(ids.size() == 4);  // every point its own cluster
  }
  SUBCASE("two well-separated blobs of three sub-blobs each") {
    std::vector<std::pair<double, double>> centers = {
        {0, 0}, {0, 3}, {3, 0},            // blob A sub-blobs
        {100, 100}, {100, 103}, {103, 100}  // blob B sub-blobs
    };
    auto pts = make_blobs(centers, 10, 0.2, 17);
    auto h = build_hierarchy(pts, {6, 2}, 50, 23);
    // the top level separates the two far blobs
    const int n = (int)pts.size();
    std::set<int> top_a, top_b;
    for (int i = 0; i < n; ++i) {
      if (i < n / 2)
        top_a.insert(h.point_level_assignment[1][i]);
      else
        top_b.insert(h.point_level_assignment[1][i]);
    }
    CHECK(top_a.size() == 1);
    CHECK(top_b.size() == 1);
    CHECK(*top_a.begin() != *top_b.begin());
  }
  SUBCASE("parent consistency on random data") {
    Rng rng(29);
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 80; ++i)
      pts.push_back({rng.normal(), rng.normal()});
    auto h = build_hierarchy(pts, {16, 4, 2}, 30, 31);
    for (int i = 0; i < 80; ++i)
      for (int l = 0; l + 1 < h.level_count(); ++l) {
        const int child = h.point_level_assignment[l][i];
        CHECK(h.point_level_assignment[l + 1][i] ==
              h.levels[l + 1].assignment[child]);
      }
  }
  SUBCASE("counts must strictly decrease") {
    std::vector<std::vector<double>> pts(10, std::vector<double>{0.0});
    for (std::size_t i = 0; i < pts.size(); ++i) pts[i][0] = (double)i;
    CHECK_THROWS_AS(build_hierarchy(pts, {4, 4}, 10, 1), ShapeError);
  }
}

TEST_CASE("balanced sampling") {
  SUBCASE("singleton hierarchy reduces to a simple random sample") {
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 20; ++i) pts.push_back({(double)i * 7.0});
    auto h = build_hierarchy(pts, {20}, 10, 5);
    CurationReport rep;
    auto sample = balanced_sample(h, 8, 41, &rep);
    CHECK(sample.size() == 8);
    std::set<int> uniq(sample.begin(), sample.end());
    CHECK(uniq.size() == 8);
    CHECK(rep.sampled == 8);
  }
  SUBCASE("90/10 skew with an even request splits evenly") {
    // two well-separated 1-D blobs: 90 points at 0, 10 points at 100
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 90; ++i) pts.push_back({0.0 + 0.01 * i});
    for (int i = 0; i < 10; ++i) pts.push_back({100.0 + 0.01 * i});
    auto h = build_hierarchy(pts, {2}, 50, 7);
    CurationReport rep;
    auto sample = balanced_sample(h, 16, 11, &rep);
    CHECK(sample.size() == 16);
    int low = 0, high = 0;
    for (int idx : sample) (idx < 90 ? low : high)++;
    CHECK(low == 8);
    CHECK(high == 8);
  }
  SUBCASE("quota capped by availability spills to siblings") {
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 30; ++i) pts.push_back({0.0 + 0.01 * i});
    for (int i = 0; i < 4; ++i) pts.push_back({100.0 + 0.01 * i});
    auto h = build_hierarchy(pts, {2}, 50, 7);
    auto sample = balanced_sample(h, 20, 13, nullptr);
    CHECK(sample.size() == 20);
    int high = 0;
    for (int idx : sample)
      if (idx >= 30) ++high;
    CHECK(high == 4);  // everything the small cluster has
  }
  SUBCASE("sample exceeding the population is an error") {
    std::vector<std::vector<double>> pts = {{0}, {1}, {2}};
    auto h = build_hierarchy(pts, {2}, 10, 1);
    CHECK_THROWS_AS(balanced_sample(h, 4, 1, nullptr), ShapeError);
  }
  SUBCASE("balanced top-level entropy beats i.i.d. sampling on skewed data") {
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 180; ++i) pts.push_back({0.0 + 0.001 * i});
    for (int i = 0; i < 20; ++i) pts.push_back({100.0 + 0.001 * i});
    auto h = build_hierarchy(pts, {2}, 50, 3);
    const int m = 30;
    std::vector<double> balanced_ent, iid_ent;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      CurationReport rep;
      balanced_sample(h, m, seed, &rep);
      balanced_ent.push_back(rep.balance_entropy.back());
      // i.i.d. baseline: uniform sample without replacement
      Rng rng(seed * 77 + 5);
      std::vector<int> pool(pts.size());
      std::iota(pool.begin(), pool.end(), 0);
      std::vector<int> occ(2, 0);
      for (int i = 0; i < m; ++i) {
        const int j = i + (int)rng.randint(pool.size() - i);
        std::swap(pool[i], pool[j]);
        ++occ[h.point_level_assignment.back()[pool[i]]];
      }
      iid_ent.push_back(occupancy_entropy(occ));
    }
    std::sort(balanced_ent.begin(), balanced_ent.end());
    std::sort(iid_ent.begin(), iid_ent.end());
    CHECK(balanced_ent[50] >= iid_ent[50]);
  }
}
