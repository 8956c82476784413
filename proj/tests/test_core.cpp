// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "votegrid/core.hpp"
#include "votegrid/rng.hpp"

using namespace votegrid;

namespace {

PointCloud random_cloud(std::uint64_t seed, std::size_t n, double extent = 1.0) {
  Rng rng(seed);
  PointCloud c;
  c.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    c.points.push_back(Vec3(rng.uniform(-extent, extent),
                            rng.uniform(-extent, extent),
                            rng.uniform(-extent, extent)));
  return c;
}

// Brute-force voxel binning: floor((p - min) / cell) per axis.
std::map<std::array<int, 3>, std::vector<std::size_t>> brute_bins(
    const PointCloud& cloud, double cell) {
  Vec3 lo = cloud.points[0];
  for (const Vec3& p : cloud.points) lo = lo.cwiseMin(p);
  std::map<std::array<int, 3>, std::vector<std::size_t>> bins;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 q = (cloud.points[i] - lo) / cell;
    bins[{static_cast<int>(std::floor(q.x())), static_cast<int>(std::floor(q.y())),
          static_cast<int>(std::floor(q.z()))}]
        .push_back(i);
  }
  return bins;
}

// Brute-force k nearest with (distance, index) tie-break.
std::vector<std::size_t> brute_knn(const PointCloud& cloud, std::size_t q,
                                   std::size_t k) {
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (i == q || !cloud.is_valid(i)) continue;
    cand.emplace_back((cloud.points[i] - cloud.points[q]).squaredNorm(), i);
  }
  std::sort(cand.begin(), cand.end());
  cand.resize(std::min(cand.size(), k));
  std::vector<std::size_t> out;
  for (auto& [d, i] : cand) out.push_back(i);
  return out;
}

std::vector<std::size_t> brute_radius(const PointCloud& cloud, std::size_t q,
                                      double r) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (i == q || !cloud.is_valid(i)) continue;
    if ((cloud.points[i] - cloud.points[q]).norm() <= r) out.push_back(i);
  }
  return out;
}

}  // namespace

TEST_CASE("voxelize worked example: three points, two cells") {
  // Points (0.01,0.01,0.01), (0.012,0.011,0.013), (0.05,0.01,0.01) with
  // cell 0.005: the first two land in one cell (count 2), the third in
  // another (count 1).
  PointCloud c = make_cloud({Vec3(0.01, 0.01, 0.01), Vec3(0.012, 0.011, 0.013),
                             Vec3(0.05, 0.01, 0.01)});
  SparseVoxelGrid g = voxelize(c, 0.005);
  REQUIRE(g.cell_count() == 2);
  std::vector<double> counts;
  for (const CellIndex& cell : g.sorted_cells()) counts.push_back(g.find(cell)[0]);
  std::sort(counts.begin(), counts.end());
  REQUIRE(counts == std::vector<double>{1.0, 2.0});
}

TEST_CASE("voxelize matches brute-force binning") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
    PointCloud c = random_cloud(seed, 500, 0.3);
    const double cell = 0.05;
    SparseVoxelGrid g = voxelize(c, cell);
    auto bins = brute_bins(c, cell);
    REQUIRE(g.cell_count() == bins.size());
    double total = 0.0;
    for (auto& [key, members] : bins) {
      const double* f = g.find(CellIndex{key[0], key[1], key[2]});
      REQUIRE(f != nullptr);
      REQUIRE(f[0] == static_cast<double>(members.size()));
      total += f[0];
    }
    REQUIRE(total == static_cast<double>(c.size()));  // conservation
  }
}

TEST_CASE("voxelize mean-feature reducer averages per cell") {
  PointCloud c = random_cloud(7, 200, 0.2);
  FeatureMatrix feats(200, 3);
  Rng rng(99);
  for (int i = 0; i < 200; ++i)
    for (int j = 0; j < 3; ++j) feats(i, j) = rng.normal();
  const double cell = 0.07;
  SparseVoxelGrid g = voxelize(c, cell, VoxelReducer::MeanFeature, &feats);
  auto bins = brute_bins(c, cell);
  for (auto& [key, members] : bins) {
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    for (std::size_t i : members) mean += feats.row(i).transpose();
    mean /= static_cast<double>(members.size());
    const double* f = g.find(CellIndex{key[0], key[1], key[2]});
    bool all_zero = mean.cwiseAbs().maxCoeff() == 0.0;
    if (all_zero) {
      REQUIRE(f == nullptr);
    } else {
      REQUIRE(f != nullptr);
      for (int j = 0; j < 3; ++j) REQUIRE(f[j] == Catch::Approx(mean[j]).margin(1e-12));
    }
  }
}

TEST_CASE("voxelize respects the validity mask") {
  PointCloud c = random_cloud(11, 100, 0.2);
  c.valid.assign(100, 1);
  for (std::size_t i = 0; i < 100; i += 3) c.valid[i] = 0;
  SparseVoxelGrid g = voxelize(c, 0.05);
  double total = 0.0;
  for (const CellIndex& cell : g.sorted_cells()) total += g.find(cell)[0];
  REQUIRE(total == static_cast<double>(c.valid_count()));
}

TEST_CASE("voxelize rejects non-positive cell size") {
  PointCloud c = random_cloud(1, 10);
  REQUIRE_THROWS_AS(voxelize(c, 0.0), Error);
  REQUIRE_THROWS_AS(voxelize(c, -1.0), Error);
}

TEST_CASE("knn worked example: four collinear points") {
  // x-axis positions 0, 1, 2.5, 10: neighbors of point 0 with k=2 are
  // {1, 2} in that order.
  PointCloud c = make_cloud(
      {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2.5, 0, 0), Vec3(10, 0, 0)});
  auto nn = knn_search(c, 2);
  REQUIRE(nn[0] == std::vector<std::size_t>{1, 2});
  REQUIRE(nn[1] == std::vector<std::size_t>{0, 2});
  REQUIRE(nn[3] == std::vector<std::size_t>{2, 1});
}

TEST_CASE("knn matches brute force on random clouds") {
  for (std::uint64_t seed : {10ull, 20ull, 30ull}) {
    PointCloud c = random_cloud(seed, 300);
    for (std::size_t k : {1ull, 4ull, 9ull}) {
      auto nn = knn_search(c, k);
      for (std::size_t q = 0; q < c.size(); ++q)
        REQUIRE(nn[q] == brute_knn(c, q, k));
    }
  }
}

TEST_CASE("knn tie-break prefers the smaller index") {
  // Two neighbors at identical distance from the query.
  PointCloud c = make_cloud(
      {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(-1, 0, 0), Vec3(5, 0, 0)});
  auto nn = knn_search(c, 1);
  REQUIRE(nn[0] == std::vector<std::size_t>{1});

  // Duplicate coordinates: all ties resolve by index.
  PointCloud d = make_cloud(
      {Vec3(0, 0, 0), Vec3(1, 1, 1), Vec3(1, 1, 1), Vec3(1, 1, 1)});
  auto nn2 = knn_search(d, 2);
  REQUIRE(nn2[0] == std::vector<std::size_t>{1, 2});
  REQUIRE(nn2[3] == std::vector<std::size_t>{1, 2});
}

TEST_CASE("knn excludes invalid points and the query itself") {
  PointCloud c = random_cloud(42, 120);
  c.valid.assign(120, 1);
  for (std::size_t i = 0; i < 120; i += 4) c.valid[i] = 0;
  auto nn = knn_search(c, 3);
  for (std::size_t q = 0; q < c.size(); ++q) {
    if (!c.is_valid(q)) {
      REQUIRE(nn[q].empty());
      continue;
    }
    REQUIRE(nn[q] == brute_knn(c, q, 3));
    for (std::size_t j : nn[q]) {
      REQUIRE(j != q);
      REQUIRE(c.is_valid(j));
    }
  }
}

TEST_CASE("knn needs at least k+1 valid points") {
  PointCloud c = random_cloud(3, 5);
  REQUIRE_THROWS_AS(knn_search(c, 5), Error);
  REQUIRE_NOTHROW(knn_search(c, 4));
}

TEST_CASE("knn is invariant to thread count") {
  PointCloud c = random_cloud(77, 400);
  auto one = knn_search(c, 6, 1);
  auto four = knn_search(c, 6, 4);
  REQUIRE(one == four);
}

TEST_CASE("radius search worked example and closed-ball boundary") {
  // Neighbor exactly at distance r must be included.
  PointCloud c = make_cloud(
      {Vec3(0, 0, 0), Vec3(0.5, 0, 0), Vec3(1.0, 0, 0), Vec3(1.5, 0, 0)});
  auto r = radius_search(c, 0, 1.0);
  REQUIRE(r == std::vector<std::size_t>{1, 2});
}

TEST_CASE("radius search matches brute force") {
  for (std::uint64_t seed : {100ull, 200ull}) {
    PointCloud c = random_cloud(seed, 250);
    for (double rad : {0.3, 0.8, 2.0}) {
      for (std::size_t q = 0; q < c.size(); q += 17)
        REQUIRE(radius_search(c, q, rad) == brute_radius(c, q, rad));
    }
  }
}

TEST_CASE("radius search rejects bad arguments") {
  PointCloud c = random_cloud(5, 20);
  REQUIRE_THROWS_AS(radius_search(c, 0, 0.0), Error);
  REQUIRE_THROWS_AS(radius_search(c, 0, -0.5), Error);
  c.valid.assign(20, 1);
  c.valid[3] = 0;
  REQUIRE_THROWS_AS(radius_search(c, 3, 1.0), Error);
}

TEST_CASE("organized cloud invariants") {
  PointCloud c;
  c.points.assign(6, Vec3::Zero());
  c.grid_shape = {2, 3};
  REQUIRE_THROWS_AS(c.check(), Error);  // missing mask
  c.valid.assign(6, 1);
  REQUIRE_NOTHROW(c.check());
  c.grid_shape = {2, 4};
  REQUIRE_THROWS_AS(c.check(), Error);  // size mismatch
}

TEST_CASE("centroid and bounding radius") {
  PointCloud c = make_cloud({Vec3(1, 0, 0), Vec3(-1, 0, 0), Vec3(0, 2, 0)});
  Vec3 m = centroid(c);
  REQUIRE(m.isApprox(Vec3(0, 2.0 / 3.0, 0), 1e-12));
  REQUIRE(bounding_radius(c, Vec3::Zero()) == Catch::Approx(2.0));
  PointCloud empty;
  REQUIRE_THROWS_AS(centroid(empty), Error);
}

TEST_CASE("rng produces identical streams per seed") {
  Rng a(12345), b(12345);
  for (int i = 0; i < 1000; ++i) {
    REQUIRE(a.uniform() == b.uniform());
    REQUIRE(a.normal() == b.normal());
    REQUIRE(a.uniform_index(17) == b.uniform_index(17));
  }
}

TEST_CASE("rng uniform stays in [0,1) and index in range") {
  Rng r(9);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    REQUIRE(r.uniform_index(7) < 7);
  }
}

TEST_CASE("rng normal has plausible moments") {
  Rng r(31);
  const int n = 200000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  REQUIRE(std::abs(mean) < 0.01);
  REQUIRE(std::abs(var - 1.0) < 0.02);
}
