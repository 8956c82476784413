// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0
//
// Background removal for organized scans: fit the support plane to a
// boundary strip with RANSAC, strip every point within eps of it, then
// reject sparse leftovers with DBSCAN.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <utility>
#include <vector>

#include "votegrid/core.hpp"
#include "votegrid/error.hpp"
#include "votegrid/rng.hpp"

namespace votegrid {

struct Plane {
  Vec3 normal = Vec3::UnitZ();  // unit length
  double offset = 0.0;          // plane is {x : normal . x = offset}

  double distance(const Vec3& p) const { return std::abs(normal.dot(p) - offset); }

  void check() const {
    require(std::abs(normal.norm() - 1.0) <= 1e-9, ErrorKind::InvalidArgument,
            "plane normal must be unit length");
  }
};

struct PreprocessConfig {
  int strip_width_px = 10;
  int ransac_iters = 200;
  double ransac_eps = 0.005;
  double dbscan_eps = 0.01;
  int dbscan_min_pts = 5;
  std::uint64_t seed = 0;

  void check() const {
    require(strip_width_px > 0, ErrorKind::InvalidConfig,
            "strip_width_px must be positive");
    require(ransac_iters > 0, ErrorKind::InvalidConfig,
            "ransac_iters must be positive");
    require(ransac_eps > 0.0, ErrorKind::InvalidConfig,
            "ransac_eps must be positive");
    require(dbscan_eps > 0.0, ErrorKind::InvalidConfig,
            "dbscan_eps must be positive");
    require(dbscan_min_pts > 0, ErrorKind::InvalidConfig,
            "dbscan_min_pts must be positive");
  }
};

// ---------------------------------------------------------------------------
// drop_invalid
// ---------------------------------------------------------------------------

struct DropResult {
  PointCloud cloud;                   // unorganized, valid points only
  std::vector<std::size_t> index_map; // new index -> original index
};

/// Keeps entries that are marked valid and have finite coordinates;
/// original order preserved.
inline DropResult drop_invalid(const PointCloud& cloud) {
  DropResult out;
  out.cloud.points.reserve(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (!cloud.is_valid(i) || !cloud.points[i].allFinite()) continue;
    out.cloud.points.push_back(cloud.points[i]);
    out.index_map.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// boundary_strip
// ---------------------------------------------------------------------------

/// Indices of valid points in the w-pixel frame around an organized
/// cloud's grid boundary.
inline std::vector<std::size_t> boundary_strip(const PointCloud& cloud,
                                               int strip_width_px) {
  require(cloud.organized(), ErrorKind::RequiresOrganized,
          "boundary_strip: cloud must be organized");
  require(strip_width_px > 0, ErrorKind::InvalidArgument,
          "boundary_strip: width must be positive");
  const auto [rows, cols] = *cloud.grid_shape;
  const int w = strip_width_px;
  std::vector<std::size_t> out;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      if (r >= w && r < rows - w && c >= w && c < cols - w) continue;
      const std::size_t i = static_cast<std::size_t>(r) * cols + c;
      if (cloud.is_valid(i)) out.push_back(i);
    }
  return out;
}

// ---------------------------------------------------------------------------
// RANSAC plane fit
// ---------------------------------------------------------------------------

namespace detail {

/// Canonical sign: largest-magnitude normal component made positive.
inline void canonicalize(Plane& p) {
  int axis = 0;
  p.normal.cwiseAbs().maxCoeff(&axis);
  if (p.normal[axis] < 0.0) {
    p.normal = -p.normal;
    p.offset = -p.offset;
  }
}

/// Total least squares plane through a point set (centroid + smallest
/// covariance eigenvector). Returns false when the set is degenerate.
inline bool fit_plane_lsq(const std::vector<Vec3>& pts,
                          const std::vector<std::size_t>& subset, Plane& out) {
  if (subset.size() < 3) return false;
  Vec3 mean = Vec3::Zero();
  for (std::size_t i : subset) mean += pts[i];
  mean /= static_cast<double>(subset.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (std::size_t i : subset) {
    const Vec3 d = pts[i] - mean;
    cov += d * d.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  if (es.info() != Eigen::Success) return false;
  const Vec3 n = es.eigenvectors().col(0);  // smallest eigenvalue
  if (!(n.norm() > 0.5)) return false;
  out.normal = n.normalized();
  out.offset = out.normal.dot(mean);
  canonicalize(out);
  return true;
}

}  // namespace detail

/// Seeded RANSAC plane: samples 3 distinct points per iteration, keeps the
/// candidate with the most strict-inside-eps inliers (earliest iteration
/// wins ties), refits by least squares, and returns the inliers of the
/// refit plane.
inline std::pair<Plane, std::vector<std::size_t>> ransac_plane(
    const std::vector<Vec3>& pts, int iters, double eps, std::uint64_t seed) {
  require(iters > 0, ErrorKind::InvalidArgument, "ransac_plane: iters > 0");
  require(eps > 0.0, ErrorKind::InvalidArgument, "ransac_plane: eps > 0");
  require(pts.size() >= 3, ErrorKind::DegenerateInput,
          "ransac_plane: needs at least 3 points");

  Rng rng(seed);
  Plane best;
  std::size_t best_inliers = 0;
  bool found = false;
  for (int it = 0; it < iters; ++it) {
    // Three distinct indices; degenerate triples still consume draws.
    std::size_t a = rng.uniform_index(pts.size());
    std::size_t b = rng.uniform_index(pts.size());
    std::size_t c = rng.uniform_index(pts.size());
    if (a == b || a == c || b == c) continue;
    const Vec3 n = (pts[b] - pts[a]).cross(pts[c] - pts[a]);
    const double len = n.norm();
    if (len < 1e-12) continue;  // collinear
    Plane cand;
    cand.normal = n / len;
    cand.offset = cand.normal.dot(pts[a]);
    std::size_t count = 0;
    for (const Vec3& p : pts)
      if (cand.distance(p) < eps) ++count;
    if (count > best_inliers) {  // strict: earliest iteration wins ties
      best_inliers = count;
      best = cand;
      found = true;
    }
  }
  require(found, ErrorKind::DegenerateInput,
          "ransac_plane: no non-degenerate sample found");

  // Consensus set of the sampled winner, then least-squares refit.
  std::vector<std::size_t> consensus;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (best.distance(pts[i]) < eps) consensus.push_back(i);
  Plane refit = best;
  if (!detail::fit_plane_lsq(pts, consensus, refit)) {
    refit = best;
    detail::canonicalize(refit);
  }
  // Inliers reported against the returned plane so a brute-force distance
  // check reproduces them exactly.
  std::vector<std::size_t> inliers;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (refit.distance(pts[i]) < eps) inliers.push_back(i);
  return {refit, inliers};
}

// ---------------------------------------------------------------------------
// DBSCAN
// ---------------------------------------------------------------------------

/// Density-based clustering. Core point: at least min_pts points within
/// eps (closed ball, counting itself). Labels are 0-based in order of the
/// first core point reached by the ascending scan; -1 marks noise. Border
/// points go to the first cluster that claims them.
inline std::vector<int> dbscan(const std::vector<Vec3>& pts, double eps,
                               int min_pts) {
  require(eps > 0.0, ErrorKind::InvalidArgument, "dbscan: eps > 0");
  require(min_pts >= 1, ErrorKind::InvalidArgument, "dbscan: min_pts >= 1");
  const std::size_t n = pts.size();
  std::vector<int> label(n, -2);  // -2 = unvisited, -1 = noise
  if (n == 0) return label;

  PointCloud cloud;
  cloud.points = pts;
  KdTree tree(cloud);
  const auto neighbors = [&](std::size_t i) { return tree.radius(i, eps); };

  int next_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (label[i] != -2) continue;
    auto nbrs = neighbors(i);
    if (nbrs.size() + 1 < static_cast<std::size_t>(min_pts)) {
      label[i] = -1;
      continue;
    }
    const int cluster = next_label++;
    label[i] = cluster;
    std::deque<std::size_t> queue(nbrs.begin(), nbrs.end());
    while (!queue.empty()) {
      const std::size_t q = queue.front();
      queue.pop_front();
      if (label[q] == -1) label[q] = cluster;  // border claimed
      if (label[q] != -2) continue;
      label[q] = cluster;
      auto qn = neighbors(q);
      if (qn.size() + 1 >= static_cast<std::size_t>(min_pts))
        for (std::size_t r : qn)
          if (label[r] == -2 || label[r] == -1) queue.push_back(r);
    }
  }
  return label;
}

// ---------------------------------------------------------------------------
// remove_background
// ---------------------------------------------------------------------------

struct BackgroundRemoval {
  PointCloud cloud;                    // unorganized cleaned cloud
  Plane plane;
  std::vector<std::size_t> background; // original indices removed (plane + noise)
  std::vector<std::size_t> index_map;  // cleaned index -> original index
};

/// Fits the support plane to the boundary strip, removes every valid
/// point strictly inside eps of it, then drops DBSCAN noise from the
/// remainder (when dbscan_min_pts > 1). Valid points partition into
/// cleaned + background.
inline BackgroundRemoval remove_background(const PointCloud& cloud,
                                           const PreprocessConfig& cfg) {
  cfg.check();
  require(cloud.organized(), ErrorKind::RequiresOrganized,
          "remove_background: cloud must be organized");

  const std::vector<std::size_t> strip =
      boundary_strip(cloud, cfg.strip_width_px);
  require(strip.size() >= 3, ErrorKind::DegenerateInput,
          "remove_background: fewer than 3 valid strip points");
  std::vector<Vec3> strip_pts;
  strip_pts.reserve(strip.size());
  for (std::size_t i : strip) strip_pts.push_back(cloud.points[i]);

  BackgroundRemoval out;
  auto [plane, strip_inliers] =
      ransac_plane(strip_pts, cfg.ransac_iters, cfg.ransac_eps, cfg.seed);
  out.plane = plane;

  // Classify the whole cloud against the strip-fit plane (Eq. 1 style:
  // strict < eps is background).
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (!cloud.is_valid(i) || !cloud.points[i].allFinite()) continue;
    if (plane.distance(cloud.points[i]) < cfg.ransac_eps)
      out.background.push_back(i);
    else
      kept.push_back(i);
  }
  require(!kept.empty(), ErrorKind::EmptyResult,
          "remove_background: every point lies on the background plane");

  if (cfg.dbscan_min_pts > 1) {
    std::vector<Vec3> kept_pts;
    kept_pts.reserve(kept.size());
    for (std::size_t i : kept) kept_pts.push_back(cloud.points[i]);
    const std::vector<int> labels =
        dbscan(kept_pts, cfg.dbscan_eps, cfg.dbscan_min_pts);
    std::vector<std::size_t> filtered;
    for (std::size_t j = 0; j < kept.size(); ++j) {
      if (labels[j] == -1)
        out.background.push_back(kept[j]);
      else
        filtered.push_back(kept[j]);
    }
    std::sort(out.background.begin(), out.background.end());
    kept = std::move(filtered);
  }
  require(!kept.empty(), ErrorKind::EmptyResult,
          "remove_background: no points survive noise rejection");

  out.index_map = kept;
  out.cloud.points.reserve(kept.size());
  for (std::size_t i : kept) out.cloud.points.push_back(cloud.points[i]);
  return out;
}

}  // namespace votegrid
