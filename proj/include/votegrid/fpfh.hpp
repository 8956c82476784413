// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0
//
// Fast Point Feature Histograms: 33-dimensional local geometry
// descriptors built from Darboux-frame angles between normals, with a
// weighted neighborhood pooling step. Serves as the 3D feature branch.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "votegrid/core.hpp"
#include "votegrid/error.hpp"
#include "votegrid/parallel.hpp"

namespace votegrid {

struct FpfhConfig {
  double normal_radius = 0.02;
  double feature_radius = 0.04;
  int bins_per_angle = 11;
  double downsample_leaf = 0.005;  // 0 disables downsampling
  Vec3 viewpoint = Vec3::Zero();   // normals face this point

  int dimension() const { return 3 * bins_per_angle; }

  void check() const {
    require(normal_radius > 0.0 && feature_radius > 0.0,
            ErrorKind::InvalidConfig, "fpfh radii must be positive");
    require(bins_per_angle > 0, ErrorKind::InvalidConfig,
            "bins_per_angle must be positive");
    require(downsample_leaf >= 0.0, ErrorKind::InvalidConfig,
            "downsample_leaf must be non-negative");
  }
};

struct NormalField {
  std::vector<Vec3> normals;       // zero vector where flagged
  std::vector<std::uint8_t> ok;    // 0 = degenerate neighborhood
};

/// Covariance-eigenvector normals over closed-ball neighborhoods,
/// oriented toward the viewpoint. Points with fewer than 3 neighbors are
/// flagged instead of erroring so row alignment survives.
inline NormalField estimate_normals(const PointCloud& cloud, double radius,
                                    const Vec3& viewpoint = Vec3::Zero(),
                                    unsigned threads = 1) {
  require(radius > 0.0, ErrorKind::InvalidArgument,
          "estimate_normals: radius must be positive");
  NormalField out;
  out.normals.assign(cloud.size(), Vec3::Zero());
  out.ok.assign(cloud.size(), 0);

  const auto valid = cloud.valid_indices();
  if (valid.empty()) return out;
  KdTree tree(cloud);

  parallel_for(valid.size(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t vi = begin; vi < end; ++vi) {
      const std::size_t i = valid[vi];
      const auto nbrs = tree.radius(i, radius);
      if (nbrs.size() < 3) continue;  // flagged
      Vec3 mean = cloud.points[i];
      for (std::size_t j : nbrs) mean += cloud.points[j];
      mean /= static_cast<double>(nbrs.size() + 1);
      Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
      {
        const Vec3 d = cloud.points[i] - mean;
        cov += d * d.transpose();
      }
      for (std::size_t j : nbrs) {
        const Vec3 d = cloud.points[j] - mean;
        cov += d * d.transpose();
      }
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
      if (es.info() != Eigen::Success) continue;
      Vec3 n = es.eigenvectors().col(0).normalized();
      if (n.dot(viewpoint - cloud.points[i]) < 0.0) n = -n;
      out.normals[i] = n;
      out.ok[i] = 1;
    }
  });
  return out;
}

namespace detail {

/// Darboux-frame angles between a source point/normal and a target
/// point/normal. With coincident source and target directions the frame
/// degenerates; alpha and theta are defined as 0 there.
struct PairAngles {
  double alpha;  // in [-1, 1] (cosine)
  double phi;    // in [-1, 1] (cosine)
  double theta;  // in [-pi, pi]
};

inline PairAngles pair_angles(const Vec3& ps, const Vec3& ns, const Vec3& pt,
                              const Vec3& nt) {
  const Vec3 diff = pt - ps;
  const double dist = diff.norm();
  const Vec3 d = diff / dist;
  const Vec3& u = ns;
  PairAngles a;
  a.phi = u.dot(d);
  const Vec3 v = d.cross(u);
  const double vn = v.norm();
  if (vn < 1e-12) {
    a.alpha = 0.0;
    a.theta = 0.0;
    return a;
  }
  const Vec3 vhat = v / vn;
  const Vec3 w = u.cross(vhat);
  a.alpha = vhat.dot(nt);
  a.theta = std::atan2(w.dot(nt), u.dot(nt));
  return a;
}

inline int bin_index(double value, double lo, double hi, int bins) {
  const int idx = static_cast<int>(std::floor((value - lo) / (hi - lo) * bins));
  return std::clamp(idx, 0, bins - 1);
}

}  // namespace detail

struct SpfhResult {
  std::vector<double> hist;     // 3 * bins, each block sums to 1 (or 0)
  std::size_t neighbor_count = 0;
};

/// Single-point SPFH: bins the Darboux angles against every neighbor in
/// the feature radius, one uniform histogram block per angle, each block
/// normalized to sum 1. Zero neighbors yield a zero histogram.
inline SpfhResult spfh(const PointCloud& cloud, const NormalField& normals,
                       const KdTree& tree, std::size_t index, double radius,
                       int bins) {
  SpfhResult out;
  out.hist.assign(static_cast<std::size_t>(3) * bins, 0.0);
  if (!normals.ok[index]) return out;
  const auto nbrs = tree.radius(index, radius);
  constexpr double pi = std::numbers::pi;
  for (std::size_t j : nbrs) {
    if (!normals.ok[j]) continue;
    const double dist = (cloud.points[j] - cloud.points[index]).norm();
    if (dist <= 0.0) continue;
    const detail::PairAngles a =
        detail::pair_angles(cloud.points[index], normals.normals[index],
                            cloud.points[j], normals.normals[j]);
    out.hist[detail::bin_index(a.alpha, -1.0, 1.0, bins)] += 1.0;
    out.hist[bins + detail::bin_index(a.phi, -1.0, 1.0, bins)] += 1.0;
    out.hist[2 * bins + detail::bin_index(a.theta, -pi, pi, bins)] += 1.0;
    ++out.neighbor_count;
  }
  if (out.neighbor_count > 0) {
    const double inv = 1.0 / static_cast<double>(out.neighbor_count);
    for (double& h : out.hist) h *= inv;
  }
  return out;
}

namespace detail {

/// Voxel-grid centroid downsample; also maps each original valid point to
/// its representative's index in the downsampled cloud.
struct Downsample {
  PointCloud cloud;
  std::vector<std::ptrdiff_t> rep;  // original index -> downsampled index (-1 invalid)
};

inline Downsample centroid_downsample(const PointCloud& cloud, double leaf) {
  Downsample out;
  out.rep.assign(cloud.size(), -1);
  const auto valid = cloud.valid_indices();
  if (valid.empty()) return out;
  Vec3 lo = cloud.points[valid[0]];
  for (std::size_t i : valid) lo = lo.cwiseMin(cloud.points[i]);
  std::unordered_map<CellIndex, std::size_t, CellIndexHash> cell_of;
  std::vector<Vec3> sums;
  std::vector<std::size_t> counts;
  std::vector<std::size_t> cell_for_point(cloud.size());
  for (std::size_t i : valid) {
    const Vec3 q = (cloud.points[i] - lo) / leaf;
    const CellIndex c{static_cast<std::int32_t>(std::floor(q.x())),
                      static_cast<std::int32_t>(std::floor(q.y())),
                      static_cast<std::int32_t>(std::floor(q.z()))};
    auto [it, inserted] = cell_of.try_emplace(c, sums.size());
    if (inserted) {
      sums.push_back(Vec3::Zero());
      counts.push_back(0);
    }
    sums[it->second] += cloud.points[i];
    counts[it->second] += 1;
    cell_for_point[i] = it->second;
  }
  out.cloud.points.resize(sums.size());
  for (std::size_t s = 0; s < sums.size(); ++s)
    out.cloud.points[s] = sums[s] / static_cast<double>(counts[s]);
  // Nearest-neighbor assignment; for interior points this is the own
  // cell's centroid, the tree settles boundary cases exactly.
  KdTree tree(out.cloud);
  for (std::size_t i : valid) {
    const auto nn = tree.knn_position(cloud.points[i], 1);
    out.rep[i] = static_cast<std::ptrdiff_t>(nn[0]);
  }
  return out;
}

}  // namespace detail

/// Full descriptor: optional centroid downsample, normal estimation,
/// per-point SPFH, distance-weighted neighborhood pooling, block
/// renormalization to 100, then assignment back to the original points.
/// Degenerate or invalid points get zero rows.
inline FeatureMatrix fpfh(const PointCloud& cloud, const FpfhConfig& cfg,
                          unsigned threads = 1) {
  cfg.check();
  const int dim = cfg.dimension();
  FeatureMatrix out = FeatureMatrix::Zero(static_cast<Eigen::Index>(cloud.size()), dim);

  PointCloud work;
  std::vector<std::ptrdiff_t> rep;  // original -> work index
  if (cfg.downsample_leaf > 0.0) {
    detail::Downsample ds = detail::centroid_downsample(cloud, cfg.downsample_leaf);
    work = std::move(ds.cloud);
    rep = std::move(ds.rep);
  } else {
    work.points.reserve(cloud.size());
    rep.assign(cloud.size(), -1);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      if (!cloud.is_valid(i)) continue;
      rep[i] = static_cast<std::ptrdiff_t>(work.points.size());
      work.points.push_back(cloud.points[i]);
    }
  }
  if (work.size() == 0) return out;

  const NormalField normals =
      estimate_normals(work, cfg.normal_radius, cfg.viewpoint, threads);
  KdTree tree(work);

  std::vector<SpfhResult> spfhs(work.size());
  parallel_for(work.size(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i)
      spfhs[i] = spfh(work, normals, tree, i, cfg.feature_radius,
                      cfg.bins_per_angle);
  });

  FeatureMatrix feats = FeatureMatrix::Zero(static_cast<Eigen::Index>(work.size()), dim);
  parallel_for(work.size(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      if (!normals.ok[i] || spfhs[i].neighbor_count == 0) continue;
      std::vector<double> acc = spfhs[i].hist;
      const auto nbrs = tree.radius(i, cfg.feature_radius);
      std::size_t used = 0;
      std::vector<double> pooled(dim, 0.0);
      for (std::size_t j : nbrs) {
        if (!normals.ok[j] || spfhs[j].neighbor_count == 0) continue;
        const double dist = (work.points[j] - work.points[i]).norm();
        if (dist <= 0.0) continue;
        const double wgt = 1.0 / dist;
        for (int d = 0; d < dim; ++d) pooled[d] += wgt * spfhs[j].hist[d];
        ++used;
      }
      if (used > 0)
        for (int d = 0; d < dim; ++d)
          acc[d] += pooled[d] / static_cast<double>(used);
      // Renormalize each angle block to sum 100.
      for (int b = 0; b < 3; ++b) {
        double s = 0.0;
        for (int d = 0; d < cfg.bins_per_angle; ++d)
          s += acc[b * cfg.bins_per_angle + d];
        if (s > 0.0)
          for (int d = 0; d < cfg.bins_per_angle; ++d)
            acc[b * cfg.bins_per_angle + d] *= 100.0 / s;
      }
      for (int d = 0; d < dim; ++d) feats(static_cast<Eigen::Index>(i), d) = acc[d];
    }
  });

  for (std::size_t i = 0; i < cloud.size(); ++i)
    if (rep[i] >= 0) out.row(static_cast<Eigen::Index>(i)) = feats.row(rep[i]);
  return out;
}

}  // namespace votegrid
