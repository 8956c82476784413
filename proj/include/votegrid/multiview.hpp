// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0
//
// Multi-view feature lifting: orthographic depth rendering from a
// deterministic sphere of viewpoints, per-point sampling of 2D feature
// maps with occlusion tests, and masked mean fusion across views.

#pragma once

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <utility>
#include <vector>

#include "votegrid/core.hpp"
#include "votegrid/error.hpp"
#include "votegrid/parallel.hpp"

namespace votegrid {

struct ViewPose {
  Vec3 eye = Vec3(0, 0, 1);
  Vec3 target = Vec3::Zero();
  Vec3 up = Vec3::UnitZ();
  int rows = 224, cols = 224;
  double ortho_half_extent = 1.0;

  void check() const {
    require((eye - target).norm() > 0.0, ErrorKind::InvalidArgument,
            "view pose: eye must differ from target");
    const Vec3 f = (target - eye).normalized();
    require(f.cross(up).norm() > 1e-9, ErrorKind::InvalidArgument,
            "view pose: up parallel to view axis");
    require(rows > 0 && cols > 0, ErrorKind::InvalidArgument,
            "view pose: image size must be positive");
    require(ortho_half_extent > 0.0, ErrorKind::InvalidArgument,
            "view pose: ortho extent must be positive");
  }
};

struct DepthImage {
  int rows = 0, cols = 0;
  std::vector<double> depth;            // +inf = empty
  std::vector<std::ptrdiff_t> point_index;  // -1 = empty

  double& d(int r, int c) { return depth[static_cast<std::size_t>(r) * cols + c]; }
  double d(int r, int c) const {
    return depth[static_cast<std::size_t>(r) * cols + c];
  }
  std::ptrdiff_t idx(int r, int c) const {
    return point_index[static_cast<std::size_t>(r) * cols + c];
  }
};

/// Dense H' x W' x d feature field aligned to a rendered view.
struct FeatureMap2D {
  int rows = 0, cols = 0, channels = 0;
  std::vector<double> v;

  static FeatureMap2D zeros(int rows, int cols, int channels) {
    FeatureMap2D m;
    m.rows = rows;
    m.cols = cols;
    m.channels = channels;
    m.v.assign(static_cast<std::size_t>(rows) * cols * channels, 0.0);
    return m;
  }
  double& at(int r, int c, int ch) {
    return v[(static_cast<std::size_t>(r) * cols + c) * channels + ch];
  }
  double at(int r, int c, int ch) const {
    return v[(static_cast<std::size_t>(r) * cols + c) * channels + ch];
  }
};

// ---------------------------------------------------------------------------
// View placement
// ---------------------------------------------------------------------------

/// Deterministic viewpoints on a sphere around the cloud: single view
/// sits on +z above the centroid; multiple views use the Fibonacci
/// lattice. All targets are the centroid.
inline std::vector<ViewPose> make_views(const PointCloud& cloud, int n_views,
                                        double radius_scale = 2.5,
                                        int rows = 224, int cols = 224,
                                        double extent_margin = 1.1) {
  require(n_views >= 1, ErrorKind::InvalidArgument, "make_views: n_views >= 1");
  require(radius_scale > 0.0, ErrorKind::InvalidArgument,
          "make_views: radius_scale must be positive");
  const Vec3 center = centroid(cloud);
  double radius = bounding_radius(cloud, center);
  if (radius <= 0.0) radius = 1.0;  // single point cloud: arbitrary scale

  std::vector<ViewPose> views;
  views.reserve(n_views);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < n_views; ++i) {
    Vec3 dir;
    if (n_views == 1) {
      dir = Vec3::UnitZ();
    } else {
      const double z = 1.0 - 2.0 * (i + 0.5) / n_views;
      const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
      const double t = golden * i;
      dir = Vec3(r * std::cos(t), r * std::sin(t), z);
    }
    ViewPose pose;
    pose.eye = center + dir * (radius_scale * radius);
    pose.target = center;
    pose.up = std::abs(dir.z()) > 0.999 ? Vec3::UnitX() : Vec3::UnitZ();
    pose.rows = rows;
    pose.cols = cols;
    pose.ortho_half_extent = radius * extent_margin;
    pose.check();
    views.push_back(pose);
  }
  return views;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace detail {

struct CameraBasis {
  Vec3 fwd, right, up;
};

inline CameraBasis camera_basis(const ViewPose& pose) {
  CameraBasis b;
  b.fwd = (pose.target - pose.eye).normalized();
  b.right = b.fwd.cross(pose.up).normalized();
  b.up = b.right.cross(b.fwd);
  return b;
}

struct Projected {
  double x_cam, y_cam, depth;
  int row, col;     // containing pixel (may be out of range)
  bool in_frame;
};

inline Projected project(const ViewPose& pose, const CameraBasis& b,
                         const Vec3& p) {
  const Vec3 q = p - pose.eye;
  Projected pr;
  pr.x_cam = q.dot(b.right);
  pr.y_cam = q.dot(b.up);
  pr.depth = q.dot(b.fwd);
  const double e = pose.ortho_half_extent;
  pr.col = static_cast<int>(std::floor((pr.x_cam + e) / (2 * e) * pose.cols));
  pr.row = static_cast<int>(std::floor((e - pr.y_cam) / (2 * e) * pose.rows));
  pr.in_frame = pr.col >= 0 && pr.col < pose.cols && pr.row >= 0 &&
                pr.row < pose.rows;
  return pr;
}

}  // namespace detail

/// Orthographic z-buffer render. Nearest point per pixel wins; exact
/// depth ties keep the lower point index (ascending scan, strict <).
inline DepthImage render_depth(const PointCloud& cloud, const ViewPose& pose) {
  pose.check();
  require(cloud.size() > 0, ErrorKind::InvalidArgument,
          "render_depth: empty cloud");
  DepthImage img;
  img.rows = pose.rows;
  img.cols = pose.cols;
  img.depth.assign(static_cast<std::size_t>(pose.rows) * pose.cols,
                   std::numeric_limits<double>::infinity());
  img.point_index.assign(img.depth.size(), -1);

  const detail::CameraBasis basis = detail::camera_basis(pose);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (!cloud.is_valid(i)) continue;
    const detail::Projected pr = detail::project(pose, basis, cloud.points[i]);
    if (!pr.in_frame) continue;
    const std::size_t px = static_cast<std::size_t>(pr.row) * pose.cols + pr.col;
    if (pr.depth < img.depth[px]) {
      img.depth[px] = pr.depth;
      img.point_index[px] = static_cast<std::ptrdiff_t>(i);
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Feature sampling
// ---------------------------------------------------------------------------

struct SampledFeatures {
  FeatureMatrix rows;                 // N x d, zero where invisible
  std::vector<std::uint8_t> visible;  // per point
};

/// Projects every valid point into the view; points within depth_tol of
/// the z-buffer at their pixel bilinearly sample the feature map at the
/// (scaled) subpixel location. depth_tol <= 0 selects 1.5x the pixel
/// pitch. Feature map dimensions must divide the rendered image's.
inline SampledFeatures sample_point_features(const PointCloud& cloud,
                                             const ViewPose& pose,
                                             const FeatureMap2D& fmap,
                                             const DepthImage& zbuf,
                                             double depth_tol = 0.0,
                                             unsigned threads = 1) {
  pose.check();
  require(zbuf.rows == pose.rows && zbuf.cols == pose.cols,
          ErrorKind::ShapeMismatch,
          "sample_point_features: depth image does not match the pose");
  require(fmap.rows > 0 && fmap.cols > 0 && fmap.channels > 0,
          ErrorKind::ShapeMismatch, "sample_point_features: empty feature map");
  require(pose.rows % fmap.rows == 0 && pose.cols % fmap.cols == 0,
          ErrorKind::ShapeMismatch,
          "sample_point_features: feature map must divide the image size");

  const double e = pose.ortho_half_extent;
  if (depth_tol <= 0.0)
    depth_tol = 1.5 * std::max(2 * e / pose.cols, 2 * e / pose.rows);

  SampledFeatures out;
  out.rows = FeatureMatrix::Zero(static_cast<Eigen::Index>(cloud.size()),
                                 fmap.channels);
  out.visible.assign(cloud.size(), 0);

  const detail::CameraBasis basis = detail::camera_basis(pose);
  const double sr = static_cast<double>(fmap.rows) / pose.rows;
  const double sc = static_cast<double>(fmap.cols) / pose.cols;

  parallel_for(cloud.size(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      if (!cloud.is_valid(i)) continue;
      const detail::Projected pr = detail::project(pose, basis, cloud.points[i]);
      if (!pr.in_frame) continue;
      const double z = zbuf.d(pr.row, pr.col);
      if (!(pr.depth - z <= depth_tol)) continue;  // occluded or empty pixel

      // Continuous pixel-center coordinates in the rendered image, then
      // scaled into the feature map.
      const double cx = (pr.x_cam + e) / (2 * e) * pose.cols - 0.5;
      const double cy = (e - pr.y_cam) / (2 * e) * pose.rows - 0.5;
      const double fx = (cx + 0.5) * sc - 0.5;
      const double fy = (cy + 0.5) * sr - 0.5;
      const int x0 = static_cast<int>(std::floor(fx));
      const int y0 = static_cast<int>(std::floor(fy));
      const double wx = fx - x0, wy = fy - y0;
      const auto clampc = [&](int c) { return std::clamp(c, 0, fmap.cols - 1); };
      const auto clampr = [&](int r) { return std::clamp(r, 0, fmap.rows - 1); };
      const int xa = clampc(x0), xb = clampc(x0 + 1);
      const int ya = clampr(y0), yb = clampr(y0 + 1);
      for (int ch = 0; ch < fmap.channels; ++ch) {
        const double top =
            fmap.at(ya, xa, ch) * (1 - wx) + fmap.at(ya, xb, ch) * wx;
        const double bot =
            fmap.at(yb, xa, ch) * (1 - wx) + fmap.at(yb, xb, ch) * wx;
        out.rows(static_cast<Eigen::Index>(i), ch) = top * (1 - wy) + bot * wy;
      }
      out.visible[i] = 1;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------------

/// Mean over the views in which each point is visible; points visible
/// nowhere get zero rows. With universal visibility this is the plain
/// average across views.
inline FeatureMatrix fuse_views(const std::vector<SampledFeatures>& views) {
  require(!views.empty(), ErrorKind::InvalidArgument,
          "fuse_views: no views given");
  const Eigen::Index n = views[0].rows.rows();
  const Eigen::Index d = views[0].rows.cols();
  for (const auto& v : views)
    require(v.rows.rows() == n && v.rows.cols() == d &&
                v.visible.size() == static_cast<std::size_t>(n),
            ErrorKind::ShapeMismatch, "fuse_views: view shape mismatch");
  FeatureMatrix out = FeatureMatrix::Zero(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    int count = 0;
    for (const auto& v : views) {
      if (!v.visible[static_cast<std::size_t>(i)]) continue;
      out.row(i) += v.rows.row(i);
      ++count;
    }
    if (count > 0) out.row(i) /= static_cast<double>(count);
  }
  return out;
}

}  // namespace votegrid
