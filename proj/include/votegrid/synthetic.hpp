// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic organized scenes: an object resting on a background plane,
// rastered top-down by a virtual sensor, with an optional geometric
// anomaly and exact point-level labels.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "votegrid/core.hpp"
#include "votegrid/error.hpp"
#include "votegrid/metrics.hpp"
#include "votegrid/rng.hpp"

namespace votegrid {

enum class BaseShape { Plane, Sphere, Box };
enum class AnomalyKind { None, Bump, Dent, Hole };

inline BaseShape parse_base_shape(const std::string& s) {
  if (s == "plane") return BaseShape::Plane;
  if (s == "sphere") return BaseShape::Sphere;
  if (s == "box") return BaseShape::Box;
  fail(ErrorKind::InvalidConfig, "unknown base shape: " + s);
}

inline AnomalyKind parse_anomaly_kind(const std::string& s) {
  if (s == "none") return AnomalyKind::None;
  if (s == "bump") return AnomalyKind::Bump;
  if (s == "dent") return AnomalyKind::Dent;
  if (s == "hole") return AnomalyKind::Hole;
  fail(ErrorKind::InvalidConfig, "unknown anomaly kind: " + s);
}

/// Scene recipe. Distances are meters. The raster is square with
/// side = floor(sqrt(n_points)); the scene spans [-0.25, 0.25]^2 with the
/// object footprint (radius or half-side 0.1) centered at the origin.
struct SyntheticSpec {
  BaseShape base_shape = BaseShape::Sphere;
  std::size_t n_points = 4096;
  AnomalyKind anomaly = AnomalyKind::None;
  double anomaly_size = 0.0;   // disc radius on the object surface
  double anomaly_depth = 0.0;  // peak displacement for bump/dent
  double noise_sigma = 0.0;    // depth noise
  std::uint64_t seed = 0;

  static constexpr double kExtent = 0.25;         // scene half-extent
  static constexpr double kObjectRadius = 0.1;    // footprint radius / half-side
  static constexpr double kBoxHeight = 0.06;
  static constexpr double kPlatformHeight = 0.03;

  int raster_side() const { return static_cast<int>(std::floor(std::sqrt(
      static_cast<double>(n_points)))); }

  void check() const {
    require(raster_side() >= 8, ErrorKind::InvalidSpec,
            "synthetic spec needs n_points >= 64");
    require(noise_sigma >= 0.0 && std::isfinite(noise_sigma), ErrorKind::InvalidSpec,
            "noise sigma must be a finite non-negative number");
    require(anomaly_size >= 0.0 && std::isfinite(anomaly_size), ErrorKind::InvalidSpec,
            "anomaly size must be a finite non-negative number");
    require(std::isfinite(anomaly_depth) && anomaly_depth >= 0.0, ErrorKind::InvalidSpec,
            "anomaly depth must be a finite non-negative number");
    if (anomaly != AnomalyKind::None)
      require(anomaly_size <= kObjectRadius, ErrorKind::InvalidSpec,
              "anomaly larger than the object");
  }
};

struct SyntheticSample {
  PointCloud cloud;      // organized raster
  RegionMask mask;       // exact point-level labels + grid components
};

namespace detail {

/// Object surface height at planar offset (x, y); negative = background.
inline double object_height(BaseShape shape, double x, double y) {
  const double r = SyntheticSpec::kObjectRadius;
  switch (shape) {
    case BaseShape::Sphere: {
      const double d2 = x * x + y * y;
      return d2 < r * r ? std::sqrt(r * r - d2) : -1.0;
    }
    case BaseShape::Box:
      return (std::abs(x) < r && std::abs(y) < r) ? SyntheticSpec::kBoxHeight : -1.0;
    case BaseShape::Plane:
      return x * x + y * y < r * r ? SyntheticSpec::kPlatformHeight : -1.0;
  }
  return -1.0;
}

}  // namespace detail

/// Deterministic scene synthesis. Bump and dent displace the object
/// surface along +z/-z by depth * 0.5 * (1 + cos(pi * dist / size)) inside
/// the anomaly disc; the truth mask marks exactly the displaced points.
/// Hole invalidates pixels with dist < 0.7 * size and marks the surviving
/// object pixels inside the disc (the rim) as anomalous. The random
/// anomaly center and the per-pixel noise stream are drawn in a fixed
/// order, so specs differing only in anomaly kind share one noise field.
inline SyntheticSample generate_synthetic(const SyntheticSpec& spec) {
  spec.check();
  Rng rng(spec.seed);
  const int side = spec.raster_side();
  const double pitch = 2.0 * SyntheticSpec::kExtent / static_cast<double>(side);

  // Anomaly placement: always drawn, keeping the rng stream aligned across
  // anomaly kinds. The disc stays inside 0.7 * object radius when it fits.
  const double fit_max = 0.7 * SyntheticSpec::kObjectRadius;
  const double rho_max = std::max(0.0, fit_max - spec.anomaly_size);
  const double angle = rng.uniform(0.0, 6.283185307179586);
  const double rho = rng.uniform(0.0, rho_max);
  const double ax = rho * std::cos(angle);
  const double ay = rho * std::sin(angle);

  SyntheticSample out;
  out.cloud.grid_shape = {side, side};
  out.cloud.points.resize(static_cast<std::size_t>(side) * side, Vec3::Zero());
  out.cloud.valid.assign(static_cast<std::size_t>(side) * side, 1);
  out.mask.truth.assign(static_cast<std::size_t>(side) * side, 0);

  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * side + c;
      const double x = -SyntheticSpec::kExtent + (c + 0.5) * pitch;
      const double y = SyntheticSpec::kExtent - (r + 0.5) * pitch;
      const double noise = rng.normal() * spec.noise_sigma;

      const double h = detail::object_height(spec.base_shape, x, y);
      const bool on_object = h >= 0.0;
      double z = on_object ? h : 0.0;

      if (on_object && spec.anomaly != AnomalyKind::None && spec.anomaly_size > 0.0) {
        const double dist = std::hypot(x - ax, y - ay);
        if (spec.anomaly == AnomalyKind::Hole) {
          if (dist < 0.7 * spec.anomaly_size) {
            out.cloud.valid[i] = 0;
            continue;
          }
          if (dist <= spec.anomaly_size) out.mask.truth[i] = 1;
        } else if (dist < spec.anomaly_size) {
          const double dz =
              spec.anomaly_depth * 0.5 * (1.0 + std::cos(3.141592653589793 * dist /
                                                         spec.anomaly_size));
          if (dz != 0.0) {
            z += spec.anomaly == AnomalyKind::Bump ? dz : -dz;
            out.mask.truth[i] = 1;
          }
        }
      }
      out.cloud.points[i] = Vec3(x, y, z + noise);
    }
  }
  out.mask.regions = connected_components_grid(out.mask.truth, side, side);
  return out;
}

}  // namespace votegrid
