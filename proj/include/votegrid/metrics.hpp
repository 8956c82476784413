// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics: image-level AUROC (I-ROC) and per-region overlap
// integrated against false-positive rate (P-PRO), plus the connected
// component extraction P-PRO depends on.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "votegrid/core.hpp"
#include "votegrid/error.hpp"
#include "votegrid/parallel.hpp"

namespace votegrid {

struct LabeledScores {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;  // nonzero = anomalous
};

/// Ground-truth anomaly mask together with its connected regions.
/// `regions` partition the true-labeled entries; ordering is by smallest
/// member index and members are ascending.
struct RegionMask {
  std::vector<std::uint8_t> truth;
  std::vector<std::vector<std::size_t>> regions;
};

// ---------------------------------------------------------------------------
// AUROC
// ---------------------------------------------------------------------------

/// Mann-Whitney AUROC via rank sums with average ranks for ties. Equals
/// (#concordant + 0.5 * #tied) / (P*N) and the trapezoidal ROC area.
inline double auroc(std::span<const double> scores,
                    std::span<const std::uint8_t> labels) {
  require(scores.size() == labels.size(), ErrorKind::ShapeMismatch,
          "auroc: scores/labels length mismatch");
  std::size_t pos = 0;
  for (std::uint8_t l : labels) pos += l ? 1 : 0;
  const std::size_t neg = labels.size() - pos;
  require(pos > 0 && neg > 0, ErrorKind::UndefinedMetric,
          "auroc: needs both classes present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });

  // Average rank within each tied block, accumulated over positives.
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]]) rank_sum_pos += avg_rank;
    i = j;
  }
  const double u = rank_sum_pos -
                   0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1);
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

inline double auroc(const LabeledScores& data) {
  return auroc(std::span<const double>(data.scores),
               std::span<const std::uint8_t>(data.labels));
}

// ---------------------------------------------------------------------------
// Connected components
// ---------------------------------------------------------------------------

/// Connected components of a row-major grid mask under 8-neighbor
/// connectivity. Regions ordered by smallest member index, members
/// ascending. Empty mask yields an empty list.
inline std::vector<std::vector<std::size_t>> connected_components_grid(
    std::span<const std::uint8_t> mask, int rows, int cols) {
  require(rows >= 0 && cols >= 0, ErrorKind::InvalidArgument,
          "connected_components: negative grid shape");
  require(mask.size() == static_cast<std::size_t>(rows) * cols,
          ErrorKind::ShapeMismatch, "connected_components: mask/shape mismatch");
  std::vector<std::vector<std::size_t>> regions;
  std::vector<std::uint8_t> seen(mask.size(), 0);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || seen[start]) continue;
    std::vector<std::size_t> region;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      region.push_back(cur);
      const int r = static_cast<int>(cur) / cols;
      const int c = static_cast<int>(cur) % cols;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          if (dr == 0 && dc == 0) continue;
          const int nr = r + dr, nc = c + dc;
          if (nr < 0 || nr >= rows || nc < 0 || nc >= cols) continue;
          const std::size_t ni = static_cast<std::size_t>(nr) * cols + nc;
          if (mask[ni] && !seen[ni]) {
            seen[ni] = 1;
            stack.push_back(ni);
          }
        }
    }
    std::sort(region.begin(), region.end());
    regions.push_back(std::move(region));
  }
  return regions;
}

/// Connected components of a point mask: edges are mutual k-NN pairs among
/// the true-labeled points only. A single true point forms its own region.
/// If fewer than k+1 true points exist, k shrinks to allow the search.
inline std::vector<std::vector<std::size_t>> connected_components_points(
    const PointCloud& cloud, std::span<const std::uint8_t> mask, std::size_t k) {
  require(mask.size() == cloud.size(), ErrorKind::ShapeMismatch,
          "connected_components: mask/cloud size mismatch");
  require(k >= 1, ErrorKind::InvalidArgument, "connected_components: k >= 1");

  std::vector<std::size_t> true_ids;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] && cloud.is_valid(i)) true_ids.push_back(i);
  if (true_ids.empty()) return {};
  if (true_ids.size() == 1) return {{true_ids[0]}};

  PointCloud sub;
  sub.points.reserve(true_ids.size());
  for (std::size_t i : true_ids) sub.points.push_back(cloud.points[i]);
  const std::size_t k_eff = std::min(k, true_ids.size() - 1);
  auto nn = knn_search(sub, k_eff);

  // Mutual edges only; union-find over the subset.
  std::vector<std::size_t> parent(true_ids.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };
  for (std::size_t a = 0; a < true_ids.size(); ++a)
    for (std::size_t b : nn[a]) {
      if (b < a) continue;  // handle each pair once
      if (std::find(nn[b].begin(), nn[b].end(), a) != nn[b].end()) {
        const std::size_t ra = find(a), rb = find(b);
        if (ra != rb) parent[std::max(ra, rb)] = std::min(ra, rb);
      }
    }

  std::vector<std::vector<std::size_t>> regions;
  std::vector<int> region_of(true_ids.size(), -1);
  for (std::size_t a = 0; a < true_ids.size(); ++a) {
    const std::size_t r = find(a);
    if (region_of[r] < 0) {
      region_of[r] = static_cast<int>(regions.size());
      regions.emplace_back();
    }
    regions[region_of[r]].push_back(true_ids[a]);
  }
  // true_ids ascending => discovery order is smallest-member order and
  // members are already ascending.
  return regions;
}

// ---------------------------------------------------------------------------
// P-PRO
// ---------------------------------------------------------------------------

namespace detail {

/// Threshold candidates: unique sorted scores, quantile-subsampled to at
/// most n_thresholds (extremes always kept).
inline std::vector<double> threshold_grid(std::span<const double> scores,
                                          int n_thresholds) {
  std::vector<double> uniq(scores.begin(), scores.end());
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  if (n_thresholds <= 0 ||
      uniq.size() <= static_cast<std::size_t>(n_thresholds))
    return uniq;
  std::vector<double> out;
  out.reserve(n_thresholds);
  const std::size_t u = uniq.size();
  for (int j = 0; j < n_thresholds; ++j) {
    const std::size_t idx =
        (static_cast<std::size_t>(j) * (u - 1)) / (n_thresholds - 1);
    out.push_back(uniq[idx]);
  }
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace detail

/// Area under the (FPR, mean per-region overlap) polyline up to
/// `fpr_limit`, normalized by `fpr_limit`. Thresholds sweep the unique
/// scores (quantile-subsampled); predictions are score >= threshold.
/// Points past the limit clamp to FPR = fpr_limit, so a perfect predictor
/// scores 1 at any limit and a constant predictor scores 0.5.
inline double p_pro(std::span<const double> scores, const RegionMask& mask,
                    double fpr_limit = 0.3, int n_thresholds = 200,
                    unsigned threads = 1) {
  require(scores.size() == mask.truth.size(), ErrorKind::ShapeMismatch,
          "p_pro: scores/mask length mismatch");
  require(fpr_limit > 0.0 && fpr_limit <= 1.0, ErrorKind::InvalidArgument,
          "p_pro: fpr_limit must lie in (0,1]");
  require(!mask.regions.empty(), ErrorKind::UndefinedMetric,
          "p_pro: mask has no anomaly regions");

  std::vector<std::size_t> negatives;
  for (std::size_t i = 0; i < mask.truth.size(); ++i)
    if (!mask.truth[i]) negatives.push_back(i);
  require(!negatives.empty(), ErrorKind::UndefinedMetric,
          "p_pro: mask has no negative points");
  for (const auto& region : mask.regions)
    require(!region.empty(), ErrorKind::InvalidArgument,
            "p_pro: empty region");

  const std::vector<double> thresholds =
      detail::threshold_grid(scores, n_thresholds);

  // One (FPR, PRO) point per threshold; descending threshold order gives
  // non-decreasing FPR and PRO. Slots are disjoint per threshold.
  const std::size_t m = thresholds.size();
  std::vector<double> fpr(m), pro(m);
  parallel_for(m, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t ti = begin; ti < end; ++ti) {
      const double t = thresholds[m - 1 - ti];  // descending
      std::size_t fp = 0;
      for (std::size_t i : negatives)
        if (scores[i] >= t) ++fp;
      double overlap_sum = 0.0;
      for (const auto& region : mask.regions) {
        std::size_t hit = 0;
        for (std::size_t i : region)
          if (scores[i] >= t) ++hit;
        overlap_sum += static_cast<double>(hit) / region.size();
      }
      fpr[ti] = static_cast<double>(fp) / negatives.size();
      pro[ti] = overlap_sum / mask.regions.size();
    }
  });

  // Trapezoid over the polyline anchored at (0,0), FPR clamped to the
  // limit; zero-width segments (clamped tails, repeated FPR) drop out.
  double area = 0.0;
  double prev_f = 0.0, prev_p = 0.0;
  for (std::size_t ti = 0; ti < m; ++ti) {
    const double f = std::min(fpr[ti], fpr_limit);
    const double p = pro[ti];
    area += (f - prev_f) * 0.5 * (p + prev_p);
    prev_f = f;
    prev_p = p;
  }
  return area / fpr_limit;
}

}  // namespace votegrid
