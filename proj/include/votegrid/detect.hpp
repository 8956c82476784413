// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "votegrid/core.hpp"
#include "votegrid/error.hpp"
#include "votegrid/parallel.hpp"
#include "votegrid/rng.hpp"

namespace votegrid {

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

/// Row-wise concatenation, 3D block first.
inline FeatureMatrix concat_features(const FeatureMatrix& f3d, const FeatureMatrix& f2d) {
  require(f3d.rows() == f2d.rows(), ErrorKind::ShapeMismatch,
          "concat_features: row counts disagree");
  FeatureMatrix out(f3d.rows(), f3d.cols() + f2d.cols());
  out.leftCols(f3d.cols()) = f3d;
  out.rightCols(f2d.cols()) = f2d;
  return out;
}

// ---------------------------------------------------------------------------
// Memory bank
// ---------------------------------------------------------------------------

/// Nominal feature rows pooled across anomaly-free samples; immutable after
/// build. source[i] names the sample that contributed row i.
struct MemoryBank {
  FeatureMatrix rows;
  std::vector<std::string> source;
};

/// Pools rows across nominal samples in order, then optionally keeps a
/// seeded uniform subsample (without replacement, original order retained).
inline MemoryBank bank_build(const std::vector<FeatureMatrix>& nominal, double subsample = 1.0,
                             std::uint64_t seed = 0, const std::vector<std::string>& ids = {}) {
  require(!nominal.empty(), ErrorKind::EmptyBank, "bank_build: no nominal samples");
  require(subsample > 0.0 && subsample <= 1.0, ErrorKind::InvalidArgument,
          "bank_build: subsample fraction must be in (0, 1]");
  require(ids.empty() || ids.size() == nominal.size(), ErrorKind::InvalidArgument,
          "bank_build: one id per sample");
  const Eigen::Index width = nominal.front().cols();
  Eigen::Index total = 0;
  for (const FeatureMatrix& m : nominal) {
    require(m.cols() == width, ErrorKind::ShapeMismatch,
            "bank_build: samples must share one feature width");
    require(m.allFinite(), ErrorKind::InvalidArgument, "bank_build: features must be finite");
    total += m.rows();
  }
  require(total > 0, ErrorKind::EmptyBank, "bank_build: nominal samples hold no rows");

  std::vector<std::size_t> keep(static_cast<std::size_t>(total));
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = i;
  if (subsample < 1.0) {
    const std::size_t m = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(subsample * static_cast<double>(total))));
    Rng rng(seed);
    for (std::size_t i = 0; i < m; ++i)
      std::swap(keep[i], keep[i + rng.uniform_index(keep.size() - i)]);
    keep.resize(m);
    std::sort(keep.begin(), keep.end());
  }

  MemoryBank bank;
  bank.rows.resize(static_cast<Eigen::Index>(keep.size()), width);
  bank.source.resize(keep.size());
  std::vector<Eigen::Index> sample_begin(nominal.size());
  Eigen::Index acc = 0;
  for (std::size_t s = 0; s < nominal.size(); ++s) {
    sample_begin[s] = acc;
    acc += nominal[s].rows();
  }
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const Eigen::Index flat = static_cast<Eigen::Index>(keep[i]);
    std::size_t s = nominal.size() - 1;
    while (sample_begin[s] > flat) --s;
    bank.rows.row(static_cast<Eigen::Index>(i)) = nominal[s].row(flat - sample_begin[s]);
    bank.source[i] = ids.empty() ? "sample" + std::to_string(s) : ids[s];
  }
  return bank;
}

/// score_i = Euclidean distance from features row i to its nearest bank row.
/// Candidates come from the expanded quadratic form (one GEMM); the returned
/// distance is recomputed exactly over every near-minimal candidate.
inline Eigen::VectorXd bank_score(const FeatureMatrix& features, const MemoryBank& bank,
                                  int threads = 1) {
  require(bank.rows.rows() > 0, ErrorKind::EmptyBank, "bank_score: empty bank");
  require(features.cols() == bank.rows.cols(), ErrorKind::ShapeMismatch,
          "bank_score: feature widths disagree");
  const Eigen::Index n = features.rows();
  Eigen::VectorXd scores(n);
  if (n == 0) return scores;
  const Eigen::VectorXd bank_sq = bank.rows.rowwise().squaredNorm();
  parallel_for(static_cast<std::size_t>(n), static_cast<unsigned>(threads),
               [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const Eigen::Index r = static_cast<Eigen::Index>(i);
      const Eigen::VectorXd q =
          bank_sq - 2.0 * (bank.rows * features.row(r).transpose()) +
          Eigen::VectorXd::Constant(bank.rows.rows(), features.row(r).squaredNorm());
      const double qmin = q.minCoeff();
      const double slack = 1e-6 * std::max(1.0, std::abs(qmin));
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < q.size(); ++j)
        if (q(j) <= qmin + slack)
          best = std::min(best, (features.row(r) - bank.rows.row(j)).norm());
      scores(r) = best;
    }
  });
  return scores;
}

// ---------------------------------------------------------------------------
// Scores and decisions
// ---------------------------------------------------------------------------

/// Min-max rescaling to [0,1]; a constant input maps to all zeros.
inline Eigen::VectorXd normalize_scores(const Eigen::VectorXd& raw) {
  require(raw.size() >= 1, ErrorKind::DegenerateInput, "normalize_scores: empty input");
  require(raw.allFinite(), ErrorKind::InvalidArgument, "normalize_scores: scores must be finite");
  const double lo = raw.minCoeff();
  const double hi = raw.maxCoeff();
  if (!(hi > lo)) return Eigen::VectorXd::Zero(raw.size());
  return (raw.array() - lo) / (hi - lo);
}

/// A = {i : scores_i > tau}, ascending indices. Strict inequality.
inline std::vector<std::size_t> threshold_detect(const Eigen::VectorXd& norm_scores, double tau) {
  require(tau >= 0.0 && tau <= 1.0, ErrorKind::InvalidArgument,
          "threshold_detect: tau must lie in [0, 1]");
  std::vector<std::size_t> anomalies;
  for (Eigen::Index i = 0; i < norm_scores.size(); ++i) {
    const double s = norm_scores(i);
    require(s >= 0.0 && s <= 1.0, ErrorKind::InvalidArgument,
            "threshold_detect: scores must lie in [0, 1]");
    if (s > tau) anomalies.push_back(static_cast<std::size_t>(i));
  }
  return anomalies;
}

/// Sample-level score: maximum raw per-point score.
inline double image_score(const Eigen::VectorXd& raw) {
  require(raw.size() >= 1, ErrorKind::DegenerateInput, "image_score: empty input");
  return raw.maxCoeff();
}

/// Per-sample detection outcome.
struct AnomalyResult {
  Eigen::VectorXd raw_scores;
  Eigen::VectorXd norm_scores;
  double threshold = 0.5;
  std::vector<std::size_t> anomaly_set;
  double image_score = 0.0;
};

inline AnomalyResult make_result(const Eigen::VectorXd& raw, double tau) {
  AnomalyResult r;
  r.raw_scores = raw;
  r.norm_scores = normalize_scores(raw);
  r.threshold = tau;
  r.anomaly_set = threshold_detect(r.norm_scores, tau);
  r.image_score = image_score(raw);
  return r;
}

}  // namespace votegrid
