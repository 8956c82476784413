// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "graph_net.hpp"
#include "rng.hpp"
#include "sparse_conv.hpp"

namespace votegrid {

// ---------------------------------------------------------------------------
// Shared trainer settings
// ---------------------------------------------------------------------------

/// Full-batch gradient descent with a fixed step; no momentum, no
/// schedules. lambda weighs the activation L1 penalty of the voxel net
/// (the graph trainer ignores it; its loss is plain MSE).
struct TrainConfig {
  int iters = 50;
  double step = 0.05;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  double init_scale = 0.0;  // 0 selects 1/sqrt(fan-in) per layer

  void check() const {
    require(iters >= 0, ErrorKind::InvalidConfig, "train: iters must be non-negative");
    require(std::isfinite(step) && step > 0.0, ErrorKind::InvalidConfig,
            "train: step must be positive");
    require(std::isfinite(lambda) && lambda >= 0.0, ErrorKind::InvalidConfig,
            "train: lambda must be non-negative");
    require(std::isfinite(init_scale) && init_scale >= 0.0, ErrorKind::InvalidConfig,
            "train: init_scale must be non-negative");
  }
};

namespace detail {

/// Loss > 1e6 (or non-finite) after an update counts as divergence.
inline void check_diverged(double loss, int iter) {
  if (!(loss <= 1e6))
    fail(ErrorKind::TrainingDiverged,
         "training diverged at iteration " + std::to_string(iter) + " (loss " +
             std::to_string(loss) + ")");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Voxel-net proxy task: occupancy denoising on a spherical shell
// ---------------------------------------------------------------------------

/// Input grid holds a noisy occupancy field (shell cells plus spurious
/// ones); the target keeps only the shell at value 1. The net learns to
/// suppress the spurious cells, and the L1 penalty drives intermediate
/// activations to exact zeros.
struct SparseProxyTask {
  SparseVoxelGrid input;
  SparseVoxelGrid target;
  std::size_t target_cells = 0;
};

inline SparseProxyTask make_sparse_proxy_task(int side, double spurious_fraction,
                                              std::uint64_t seed) {
  require(side >= 8, ErrorKind::InvalidArgument,
          "sparse proxy task: side must be at least 8");
  require(spurious_fraction >= 0.0 && spurious_fraction <= 1.0,
          ErrorKind::InvalidArgument,
          "sparse proxy task: spurious fraction must lie in [0, 1]");
  Rng rng(seed);
  SparseProxyTask task;
  task.input.channels = 1;
  task.target.channels = 1;

  const double c = (side - 1) / 2.0;
  const double r = 0.3 * side;
  std::vector<CellIndex> shell;
  for (int x = 0; x < side; ++x)
    for (int y = 0; y < side; ++y)
      for (int z = 0; z < side; ++z) {
        const double d = std::sqrt((x - c) * (x - c) + (y - c) * (y - c) +
                                   (z - c) * (z - c));
        if (std::abs(d - r) <= 0.5) shell.push_back(CellIndex{x, y, z});
      }
  for (const CellIndex& u : shell) {
    task.input.insert(u)[0] = 0.8 + 0.4 * rng.uniform();
    task.target.insert(u)[0] = 1.0;
  }
  task.target_cells = shell.size();

  const std::size_t n_spurious =
      static_cast<std::size_t>(spurious_fraction * static_cast<double>(shell.size()));
  const std::size_t total = static_cast<std::size_t>(side) * side * side;
  std::size_t placed = 0;
  while (placed < n_spurious) {
    const std::size_t lin = rng.uniform_index(total);
    const CellIndex u{static_cast<int>(lin / (side * side)),
                      static_cast<int>((lin / side) % side),
                      static_cast<int>(lin % side)};
    if (task.input.find(u)) continue;  // occupied: redraw
    task.input.insert(u)[0] = 0.8 + 0.4 * rng.uniform();
    ++placed;
  }
  return task;
}

/// Seeded He-style init: weights normal with scale 1/sqrt(kernel volume
/// times fan-in) unless overridden, biases at a small positive constant
/// so first activations start alive.
inline std::vector<ConvKernel3D> init_sparse_net(const std::vector<int>& channels,
                                                 int ksize, std::uint64_t seed,
                                                 double init_scale = 0.0) {
  require(channels.size() >= 2, ErrorKind::InvalidArgument,
          "init_sparse_net: need at least one layer");
  require(ksize >= 1 && ksize % 2 == 1, ErrorKind::InvalidArgument,
          "init_sparse_net: kernel size must be odd");
  Rng rng(seed);
  std::vector<ConvKernel3D> layers;
  for (std::size_t l = 0; l + 1 < channels.size(); ++l) {
    ConvKernel3D k = ConvKernel3D::zeros(ksize, ksize, ksize, channels[l],
                                         channels[l + 1]);
    const double scale =
        init_scale > 0.0
            ? init_scale
            : 1.0 / std::sqrt(static_cast<double>(ksize) * ksize * ksize *
                              channels[l]);
    for (double& w : k.w) w = scale * rng.normal();
    for (double& b : k.bias) b = 0.05;
    layers.push_back(std::move(k));
  }
  return layers;
}

/// Squared error summed over the union of the final activation's support
/// and the target's. Cells outside both supports contribute zero on both
/// sides and are skipped. Summing (not averaging) keeps the data term on
/// the same per-cell scale as the activation L1 penalty.
inline double sparse_task_data_loss(const SparseVoxelGrid& out,
                                    const SparseProxyTask& task) {
  require(out.channels == 1 && task.target.channels == 1, ErrorKind::ShapeMismatch,
          "sparse task loss: single-channel grids expected");
  require(task.target_cells > 0, ErrorKind::InvalidArgument,
          "sparse task loss: empty target");
  double sum = 0.0;
  for (const CellIndex& u : out.sorted_cells()) {
    const double* t = task.target.find(u);
    const double d = out.find(u)[0] - (t ? t[0] : 0.0);
    sum += d * d;
  }
  for (const CellIndex& u : task.target.sorted_cells()) {
    if (out.find(u)) continue;  // already counted above
    const double d = task.target.find(u)[0];
    sum += d * d;
  }
  return sum;
}

namespace detail {

/// d(data loss)/d(final activation) on the union support. Cells the net
/// never reaches carry no path back, so seeding them is harmless.
inline SparseVoxelGrid sparse_task_upstream(const SparseVoxelGrid& out,
                                            const SparseProxyTask& task) {
  SparseVoxelGrid g;
  g.origin = out.origin;
  g.cell_size = out.cell_size;
  g.channels = 1;
  for (const CellIndex& u : out.sorted_cells()) {
    const double* t = task.target.find(u);
    g.insert(u)[0] = 2.0 * (out.find(u)[0] - (t ? t[0] : 0.0));
  }
  for (const CellIndex& u : task.target.sorted_cells()) {
    if (g.find(u)) continue;
    g.insert(u)[0] = -2.0 * task.target.find(u)[0];
  }
  return g;
}

/// Fraction of materialized pre-activation entries the ReLU zeroes.
/// A layer whose support vanished entirely counts as fully sparse.
inline std::vector<double> zero_fractions(const SparseNetTrace& trace) {
  std::vector<double> out;
  out.reserve(trace.pre.size());
  for (const SparseVoxelGrid& pre : trace.pre) {
    const std::size_t entries = pre.cell_count() * static_cast<std::size_t>(pre.channels);
    if (entries == 0) {
      out.push_back(1.0);
      continue;
    }
    std::size_t zeros = 0;
    for (const CellIndex& u : pre.sorted_cells()) {
      const double* f = pre.find(u);
      for (int ch = 0; ch < pre.channels; ++ch)
        if (!(f[ch] > 0.0)) ++zeros;
    }
    out.push_back(static_cast<double>(zeros) / static_cast<double>(entries));
  }
  return out;
}

}  // namespace detail

struct SparseTrainResult {
  std::vector<ConvKernel3D> layers;
  std::vector<double> loss_trace;        // entry i: loss after i updates
  std::vector<double> data_trace;        // same indexing, penalty excluded
  std::vector<double> final_zero_fraction;  // per layer, from the last forward
  double mean_intermediate_zero_fraction = 0.0;
};

/// Minimizes data loss + lambda * sum of activation L1 terms by fixed-step
/// gradient descent. The loss trace holds iters + 1 entries; divergence is
/// checked after every update, never on the initial evaluation, so zero
/// iterations always returns the seeded init untouched.
inline SparseTrainResult train_sparse_proxy(std::vector<ConvKernel3D> init,
                                            const SparseProxyTask& task,
                                            const TrainConfig& cfg,
                                            unsigned threads = 1) {
  cfg.check();
  require(!init.empty(), ErrorKind::InvalidArgument,
          "train_sparse_proxy: empty layer stack");
  SparseTrainResult res;
  res.layers = std::move(init);

  SparseNetTrace trace =
      sparse_net_forward(task.input, res.layers, cfg.lambda, threads);
  double data = sparse_task_data_loss(trace.act.back(), task);
  res.loss_trace.push_back(data + trace.penalty);
  res.data_trace.push_back(data);

  for (int it = 0; it < cfg.iters; ++it) {
    const SparseVoxelGrid upstream = detail::sparse_task_upstream(trace.act.back(), task);
    const SparseNetGrads g = sparse_net_backward(res.layers, trace, upstream, threads);
    for (std::size_t l = 0; l < res.layers.size(); ++l) {
      ConvKernel3D& k = res.layers[l];
      for (std::size_t i = 0; i < k.w.size(); ++i) k.w[i] -= cfg.step * g.w[l][i];
      for (std::size_t i = 0; i < k.bias.size(); ++i)
        k.bias[i] -= cfg.step * g.bias[l][i];
    }
    trace = sparse_net_forward(task.input, res.layers, cfg.lambda, threads);
    data = sparse_task_data_loss(trace.act.back(), task);
    const double loss = data + trace.penalty;
    res.loss_trace.push_back(loss);
    res.data_trace.push_back(data);
    detail::check_diverged(loss, it + 1);
  }

  res.final_zero_fraction = detail::zero_fractions(trace);
  if (res.final_zero_fraction.size() > 1) {
    double sum = 0.0;
    for (std::size_t l = 0; l + 1 < res.final_zero_fraction.size(); ++l)
      sum += res.final_zero_fraction[l];
    res.mean_intermediate_zero_fraction =
        sum / static_cast<double>(res.final_zero_fraction.size() - 1);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Graph scorer: per-point regression over k-NN graphs
// ---------------------------------------------------------------------------

struct GraphScorerParams {
  std::vector<GraphLayerParams> layers;
  MlpParams mlp;

  void check() const {
    require(!layers.empty(), ErrorKind::InvalidConfig, "graph scorer: no gconv layers");
    for (const GraphLayerParams& l : layers) l.check();
    mlp.check();
    require(mlp.layers.front().weight.rows() == layers.back().weight.cols(),
            ErrorKind::ShapeMismatch,
            "graph scorer: mlp input width does not match the last gconv layer");
  }
};

/// Stack of n_layers gconv layers (d_in -> hidden -> ... -> hidden, all
/// biased) followed by a two-layer MLP head ending in one output.
inline GraphScorerParams init_graph_scorer(int d_in, int hidden, int n_layers,
                                           std::uint64_t seed,
                                           double init_scale = 0.0) {
  require(d_in >= 1 && hidden >= 1 && n_layers >= 1, ErrorKind::InvalidConfig,
          "init_graph_scorer: dimensions must be positive");
  Rng rng(seed);
  const auto matrix = [&](int r, int c) {
    const double scale = init_scale > 0.0 ? init_scale : 1.0 / std::sqrt(r);
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
  };
  GraphScorerParams p;
  for (int l = 0; l < n_layers; ++l) {
    GraphLayerParams layer;
    layer.weight = matrix(l == 0 ? d_in : hidden, hidden);
    layer.bias = Eigen::VectorXd::Constant(hidden, 0.05);
    layer.has_bias = true;
    p.layers.push_back(std::move(layer));
  }
  MlpLayer m1{matrix(hidden, hidden), Eigen::VectorXd::Constant(hidden, 0.05)};
  MlpLayer m2{matrix(hidden, 1), Eigen::VectorXd::Zero(1)};
  p.mlp.layers = {std::move(m1), std::move(m2)};
  return p;
}

/// One training instance: features with a fixed graph and per-point
/// regression targets (0 nominal, 1 anomalous).
struct GraphTrainInstance {
  FeatureMatrix features;
  SparseRowMatrix a_hat;
  Eigen::VectorXd targets;
};

struct GraphTrainResult {
  GraphScorerParams params;
  std::vector<double> loss_trace;  // entry i: loss after i updates
};

/// Mean squared per-point error summed over instances, fixed-step GD.
inline GraphTrainResult train_graph_scorer(GraphScorerParams init,
                                           const std::vector<GraphTrainInstance>& data,
                                           const TrainConfig& cfg,
                                           unsigned threads = 1) {
  cfg.check();
  init.check();
  require(!data.empty(), ErrorKind::InvalidArgument,
          "train_graph_scorer: no training instances");
  std::size_t total_points = 0;
  for (const GraphTrainInstance& inst : data) {
    require(inst.features.rows() == inst.targets.size(), ErrorKind::ShapeMismatch,
            "train_graph_scorer: targets do not match the feature rows");
    total_points += static_cast<std::size_t>(inst.features.rows());
  }
  require(total_points > 0, ErrorKind::InvalidArgument,
          "train_graph_scorer: instances are empty");
  const double inv = 1.0 / static_cast<double>(total_points);

  GraphTrainResult res;
  res.params = std::move(init);

  const auto evaluate = [&](bool with_grads, GraphNetGrads* acc) {
    double loss = 0.0;
    for (const GraphTrainInstance& inst : data) {
      const PerPointTrace t = graph_net_forward_perpoint(
          inst.features, inst.a_hat, res.params.layers, res.params.mlp, threads);
      const Eigen::VectorXd err = t.scores - inst.targets;
      loss += err.squaredNorm() * inv;
      if (!with_grads) continue;
      const GraphNetGrads g = graph_net_backward_perpoint(
          res.params.layers, res.params.mlp, inst.a_hat, t, 2.0 * inv * err, threads);
      if (acc->layer_w.empty()) {
        *acc = g;
        continue;
      }
      for (std::size_t l = 0; l < g.layer_w.size(); ++l) {
        acc->layer_w[l] += g.layer_w[l];
        if (g.layer_b[l].size()) acc->layer_b[l] += g.layer_b[l];
      }
      for (std::size_t l = 0; l < g.mlp_w.size(); ++l) {
        acc->mlp_w[l] += g.mlp_w[l];
        acc->mlp_b[l] += g.mlp_b[l];
      }
    }
    return loss;
  };

  res.loss_trace.push_back(evaluate(false, nullptr));
  for (int it = 0; it < cfg.iters; ++it) {
    GraphNetGrads acc;
    evaluate(true, &acc);
    for (std::size_t l = 0; l < res.params.layers.size(); ++l) {
      res.params.layers[l].weight -= cfg.step * acc.layer_w[l];
      if (res.params.layers[l].has_bias)
        res.params.layers[l].bias -= cfg.step * acc.layer_b[l];
    }
    for (std::size_t l = 0; l < res.params.mlp.layers.size(); ++l) {
      res.params.mlp.layers[l].weight -= cfg.step * acc.mlp_w[l];
      res.params.mlp.layers[l].bias -= cfg.step * acc.mlp_b[l];
    }
    const double loss = evaluate(false, nullptr);
    res.loss_trace.push_back(loss);
    detail::check_diverged(loss, it + 1);
  }
  return res;
}

/// One-class proxy targets: a seeded subset of nominal rows is pushed a
/// fixed multiple of the mean row norm in a random direction and labeled
/// 1; untouched rows are labeled 0.
struct PseudoAnomaly {
  FeatureMatrix features;
  Eigen::VectorXd targets;
};

inline PseudoAnomaly make_pseudo_anomalies(const FeatureMatrix& nominal,
                                           double fraction, double magnitude,
                                           Rng& rng) {
  require(nominal.rows() > 0, ErrorKind::InvalidArgument,
          "make_pseudo_anomalies: empty feature matrix");
  require(fraction > 0.0 && fraction <= 1.0, ErrorKind::InvalidArgument,
          "make_pseudo_anomalies: fraction must lie in (0, 1]");
  require(std::isfinite(magnitude) && magnitude > 0.0, ErrorKind::InvalidArgument,
          "make_pseudo_anomalies: magnitude must be positive");
  const std::size_t n = static_cast<std::size_t>(nominal.rows());
  const std::size_t m = std::max<std::size_t>(
      1, static_cast<std::size_t>(fraction * static_cast<double>(n)));

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = 0; i < m; ++i)
    std::swap(order[i], order[i + rng.uniform_index(n - i)]);

  double mean_norm = 0.0;
  for (Eigen::Index i = 0; i < nominal.rows(); ++i) mean_norm += nominal.row(i).norm();
  mean_norm /= static_cast<double>(n);
  if (!(mean_norm > 0.0)) mean_norm = 1.0;

  PseudoAnomaly out;
  out.features = nominal;
  out.targets = Eigen::VectorXd::Zero(nominal.rows());
  for (std::size_t i = 0; i < m; ++i) {
    Eigen::VectorXd dir(nominal.cols());
    for (Eigen::Index j = 0; j < dir.size(); ++j) dir(j) = rng.normal();
    const double norm = dir.norm();
    if (norm > 0.0) dir /= norm;
    out.features.row(order[i]) += magnitude * mean_norm * dir.transpose();
    out.targets(static_cast<Eigen::Index>(order[i])) = 1.0;
  }
  return out;
}

}  // namespace votegrid
