// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include <Eigen/Core>

#include "votegrid/core.hpp"
#include "votegrid/error.hpp"
#include "votegrid/parallel.hpp"

namespace votegrid {

// ---------------------------------------------------------------------------
// Graph structure
// ---------------------------------------------------------------------------

/// Symmetrized k-NN graph. neighbors[i] is sorted ascending and holds i
/// itself only when self-loops are enabled; all edge weights are 1.
struct KnnGraph {
  std::size_t n = 0;
  std::vector<std::vector<std::size_t>> neighbors;
  std::vector<double> degree;  // D_ii = row sum of A

  bool has_edge(std::size_t i, std::size_t j) const {
    const auto& row = neighbors[i];
    return std::binary_search(row.begin(), row.end(), j);
  }
};

/// Row-compressed sparse matrix; rows hold strictly ascending columns so
/// products accumulate in a fixed order.
struct SparseRowMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<std::size_t> row_ptr;  // size rows+1
  std::vector<std::size_t> col;
  std::vector<double> val;

  /// Dense right-multiplication: this * h, parallel over output rows.
  FeatureMatrix multiply(const FeatureMatrix& h, int threads = 1) const {
    require(static_cast<std::size_t>(h.rows()) == cols, ErrorKind::ShapeMismatch,
            "sparse multiply: inner dimensions disagree");
    FeatureMatrix out = FeatureMatrix::Zero(static_cast<Eigen::Index>(rows), h.cols());
    parallel_for(rows, static_cast<unsigned>(threads), [&](std::size_t begin, std::size_t end) {
      for (std::size_t r = begin; r < end; ++r)
        for (std::size_t e = row_ptr[r]; e < row_ptr[r + 1]; ++e)
          out.row(static_cast<Eigen::Index>(r)) +=
              val[e] * h.row(static_cast<Eigen::Index>(col[e]));
    });
    return out;
  }

  FeatureMatrix dense() const {
    FeatureMatrix m = FeatureMatrix::Zero(static_cast<Eigen::Index>(rows),
                                          static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t e = row_ptr[r]; e < row_ptr[r + 1]; ++e)
        m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(col[e])) = val[e];
    return m;
  }
};

/// Directed k-NN edges, symmetrized as A = max(A, A^T). Invalid points keep
/// empty rows and are rejected later by normalize_adjacency.
inline KnnGraph build_graph(const PointCloud& cloud, std::size_t k, bool self_loops = false,
                            int threads = 1) {
  const auto nn = knn_search(cloud, k, static_cast<unsigned>(threads));
  KnnGraph g;
  g.n = cloud.size();
  g.neighbors.assign(g.n, {});
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j : nn[i]) {
      g.neighbors[i].push_back(j);
      g.neighbors[j].push_back(i);
    }
  if (self_loops)
    for (std::size_t i = 0; i < g.n; ++i)
      if (cloud.is_valid(i)) g.neighbors[i].push_back(i);
  g.degree.assign(g.n, 0.0);
  for (std::size_t i = 0; i < g.n; ++i) {
    auto& row = g.neighbors[i];
    std::sort(row.begin(), row.end());
    row.erase(std::unique(row.begin(), row.end()), row.end());
    g.degree[i] = static_cast<double>(row.size());
  }
  return g;
}

/// A_hat = D^{-1/2} A D^{-1/2}; entries A_ij / sqrt(D_ii D_jj).
inline SparseRowMatrix normalize_adjacency(const KnnGraph& g) {
  SparseRowMatrix m;
  m.rows = m.cols = g.n;
  m.row_ptr.assign(g.n + 1, 0);
  std::vector<double> inv_sqrt(g.n);
  for (std::size_t i = 0; i < g.n; ++i) {
    require(g.degree[i] > 0.0, ErrorKind::DegenerateInput,
            "normalize_adjacency: isolated node");
    inv_sqrt[i] = 1.0 / std::sqrt(g.degree[i]);
  }
  for (std::size_t i = 0; i < g.n; ++i) {
    m.row_ptr[i + 1] = m.row_ptr[i] + g.neighbors[i].size();
    for (std::size_t j : g.neighbors[i]) {
      m.col.push_back(j);
      m.val.push_back(inv_sqrt[i] * inv_sqrt[j]);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct GraphLayerParams {
  FeatureMatrix weight;  // d_in x d_out
  Eigen::VectorXd bias;  // d_out, used only when has_bias
  bool has_bias = false;

  void check() const {
    require(weight.allFinite(), ErrorKind::InvalidConfig, "graph layer weight must be finite");
    if (has_bias) {
      require(bias.size() == weight.cols(), ErrorKind::ShapeMismatch,
              "graph layer bias length must match output width");
      require(bias.allFinite(), ErrorKind::InvalidConfig, "graph layer bias must be finite");
    }
  }
};

enum class Activation { None, Relu };
enum class ReadoutMode { Mean, Max };

/// H = act(A_hat * H_prev * W [+ b]).
inline FeatureMatrix gconv_forward(const FeatureMatrix& h_prev, const SparseRowMatrix& a_hat,
                                   const GraphLayerParams& params, Activation act,
                                   int threads = 1) {
  params.check();
  require(h_prev.cols() == params.weight.rows(), ErrorKind::ShapeMismatch,
          "gconv_forward: feature width must match weight rows");
  FeatureMatrix h = a_hat.multiply(h_prev, threads) * params.weight;
  if (params.has_bias) h.rowwise() += params.bias.transpose();
  if (act == Activation::Relu) h = h.cwiseMax(0.0);
  return h;
}

/// Column-wise mean or max over nodes.
inline Eigen::VectorXd readout(const FeatureMatrix& h, ReadoutMode mode) {
  require(h.rows() >= 1, ErrorKind::DegenerateInput, "readout: empty graph");
  if (mode == ReadoutMode::Mean) return h.colwise().mean();
  return h.colwise().maxCoeff();
}

struct MlpLayer {
  FeatureMatrix weight;  // d_in x d_out
  Eigen::VectorXd bias;  // d_out
};

/// Feedforward scorer: max(0,.) between layers, linear scalar output.
struct MlpParams {
  std::vector<MlpLayer> layers;

  void check() const {
    require(!layers.empty(), ErrorKind::InvalidConfig, "mlp needs at least one layer");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const MlpLayer& layer = layers[l];
      require(layer.weight.allFinite() && layer.bias.allFinite(), ErrorKind::InvalidConfig,
              "mlp parameters must be finite");
      require(layer.bias.size() == layer.weight.cols(), ErrorKind::ShapeMismatch,
              "mlp bias length must match layer output width");
      if (l + 1 < layers.size())
        require(layer.weight.cols() == layers[l + 1].weight.rows(), ErrorKind::ShapeMismatch,
                "mlp consecutive layer dimensions are incompatible");
    }
    require(layers.back().weight.cols() == 1, ErrorKind::ShapeMismatch,
            "mlp final output dimension must be 1");
  }
};

inline double mlp_score(const Eigen::VectorXd& input, const MlpParams& params) {
  params.check();
  require(input.size() == params.layers.front().weight.rows(), ErrorKind::ShapeMismatch,
          "mlp_score: input dimension mismatch");
  Eigen::VectorXd x = input;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const MlpLayer& layer = params.layers[l];
    Eigen::VectorXd pre = layer.weight.transpose() * x + layer.bias;
    x = (l + 1 < params.layers.size()) ? pre.cwiseMax(0.0).eval() : pre;
  }
  return x(0);
}

/// Row-wise application: one score per input row.
inline Eigen::VectorXd mlp_score_rows(const FeatureMatrix& rows, const MlpParams& params,
                                      int threads = 1) {
  params.check();
  require(rows.cols() == params.layers.front().weight.rows(), ErrorKind::ShapeMismatch,
          "mlp_score_rows: input dimension mismatch");
  Eigen::VectorXd out(rows.rows());
  parallel_for(static_cast<std::size_t>(rows.rows()), static_cast<unsigned>(threads),
               [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r)
      out(static_cast<Eigen::Index>(r)) =
          mlp_score(rows.row(static_cast<Eigen::Index>(r)).transpose(), params);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Full network with exact gradients
// ---------------------------------------------------------------------------

/// Retained intermediates for one forward pass of
/// mlp_score(readout(gconv stack)).
struct GraphNetTrace {
  FeatureMatrix input;                  // H^(0)
  std::vector<FeatureMatrix> mixed;     // A_hat * H^(l-1) per layer
  std::vector<FeatureMatrix> pre;       // mixed * W (+ b) per layer
  std::vector<FeatureMatrix> act;       // relu(pre) per layer
  ReadoutMode mode = ReadoutMode::Mean;
  Eigen::VectorXd z;                    // readout output
  std::vector<Eigen::VectorXd> mlp_in;  // input to each mlp layer
  std::vector<Eigen::VectorXd> mlp_pre; // pre-activation of each mlp layer
  double score = 0.0;
};

/// Forward pass: stacked relu graph convolutions, readout, MLP head.
inline GraphNetTrace graph_net_forward(const FeatureMatrix& h0, const SparseRowMatrix& a_hat,
                                       const std::vector<GraphLayerParams>& layers,
                                       const MlpParams& mlp, ReadoutMode mode,
                                       int threads = 1) {
  require(!layers.empty(), ErrorKind::InvalidConfig, "graph net needs at least one layer");
  mlp.check();
  GraphNetTrace t;
  t.input = h0;
  t.mode = mode;
  FeatureMatrix h = h0;
  for (const GraphLayerParams& layer : layers) {
    layer.check();
    require(h.cols() == layer.weight.rows(), ErrorKind::ShapeMismatch,
            "graph net layer width mismatch");
    FeatureMatrix mixed = a_hat.multiply(h, threads);
    FeatureMatrix pre = mixed * layer.weight;
    if (layer.has_bias) pre.rowwise() += layer.bias.transpose();
    t.mixed.push_back(std::move(mixed));
    t.pre.push_back(pre);
    h = pre.cwiseMax(0.0);
    t.act.push_back(h);
  }
  t.z = readout(h, mode);
  Eigen::VectorXd x = t.z;
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const MlpLayer& layer = mlp.layers[l];
    require(x.size() == layer.weight.rows(), ErrorKind::ShapeMismatch,
            "graph net mlp width mismatch");
    t.mlp_in.push_back(x);
    Eigen::VectorXd pre = layer.weight.transpose() * x + layer.bias;
    t.mlp_pre.push_back(pre);
    x = (l + 1 < mlp.layers.size()) ? pre.cwiseMax(0.0).eval() : pre;
  }
  t.score = x(0);
  return t;
}

struct GraphNetGrads {
  std::vector<FeatureMatrix> layer_w;
  std::vector<Eigen::VectorXd> layer_b;  // zero-length when layer has no bias
  std::vector<FeatureMatrix> mlp_w;
  std::vector<Eigen::VectorXd> mlp_b;
  FeatureMatrix input;  // dS/dH^(0), scaled by upstream
};

namespace detail {

/// Shared reverse pass through the gconv stack, starting from dL/dH^(L).
/// Fills layer_w/layer_b and the input gradient.
inline void gconv_stack_backward(const std::vector<GraphLayerParams>& layers,
                                 const SparseRowMatrix& a_hat,
                                 const std::vector<FeatureMatrix>& mixed,
                                 const std::vector<FeatureMatrix>& pre, FeatureMatrix g_h,
                                 GraphNetGrads& g, int threads) {
  g.layer_w.resize(layers.size());
  g.layer_b.resize(layers.size());
  for (std::size_t l = layers.size(); l-- > 0;) {
    const FeatureMatrix mask = (pre[l].array() > 0.0).cast<double>().matrix();
    const FeatureMatrix g_pre = g_h.cwiseProduct(mask);
    g.layer_w[l] = mixed[l].transpose() * g_pre;
    g.layer_b[l] = layers[l].has_bias ? g_pre.colwise().sum().transpose().eval()
                                      : Eigen::VectorXd();
    // A_hat is symmetric, so A_hat^T (g_pre W^T) = A_hat (g_pre W^T).
    g_h = a_hat.multiply(g_pre * layers[l].weight.transpose(), threads);
  }
  g.input = g_h;
}

}  // namespace detail

/// Exact reverse-mode gradients of upstream * score.
inline GraphNetGrads graph_net_backward(const std::vector<GraphLayerParams>& layers,
                                        const MlpParams& mlp, const SparseRowMatrix& a_hat,
                                        const GraphNetTrace& trace, double upstream = 1.0,
                                        int threads = 1) {
  require(trace.pre.size() == layers.size() && trace.mixed.size() == layers.size() &&
              trace.act.size() == layers.size() && trace.mlp_pre.size() == mlp.layers.size() &&
              trace.mlp_in.size() == mlp.layers.size(),
          ErrorKind::StateError, "graph_net_backward: trace does not match the network");

  GraphNetGrads g;
  g.mlp_w.resize(mlp.layers.size());
  g.mlp_b.resize(mlp.layers.size());

  // MLP head, from the scalar output back to Z.
  Eigen::VectorXd gx(1);
  gx(0) = upstream;
  for (std::size_t l = mlp.layers.size(); l-- > 0;) {
    const MlpLayer& layer = mlp.layers[l];
    Eigen::VectorXd g_pre = gx;
    if (l + 1 < mlp.layers.size())
      g_pre = gx.cwiseProduct(
          (trace.mlp_pre[l].array() > 0.0).cast<double>().matrix());
    g.mlp_w[l] = trace.mlp_in[l] * g_pre.transpose();
    g.mlp_b[l] = g_pre;
    gx = layer.weight * g_pre;
  }

  // Readout.
  const FeatureMatrix& h_top = trace.act.back();
  FeatureMatrix g_h = FeatureMatrix::Zero(h_top.rows(), h_top.cols());
  if (trace.mode == ReadoutMode::Mean) {
    g_h.rowwise() = (gx / static_cast<double>(h_top.rows())).transpose();
  } else {
    for (Eigen::Index c = 0; c < h_top.cols(); ++c) {
      Eigen::Index arg = 0;
      h_top.col(c).maxCoeff(&arg);  // ties resolve to the lowest row
      g_h(arg, c) += gx(c);
    }
  }

  detail::gconv_stack_backward(layers, a_hat, trace.mixed, trace.pre, std::move(g_h), g,
                               threads);
  return g;
}

// ---------------------------------------------------------------------------
// Per-point scoring path (MLP applied row-wise to H^(L))
// ---------------------------------------------------------------------------

/// Retained intermediates for the per-point path: one score per node.
struct PerPointTrace {
  FeatureMatrix input;
  std::vector<FeatureMatrix> mixed;
  std::vector<FeatureMatrix> pre;
  std::vector<FeatureMatrix> act;
  std::vector<FeatureMatrix> mlp_in;   // per mlp layer, rows = nodes
  std::vector<FeatureMatrix> mlp_pre;  // per mlp layer
  Eigen::VectorXd scores;              // one per node
};

inline PerPointTrace graph_net_forward_perpoint(const FeatureMatrix& h0,
                                                const SparseRowMatrix& a_hat,
                                                const std::vector<GraphLayerParams>& layers,
                                                const MlpParams& mlp, int threads = 1) {
  require(!layers.empty(), ErrorKind::InvalidConfig, "graph net needs at least one layer");
  mlp.check();
  PerPointTrace t;
  t.input = h0;
  FeatureMatrix h = h0;
  for (const GraphLayerParams& layer : layers) {
    layer.check();
    require(h.cols() == layer.weight.rows(), ErrorKind::ShapeMismatch,
            "graph net layer width mismatch");
    FeatureMatrix mixed = a_hat.multiply(h, threads);
    FeatureMatrix pre = mixed * layer.weight;
    if (layer.has_bias) pre.rowwise() += layer.bias.transpose();
    t.mixed.push_back(std::move(mixed));
    t.pre.push_back(pre);
    h = pre.cwiseMax(0.0);
    t.act.push_back(h);
  }
  FeatureMatrix x = h;
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const MlpLayer& layer = mlp.layers[l];
    require(x.cols() == layer.weight.rows(), ErrorKind::ShapeMismatch,
            "graph net mlp width mismatch");
    t.mlp_in.push_back(x);
    FeatureMatrix pre = x * layer.weight;
    pre.rowwise() += layer.bias.transpose();
    t.mlp_pre.push_back(pre);
    x = (l + 1 < mlp.layers.size()) ? pre.cwiseMax(0.0).eval() : pre;
  }
  t.scores = x.col(0);
  return t;
}

/// Exact reverse-mode gradients of sum_i upstream_i * score_i.
inline GraphNetGrads graph_net_backward_perpoint(const std::vector<GraphLayerParams>& layers,
                                                 const MlpParams& mlp,
                                                 const SparseRowMatrix& a_hat,
                                                 const PerPointTrace& trace,
                                                 const Eigen::VectorXd& upstream,
                                                 int threads = 1) {
  require(trace.pre.size() == layers.size() && trace.mixed.size() == layers.size() &&
              trace.mlp_pre.size() == mlp.layers.size() &&
              trace.mlp_in.size() == mlp.layers.size(),
          ErrorKind::StateError, "graph_net_backward_perpoint: trace mismatch");
  require(upstream.size() == trace.scores.size(), ErrorKind::ShapeMismatch,
          "graph_net_backward_perpoint: upstream length mismatch");

  GraphNetGrads g;
  g.mlp_w.resize(mlp.layers.size());
  g.mlp_b.resize(mlp.layers.size());
  FeatureMatrix gx = upstream;  // N x 1
  for (std::size_t l = mlp.layers.size(); l-- > 0;) {
    FeatureMatrix g_pre = gx;
    if (l + 1 < mlp.layers.size())
      g_pre = gx.cwiseProduct((trace.mlp_pre[l].array() > 0.0).cast<double>().matrix());
    g.mlp_w[l] = trace.mlp_in[l].transpose() * g_pre;
    g.mlp_b[l] = g_pre.colwise().sum().transpose();
    gx = g_pre * mlp.layers[l].weight.transpose();
  }
  detail::gconv_stack_backward(layers, a_hat, trace.mixed, trace.pre, gx, g, threads);
  return g;
}

}  // namespace votegrid
