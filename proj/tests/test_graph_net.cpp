// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "votegrid/graph_net.hpp"
#include "votegrid/rng.hpp"

namespace vg = votegrid;

namespace {

vg::PointCloud random_cloud(std::size_t n, std::uint64_t seed) {
  vg::Rng rng(seed);
  std::vector<vg::Vec3> pts;
  pts.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    pts.push_back({rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)});
  return vg::make_cloud(pts);
}

// Dense oracle: directed brute-force k-NN rows, then max(A, A^T).
Eigen::MatrixXd dense_knn_adjacency(const vg::PointCloud& cloud, std::size_t k,
                                    bool self_loops) {
  const std::size_t n = cloud.size();
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n),
                                            static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      cand.push_back({(cloud.points[j] - cloud.points[i]).squaredNorm(), j});
    }
    std::sort(cand.begin(), cand.end());
    for (std::size_t c = 0; c < k; ++c)
      a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(cand[c].second)) = 1.0;
  }
  a = a.cwiseMax(a.transpose().eval());
  if (self_loops) a.diagonal().setOnes();
  return a;
}

Eigen::MatrixXd dense_adjacency(const vg::KnnGraph& g) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(g.n),
                                            static_cast<Eigen::Index>(g.n));
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j : g.neighbors[i])
      a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 1.0;
  return a;
}

vg::KnnGraph cycle_graph(std::size_t n) {
  vg::KnnGraph g;
  g.n = n;
  g.neighbors.assign(n, {});
  for (std::size_t i = 0; i < n; ++i) {
    g.neighbors[i].push_back((i + n - 1) % n);
    g.neighbors[i].push_back((i + 1) % n);
    std::sort(g.neighbors[i].begin(), g.neighbors[i].end());
  }
  g.degree.assign(n, 2.0);
  return g;
}

std::vector<vg::GraphLayerParams> random_layers(const std::vector<int>& widths,
                                                vg::Rng& rng, bool first_bias) {
  std::vector<vg::GraphLayerParams> layers;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    vg::GraphLayerParams p;
    p.weight.resize(widths[l], widths[l + 1]);
    for (Eigen::Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = rng.normal();
    if (l == 0 && first_bias) {
      p.has_bias = true;
      p.bias.resize(widths[l + 1]);
      for (Eigen::Index i = 0; i < p.bias.size(); ++i) p.bias(i) = 0.3 * rng.normal();
    }
    layers.push_back(std::move(p));
  }
  return layers;
}

vg::MlpParams random_mlp(const std::vector<int>& widths, vg::Rng& rng) {
  vg::MlpParams mlp;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    vg::MlpLayer layer;
    layer.weight.resize(widths[l], widths[l + 1]);
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = rng.normal();
    layer.bias.resize(widths[l + 1]);
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = 0.3 * rng.normal();
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

}  // namespace

TEST_CASE("build_graph symmetrizes forced neighbors on a line") {
  const vg::PointCloud cloud =
      vg::make_cloud({{0.0, 0.0, 0.0}, {1.0, 0.0, 0.0}, {3.0, 0.0, 0.0}});
  const vg::KnnGraph g = vg::build_graph(cloud, 1);
  REQUIRE(g.n == 3);
  CHECK(g.neighbors[0] == std::vector<std::size_t>{1});
  CHECK(g.neighbors[1] == (std::vector<std::size_t>{0, 2}));
  CHECK(g.neighbors[2] == std::vector<std::size_t>{1});
  CHECK(g.degree == (std::vector<double>{1.0, 2.0, 1.0}));
}

TEST_CASE("build_graph with k = N-1 yields the complete graph") {
  const vg::PointCloud cloud = random_cloud(6, 21);
  const vg::KnnGraph g = vg::build_graph(cloud, 5);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(g.degree[i] == 5.0);
    CHECK_FALSE(g.has_edge(i, i));
    for (std::size_t j = 0; j < 6; ++j)
      if (j != i) CHECK(g.has_edge(i, j));
  }
}

TEST_CASE("build_graph matches the dense symmetrization oracle") {
  for (std::uint64_t seed : {4u, 5u, 6u}) {
    const vg::PointCloud cloud = random_cloud(30, seed);
    for (bool loops : {false, true}) {
      const vg::KnnGraph g = vg::build_graph(cloud, 4, loops);
      const Eigen::MatrixXd want = dense_knn_adjacency(cloud, 4, loops);
      const Eigen::MatrixXd got = dense_adjacency(g);
      CHECK((got - want).cwiseAbs().maxCoeff() == 0.0);
      for (std::size_t i = 0; i < g.n; ++i)
        CHECK(g.degree[i] == want.row(static_cast<Eigen::Index>(i)).sum());
    }
  }
}

TEST_CASE("build_graph propagates insufficient points") {
  const vg::PointCloud cloud = random_cloud(4, 1);
  try {
    vg::build_graph(cloud, 4);
    FAIL("expected rejection");
  } catch (const vg::Error& e) {
    CHECK(e.kind() == vg::ErrorKind::InsufficientPoints);
  }
}

TEST_CASE("normalize_adjacency on a 2-node mutual edge is the exchange matrix") {
  const vg::PointCloud cloud = vg::make_cloud({{0.0, 0.0, 0.0}, {1.0, 0.0, 0.0}});
  const vg::SparseRowMatrix a = vg::normalize_adjacency(vg::build_graph(cloud, 1));
  Eigen::MatrixXd want(2, 2);
  want << 0, 1, 1, 0;
  CHECK((a.dense() - want).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("normalized adjacency of a regular cycle preserves the ones vector") {
  const vg::SparseRowMatrix a = vg::normalize_adjacency(cycle_graph(4));
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(4);
  CHECK(((a.dense() * ones) - ones).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("normalize_adjacency matches the dense formula and is exactly symmetric") {
  const vg::PointCloud cloud = random_cloud(25, 9);
  const vg::KnnGraph g = vg::build_graph(cloud, 3);
  const vg::SparseRowMatrix a_hat = vg::normalize_adjacency(g);
  const Eigen::MatrixXd a = dense_adjacency(g);
  Eigen::VectorXd d = a.rowwise().sum();
  const Eigen::MatrixXd dinv = d.cwiseInverse().cwiseSqrt().asDiagonal();
  const Eigen::MatrixXd want = dinv * a * dinv;
  const Eigen::MatrixXd got = a_hat.dense();
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((got - got.transpose().eval()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("normalize_adjacency rejects isolated nodes") {
  vg::KnnGraph g;
  g.n = 2;
  g.neighbors = {{}, {}};
  g.degree = {0.0, 0.0};
  try {
    vg::normalize_adjacency(g);
    FAIL("expected rejection");
  } catch (const vg::Error& e) {
    CHECK(e.kind() == vg::ErrorKind::DegenerateInput);
  }
}

TEST_CASE("eigenvalues of the self-loop normalized adjacency lie in [-1, 1]") {
  for (std::uint64_t seed : {31u, 32u}) {
    const vg::PointCloud cloud = random_cloud(100, seed);
    const vg::SparseRowMatrix a_hat =
        vg::normalize_adjacency(vg::build_graph(cloud, 5, /*self_loops=*/true));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a_hat.dense());
    REQUIRE(es.info() == Eigen::Success);
    CHECK(es.eigenvalues().minCoeff() >= -1.0 - 1e-9);
    CHECK(es.eigenvalues().maxCoeff() <= 1.0 + 1e-9);
  }
}

TEST_CASE("gconv_forward worked examples") {
  const vg::PointCloud cloud = vg::make_cloud({{0.0, 0.0, 0.0}, {1.0, 0.0, 0.0}});
  const vg::SparseRowMatrix a_hat = vg::normalize_adjacency(vg::build_graph(cloud, 1));
  vg::FeatureMatrix h(2, 1);
  h << 1.0, 3.0;

  SECTION("identity weight exchanges neighbor features") {
    vg::GraphLayerParams p;
    p.weight = vg::FeatureMatrix::Identity(1, 1);
    const vg::FeatureMatrix out = vg::gconv_forward(h, a_hat, p, vg::Activation::None);
    CHECK(out(0, 0) == Catch::Approx(3.0));
    CHECK(out(1, 0) == Catch::Approx(1.0));
  }
  SECTION("zero weight gives the zero matrix") {
    vg::GraphLayerParams p;
    p.weight = vg::FeatureMatrix::Zero(1, 4);
    const vg::FeatureMatrix out = vg::gconv_forward(h, a_hat, p, vg::Activation::Relu);
    CHECK(out.cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("shape mismatch is rejected") {
    vg::GraphLayerParams p;
    p.weight = vg::FeatureMatrix::Identity(2, 2);
    CHECK_THROWS_AS(vg::gconv_forward(h, a_hat, p, vg::Activation::None), vg::Error);
  }
}

TEST_CASE("gconv_forward matches the dense triple-product oracle") {
  vg::Rng rng(77);
  const vg::PointCloud cloud = random_cloud(20, 42);
  const vg::SparseRowMatrix a_hat = vg::normalize_adjacency(vg::build_graph(cloud, 3));
  vg::FeatureMatrix h(20, 5);
  for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = rng.normal();
  vg::GraphLayerParams p;
  p.weight.resize(5, 7);
  for (Eigen::Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = rng.normal();
  p.has_bias = true;
  p.bias.resize(7);
  for (Eigen::Index i = 0; i < 7; ++i) p.bias(i) = rng.normal();

  vg::FeatureMatrix want = a_hat.dense() * h * p.weight;
  want.rowwise() += p.bias.transpose();
  const vg::FeatureMatrix got = vg::gconv_forward(h, a_hat, p, vg::Activation::None);
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-10);

  const vg::FeatureMatrix got_relu = vg::gconv_forward(h, a_hat, p, vg::Activation::Relu);
  CHECK((got_relu - want.cwiseMax(0.0)).cwiseAbs().maxCoeff() < 1e-10);

  SECTION("thread count does not change the result") {
    const vg::FeatureMatrix got4 = vg::gconv_forward(h, a_hat, p, vg::Activation::None, 4);
    CHECK((got4 - got).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("gconv_forward is permutation equivariant") {
  const std::size_t n = 24;
  const vg::PointCloud cloud = random_cloud(n, 55);
  vg::Rng rng(56);
  vg::FeatureMatrix h(static_cast<Eigen::Index>(n), 4);
  for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = rng.normal();
  vg::GraphLayerParams p;
  p.weight.resize(4, 3);
  for (Eigen::Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = rng.normal();

  // src[i] names the original node placed at slot i of the permuted cloud.
  std::vector<std::size_t> src(n);
  for (std::size_t i = 0; i < n; ++i) src[i] = i;
  for (std::size_t i = n; i > 1; --i)
    std::swap(src[i - 1], src[rng.uniform_index(i)]);
  std::vector<vg::Vec3> pts(n);
  vg::FeatureMatrix hp(static_cast<Eigen::Index>(n), 4);
  for (std::size_t i = 0; i < n; ++i) {
    pts[i] = cloud.points[src[i]];
    hp.row(static_cast<Eigen::Index>(i)) = h.row(static_cast<Eigen::Index>(src[i]));
  }
  const vg::PointCloud permuted = vg::make_cloud(pts);

  const vg::SparseRowMatrix a1 = vg::normalize_adjacency(vg::build_graph(cloud, 4));
  const vg::SparseRowMatrix a2 = vg::normalize_adjacency(vg::build_graph(permuted, 4));
  const vg::FeatureMatrix o1 = vg::gconv_forward(h, a1, p, vg::Activation::Relu);
  const vg::FeatureMatrix o2 = vg::gconv_forward(hp, a2, p, vg::Activation::Relu);
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    worst = std::max(worst, (o2.row(static_cast<Eigen::Index>(i)) -
                             o1.row(static_cast<Eigen::Index>(src[i])))
                                .cwiseAbs()
                                .maxCoeff());
  CHECK(worst < 1e-12);
  CHECK((vg::readout(o1, vg::ReadoutMode::Mean) - vg::readout(o2, vg::ReadoutMode::Mean))
            .cwiseAbs()
            .maxCoeff() < 1e-12);
}

TEST_CASE("readout reduces columns") {
  vg::FeatureMatrix h(2, 2);
  h << 1, 2, 3, 4;
  const Eigen::VectorXd mean = vg::readout(h, vg::ReadoutMode::Mean);
  CHECK(mean(0) == Catch::Approx(2.0));
  CHECK(mean(1) == Catch::Approx(3.0));

  vg::FeatureMatrix single(1, 3);
  single << -1, 0.5, 2;
  CHECK((vg::readout(single, vg::ReadoutMode::Mean) - single.transpose()).cwiseAbs().maxCoeff() ==
        0.0);
  CHECK((vg::readout(single, vg::ReadoutMode::Max) - single.transpose()).cwiseAbs().maxCoeff() ==
        0.0);

  vg::Rng rng(3);
  vg::FeatureMatrix r(9, 4);
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = rng.normal();
  const Eigen::VectorXd got_mean = vg::readout(r, vg::ReadoutMode::Mean);
  const Eigen::VectorXd got_max = vg::readout(r, vg::ReadoutMode::Max);
  for (Eigen::Index c = 0; c < 4; ++c) {
    double s = 0.0, mx = r(0, c);
    for (Eigen::Index i = 0; i < 9; ++i) {
      s += r(i, c);
      mx = std::max(mx, r(i, c));
    }
    CHECK(got_mean(c) == Catch::Approx(s / 9.0).margin(1e-12));
    CHECK(got_max(c) == mx);
  }

  CHECK_THROWS_AS(vg::readout(vg::FeatureMatrix(0, 3), vg::ReadoutMode::Mean), vg::Error);
}

TEST_CASE("mlp_score worked examples") {
  SECTION("single linear layer") {
    vg::MlpParams mlp;
    vg::MlpLayer layer;
    layer.weight.resize(2, 1);
    layer.weight << 1.0, 1.0;
    layer.bias = Eigen::VectorXd::Zero(1);
    mlp.layers.push_back(layer);
    Eigen::VectorXd x(2);
    x << 2.0, 3.0;
    CHECK(vg::mlp_score(x, mlp) == Catch::Approx(5.0));
  }
  SECTION("zero weights pass the bias through") {
    vg::MlpParams mlp;
    vg::MlpLayer l0;
    l0.weight = vg::FeatureMatrix::Zero(3, 2);
    l0.bias = Eigen::VectorXd::Zero(2);
    vg::MlpLayer l1;
    l1.weight = vg::FeatureMatrix::Zero(2, 1);
    l1.bias = Eigen::VectorXd::Constant(1, 0.7);
    mlp.layers = {l0, l1};
    vg::Rng rng(8);
    for (int t = 0; t < 5; ++t) {
      Eigen::VectorXd x(3);
      for (int i = 0; i < 3; ++i) x(i) = rng.normal();
      CHECK(vg::mlp_score(x, mlp) == Catch::Approx(0.7));
    }
  }
  SECTION("row-wise scoring equals per-row scoring") {
    vg::Rng rng(12);
    const vg::MlpParams mlp = random_mlp({4, 3, 1}, rng);
    vg::FeatureMatrix rows(6, 4);
    for (Eigen::Index i = 0; i < rows.size(); ++i) rows.data()[i] = rng.normal();
    const Eigen::VectorXd scores = vg::mlp_score_rows(rows, mlp);
    for (Eigen::Index r = 0; r < 6; ++r)
      CHECK(scores(r) == vg::mlp_score(rows.row(r).transpose(), mlp));
  }
  SECTION("dimension mismatches are rejected") {
    vg::Rng rng(13);
    vg::MlpParams mlp = random_mlp({4, 3, 1}, rng);
    CHECK_THROWS_AS(vg::mlp_score(Eigen::VectorXd::Zero(5), mlp), vg::Error);
    vg::MlpParams wide = random_mlp({4, 3, 2}, rng);  // final dim must be 1
    CHECK_THROWS_AS(vg::mlp_score(Eigen::VectorXd::Zero(4), wide), vg::Error);
  }
}

TEST_CASE("graph_net_backward hand example on a 2-node graph") {
  const vg::PointCloud cloud = vg::make_cloud({{0.0, 0.0, 0.0}, {1.0, 0.0, 0.0}});
  const vg::SparseRowMatrix a_hat = vg::normalize_adjacency(vg::build_graph(cloud, 1));
  vg::FeatureMatrix h0(2, 1);
  h0 << 1.0, 3.0;
  std::vector<vg::GraphLayerParams> layers(1);
  layers[0].weight = vg::FeatureMatrix::Constant(1, 1, 0.5);
  vg::MlpParams mlp;
  vg::MlpLayer head;
  head.weight = vg::FeatureMatrix::Constant(1, 1, 3.0);
  head.bias = Eigen::VectorXd::Constant(1, 0.25);
  mlp.layers.push_back(head);

  // act = relu([3w, w]) with w = 0.5, Z = 2w, S = 2wm + b = 3.25;
  // dS/dw = 2m = 6, dS/dm = 2w = 1, dS/db = 1.
  const vg::GraphNetTrace t = vg::graph_net_forward(h0, a_hat, layers, mlp, vg::ReadoutMode::Mean);
  CHECK(t.score == Catch::Approx(3.25));
  const vg::GraphNetGrads g = vg::graph_net_backward(layers, mlp, a_hat, t);
  CHECK(g.layer_w[0](0, 0) == Catch::Approx(6.0));
  CHECK(g.mlp_w[0](0, 0) == Catch::Approx(1.0));
  CHECK(g.mlp_b[0](0) == Catch::Approx(1.0));

  SECTION("zero upstream zeroes every gradient") {
    const vg::GraphNetGrads z = vg::graph_net_backward(layers, mlp, a_hat, t, 0.0);
    CHECK(z.layer_w[0].cwiseAbs().maxCoeff() == 0.0);
    CHECK(z.mlp_w[0].cwiseAbs().maxCoeff() == 0.0);
    CHECK(z.mlp_b[0].cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("upstream scales gradients linearly") {
    const vg::GraphNetGrads s = vg::graph_net_backward(layers, mlp, a_hat, t, -2.0);
    CHECK(s.layer_w[0](0, 0) == Catch::Approx(-12.0));
  }
  SECTION("mismatched trace is rejected") {
    std::vector<vg::GraphLayerParams> two(2, layers[0]);
    try {
      vg::graph_net_backward(two, mlp, a_hat, t);
      FAIL("expected rejection");
    } catch (const vg::Error& e) {
      CHECK(e.kind() == vg::ErrorKind::StateError);
    }
  }
}

TEST_CASE("graph_net gradients match central finite differences") {
  const double fd_h = 1e-4;
  int accepted = 0;
  int checked_params = 0;
  for (std::uint64_t seed = 0; seed < 100 && accepted < 3; ++seed) {
    const vg::PointCloud cloud = random_cloud(12, 900 + seed);
    const vg::SparseRowMatrix a_hat = vg::normalize_adjacency(vg::build_graph(cloud, 3));
    vg::Rng rng(700 + seed);
    vg::FeatureMatrix h0(12, 3);
    for (Eigen::Index i = 0; i < h0.size(); ++i) h0.data()[i] = rng.normal();
    std::vector<vg::GraphLayerParams> layers = random_layers({3, 4, 3}, rng, /*first_bias=*/true);
    vg::MlpParams mlp = random_mlp({3, 4, 1}, rng);

    const auto forward = [&]() {
      return vg::graph_net_forward(h0, a_hat, layers, mlp, vg::ReadoutMode::Mean);
    };
    const vg::GraphNetTrace t = forward();
    // Keep finite differences away from relu kinks.
    double min_pre = 1e9;
    for (const vg::FeatureMatrix& p : t.pre) min_pre = std::min(min_pre, p.cwiseAbs().minCoeff());
    for (std::size_t l = 0; l + 1 < mlp.layers.size(); ++l)
      min_pre = std::min(min_pre, t.mlp_pre[l].cwiseAbs().minCoeff());
    if (min_pre < 5e-3) continue;
    ++accepted;

    const vg::GraphNetGrads g = vg::graph_net_backward(layers, mlp, a_hat, t);
    std::vector<std::pair<double*, double>> params;  // (slot, analytic)
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (Eigen::Index i = 0; i < layers[l].weight.size(); ++i)
        params.push_back({layers[l].weight.data() + i, g.layer_w[l].data()[i]});
      if (layers[l].has_bias)
        for (Eigen::Index i = 0; i < layers[l].bias.size(); ++i)
          params.push_back({layers[l].bias.data() + i, g.layer_b[l](i)});
    }
    for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
      for (Eigen::Index i = 0; i < mlp.layers[l].weight.size(); ++i)
        params.push_back({mlp.layers[l].weight.data() + i, g.mlp_w[l].data()[i]});
      for (Eigen::Index i = 0; i < mlp.layers[l].bias.size(); ++i)
        params.push_back({mlp.layers[l].bias.data() + i, g.mlp_b[l](i)});
    }
    for (auto& [slot, analytic] : params) {
      const double saved = *slot;
      *slot = saved + fd_h;
      const double up = forward().score;
      *slot = saved - fd_h;
      const double down = forward().score;
      *slot = saved;
      const double fd = (up - down) / (2.0 * fd_h);
      if (std::abs(fd) < 1e-7 && std::abs(analytic) < 1e-7) continue;
      const double rel = std::abs(fd - analytic) / std::max(std::abs(fd), std::abs(analytic));
      CHECK(rel < 1e-4);
      ++checked_params;
    }
  }
  REQUIRE(accepted == 3);
  CHECK(checked_params > 60);
}

TEST_CASE("per-point scores equal row-wise mlp over the gconv stack") {
  const vg::PointCloud cloud = random_cloud(15, 61);
  const vg::SparseRowMatrix a_hat = vg::normalize_adjacency(vg::build_graph(cloud, 3));
  vg::Rng rng(62);
  vg::FeatureMatrix h0(15, 3);
  for (Eigen::Index i = 0; i < h0.size(); ++i) h0.data()[i] = rng.normal();
  std::vector<vg::GraphLayerParams> layers = random_layers({3, 4}, rng, false);
  vg::MlpParams mlp = random_mlp({4, 3, 1}, rng);

  const vg::PerPointTrace t = vg::graph_net_forward_perpoint(h0, a_hat, layers, mlp);
  const vg::FeatureMatrix h = vg::gconv_forward(h0, a_hat, layers[0], vg::Activation::Relu);
  const Eigen::VectorXd want = vg::mlp_score_rows(h, mlp);
  CHECK((t.scores - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("per-point gradients match central finite differences") {
  const double fd_h = 1e-4;
  int accepted = 0;
  for (std::uint64_t seed = 0; seed < 100 && accepted < 2; ++seed) {
    const vg::PointCloud cloud = random_cloud(10, 500 + seed);
    const vg::SparseRowMatrix a_hat = vg::normalize_adjacency(vg::build_graph(cloud, 3));
    vg::Rng rng(600 + seed);
    vg::FeatureMatrix h0(10, 3);
    for (Eigen::Index i = 0; i < h0.size(); ++i) h0.data()[i] = rng.normal();
    std::vector<vg::GraphLayerParams> layers = random_layers({3, 4, 3}, rng, true);
    vg::MlpParams mlp = random_mlp({3, 3, 1}, rng);
    Eigen::VectorXd upstream(10);
    for (int i = 0; i < 10; ++i) upstream(i) = rng.normal();

    const auto loss = [&]() {
      const vg::PerPointTrace t = vg::graph_net_forward_perpoint(h0, a_hat, layers, mlp);
      return upstream.dot(t.scores);
    };
    const vg::PerPointTrace t = vg::graph_net_forward_perpoint(h0, a_hat, layers, mlp);
    double min_pre = 1e9;
    for (const vg::FeatureMatrix& p : t.pre) min_pre = std::min(min_pre, p.cwiseAbs().minCoeff());
    for (std::size_t l = 0; l + 1 < mlp.layers.size(); ++l)
      min_pre = std::min(min_pre, t.mlp_pre[l].cwiseAbs().minCoeff());
    if (min_pre < 5e-3) continue;
    ++accepted;

    const vg::GraphNetGrads g = vg::graph_net_backward_perpoint(layers, mlp, a_hat, t, upstream);
    std::vector<std::pair<double*, double>> params;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (Eigen::Index i = 0; i < layers[l].weight.size(); ++i)
        params.push_back({layers[l].weight.data() + i, g.layer_w[l].data()[i]});
      if (layers[l].has_bias)
        for (Eigen::Index i = 0; i < layers[l].bias.size(); ++i)
          params.push_back({layers[l].bias.data() + i, g.layer_b[l](i)});
    }
    for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
      for (Eigen::Index i = 0; i < mlp.layers[l].weight.size(); ++i)
        params.push_back({mlp.layers[l].weight.data() + i, g.mlp_w[l].data()[i]});
      for (Eigen::Index i = 0; i < mlp.layers[l].bias.size(); ++i)
        params.push_back({mlp.layers[l].bias.data() + i, g.mlp_b[l](i)});
    }
    for (auto& [slot, analytic] : params) {
      const double saved = *slot;
      *slot = saved + fd_h;
      const double up = loss();
      *slot = saved - fd_h;
      const double down = loss();
      *slot = saved;
      const double fd = (up - down) / (2.0 * fd_h);
      if (std::abs(fd) < 1e-7 && std::abs(analytic) < 1e-7) continue;
      CHECK(std::abs(fd - analytic) / std::max(std::abs(fd), std::abs(analytic)) < 1e-4);
    }
  }
  REQUIRE(accepted == 2);
}

TEST_CASE("graph_net max readout gradient matches finite differences off ties") {
  const vg::PointCloud cloud = random_cloud(10, 321);
  const vg::SparseRowMatrix a_hat = vg::normalize_adjacency(vg::build_graph(cloud, 3));
  vg::Rng rng(322);
  vg::FeatureMatrix h0(10, 3);
  for (Eigen::Index i = 0; i < h0.size(); ++i) h0.data()[i] = rng.normal();
  std::vector<vg::GraphLayerParams> layers = random_layers({3, 3}, rng, false);
  vg::MlpParams mlp = random_mlp({3, 1}, rng);
  const auto forward = [&]() {
    return vg::graph_net_forward(h0, a_hat, layers, mlp, vg::ReadoutMode::Max);
  };
  const vg::GraphNetTrace t = forward();
  const vg::GraphNetGrads g = vg::graph_net_backward(layers, mlp, a_hat, t);
  const double fd_h = 1e-5;
  for (Eigen::Index i = 0; i < layers[0].weight.size(); ++i) {
    const double saved = layers[0].weight.data()[i];
    layers[0].weight.data()[i] = saved + fd_h;
    const double up = forward().score;
    layers[0].weight.data()[i] = saved - fd_h;
    const double down = forward().score;
    layers[0].weight.data()[i] = saved;
    const double fd = (up - down) / (2.0 * fd_h);
    const double analytic = g.layer_w[0].data()[i];
    if (std::abs(fd) < 1e-7 && std::abs(analytic) < 1e-7) continue;
    CHECK(std::abs(fd - analytic) / std::max(std::abs(fd), std::abs(analytic)) < 1e-3);
  }
}
