// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "votegrid/detect.hpp"
#include "votegrid/rng.hpp"

namespace vg = votegrid;

namespace {

vg::FeatureMatrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  vg::Rng rng(seed);
  vg::FeatureMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// Exhaustive nearest-neighbor distances, the plain way.
Eigen::VectorXd brute_bank_score(const vg::FeatureMatrix& f, const vg::FeatureMatrix& bank) {
  Eigen::VectorXd out(f.rows());
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < bank.rows(); ++j)
      best = std::min(best, (f.row(i) - bank.row(j)).norm());
    out(i) = best;
  }
  return out;
}

bool row_in(const vg::FeatureMatrix& m, const Eigen::RowVectorXd& row) {
  for (Eigen::Index j = 0; j < m.rows(); ++j)
    if ((m.row(j) - row).cwiseAbs().maxCoeff() == 0.0) return true;
  return false;
}

}  // namespace

TEST_CASE("concat_features places the 3D block first") {
  vg::FeatureMatrix a(1, 2), b(1, 1);
  a << 1.0, 2.0;
  b << 3.0;
  const vg::FeatureMatrix c = vg::concat_features(a, b);
  REQUIRE(c.rows() == 1);
  REQUIRE(c.cols() == 3);
  CHECK(c(0, 0) == 1.0);
  CHECK(c(0, 1) == 2.0);
  CHECK(c(0, 2) == 3.0);

  SECTION("zero-width second block is the identity") {
    const vg::FeatureMatrix same = vg::concat_features(a, vg::FeatureMatrix(1, 0));
    CHECK(same == a);
  }
  SECTION("slicing the output recovers both inputs") {
    const vg::FeatureMatrix f3 = random_matrix(7, 33, 1);
    const vg::FeatureMatrix f2 = random_matrix(7, 16, 2);
    const vg::FeatureMatrix cat = vg::concat_features(f3, f2);
    CHECK(cat.leftCols(33) == f3);
    CHECK(cat.rightCols(16) == f2);
  }
  SECTION("row mismatch is rejected") {
    CHECK_THROWS_AS(vg::concat_features(random_matrix(3, 2, 3), random_matrix(4, 2, 4)),
                    vg::Error);
  }
}

TEST_CASE("bank_build pools rows and subsamples deterministically") {
  const vg::FeatureMatrix s0 = random_matrix(10, 4, 10);
  const vg::FeatureMatrix s1 = random_matrix(10, 4, 11);

  SECTION("full pooling keeps every row in order") {
    const vg::MemoryBank bank = vg::bank_build({s0, s1}, 1.0, 0, {"a", "b"});
    REQUIRE(bank.rows.rows() == 20);
    CHECK(bank.rows.topRows(10) == s0);
    CHECK(bank.rows.bottomRows(10) == s1);
    for (int i = 0; i < 10; ++i) {
      CHECK(bank.source[static_cast<std::size_t>(i)] == "a");
      CHECK(bank.source[static_cast<std::size_t>(10 + i)] == "b");
    }
  }
  SECTION("half subsample is deterministic and a subset") {
    const vg::MemoryBank b1 = vg::bank_build({s0, s1}, 0.5, 7);
    const vg::MemoryBank b2 = vg::bank_build({s0, s1}, 0.5, 7);
    REQUIRE(b1.rows.rows() == 10);
    CHECK(b1.rows == b2.rows);
    CHECK(b1.source == b2.source);
    for (Eigen::Index i = 0; i < b1.rows.rows(); ++i)
      CHECK((row_in(s0, b1.rows.row(i)) || row_in(s1, b1.rows.row(i))));
    const vg::MemoryBank b3 = vg::bank_build({s0, s1}, 0.5, 8);
    CHECK(b1.rows != b3.rows);
  }
  SECTION("degenerate inputs are rejected") {
    try {
      vg::bank_build({});
      FAIL("expected rejection");
    } catch (const vg::Error& e) {
      CHECK(e.kind() == vg::ErrorKind::EmptyBank);
    }
    CHECK_THROWS_AS(vg::bank_build({s0, random_matrix(5, 3, 12)}), vg::Error);
    CHECK_THROWS_AS(vg::bank_build({s0}, 0.0), vg::Error);
    CHECK_THROWS_AS(vg::bank_build({s0}, 1.5), vg::Error);
  }
}

TEST_CASE("bank_score worked examples") {
  vg::MemoryBank bank;
  bank.rows = vg::FeatureMatrix::Zero(1, 2);
  bank.source = {"origin"};
  vg::FeatureMatrix test(2, 2);
  test << 3.0, 4.0, 0.0, 0.0;
  const Eigen::VectorXd s = vg::bank_score(test, bank);
  CHECK(s(0) == Catch::Approx(5.0));
  CHECK(s(1) == 0.0);

  SECTION("width mismatch and empty bank are rejected") {
    CHECK_THROWS_AS(vg::bank_score(random_matrix(2, 3, 5), bank), vg::Error);
    vg::MemoryBank empty;
    empty.rows = vg::FeatureMatrix(0, 2);
    try {
      vg::bank_score(test, empty);
      FAIL("expected rejection");
    } catch (const vg::Error& e) {
      CHECK(e.kind() == vg::ErrorKind::EmptyBank);
    }
  }
}

TEST_CASE("bank_score matches the brute-force oracle") {
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    const vg::FeatureMatrix bank_rows = random_matrix(100, 7, seed);
    const vg::FeatureMatrix test = random_matrix(40, 7, seed + 100);
    vg::MemoryBank bank;
    bank.rows = bank_rows;
    const Eigen::VectorXd got = vg::bank_score(test, bank);
    const Eigen::VectorXd want = brute_bank_score(test, bank_rows);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(got.minCoeff() >= 0.0);

    SECTION("thread count does not change the result") {
      const Eigen::VectorXd got4 = vg::bank_score(test, bank, 4);
      CHECK((got4 - got).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("bank_score is zero exactly on bank members") {
  const vg::FeatureMatrix bank_rows = random_matrix(30, 5, 77);
  vg::MemoryBank bank;
  bank.rows = bank_rows;
  vg::FeatureMatrix test(31, 5);
  test.topRows(30) = bank_rows;
  test.row(30) = bank_rows.row(0);
  test(30, 0) += 0.5;
  const Eigen::VectorXd s = vg::bank_score(test, bank);
  for (Eigen::Index i = 0; i < 30; ++i) CHECK(s(i) == 0.0);
  CHECK(s(30) > 0.0);
}

TEST_CASE("normalize_scores maps to [0,1] preserving order") {
  Eigen::VectorXd raw(3);
  raw << 2.0, 4.0, 6.0;
  const Eigen::VectorXd n = vg::normalize_scores(raw);
  CHECK(n(0) == 0.0);
  CHECK(n(1) == Catch::Approx(0.5));
  CHECK(n(2) == 1.0);

  SECTION("constant input maps to zeros") {
    const Eigen::VectorXd z = vg::normalize_scores(Eigen::VectorXd::Constant(3, 5.0));
    CHECK(z.cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("random vectors: anchors and order") {
    vg::Rng rng(5);
    Eigen::VectorXd r(50);
    for (Eigen::Index i = 0; i < 50; ++i) r(i) = rng.normal();
    const Eigen::VectorXd nn = vg::normalize_scores(r);
    CHECK(nn.minCoeff() == 0.0);
    CHECK(nn.maxCoeff() == 1.0);
    for (Eigen::Index i = 0; i < 50; ++i)
      for (Eigen::Index j = 0; j < 50; ++j)
        if (r(i) < r(j)) CHECK(nn(i) < nn(j));
  }
  SECTION("empty and non-finite inputs are rejected") {
    CHECK_THROWS_AS(vg::normalize_scores(Eigen::VectorXd()), vg::Error);
    Eigen::VectorXd bad(2);
    bad << 1.0, std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(vg::normalize_scores(bad), vg::Error);
  }
}

TEST_CASE("threshold_detect applies a strict threshold") {
  Eigen::VectorXd s(2);
  s << 0.2, 0.9;
  CHECK(vg::threshold_detect(s, 0.5) == std::vector<std::size_t>{1});
  CHECK(vg::threshold_detect(s, 1.0).empty());

  SECTION("boundary equality is not anomalous") {
    Eigen::VectorXd eq(2);
    eq << 0.5, 0.50001;
    CHECK(vg::threshold_detect(eq, 0.5) == std::vector<std::size_t>{1});
  }
  SECTION("random set equals the elementwise comparison oracle") {
    vg::Rng rng(9);
    Eigen::VectorXd r(100);
    for (Eigen::Index i = 0; i < 100; ++i) r(i) = rng.uniform();
    const double tau = 0.35;
    const auto got = vg::threshold_detect(r, tau);
    std::vector<std::size_t> want;
    for (Eigen::Index i = 0; i < 100; ++i)
      if (r(i) > tau) want.push_back(static_cast<std::size_t>(i));
    CHECK(got == want);
  }
  SECTION("invalid tau and out-of-range scores are rejected") {
    CHECK_THROWS_AS(vg::threshold_detect(s, -0.1), vg::Error);
    CHECK_THROWS_AS(vg::threshold_detect(s, 1.1), vg::Error);
    Eigen::VectorXd bad(1);
    bad << 1.5;
    CHECK_THROWS_AS(vg::threshold_detect(bad, 0.5), vg::Error);
  }
}

TEST_CASE("image_score is the maximum raw score") {
  Eigen::VectorXd s(3);
  s << 0.1, 0.7, 0.3;
  CHECK(vg::image_score(s) == Catch::Approx(0.7));
  CHECK(vg::image_score(Eigen::VectorXd::Constant(1, -2.5)) == -2.5);

  vg::Rng rng(10);
  Eigen::VectorXd r(64);
  for (Eigen::Index i = 0; i < 64; ++i) r(i) = rng.normal();
  CHECK(vg::image_score(r) == r.maxCoeff());

  try {
    vg::image_score(Eigen::VectorXd());
    FAIL("expected rejection");
  } catch (const vg::Error& e) {
    CHECK(e.kind() == vg::ErrorKind::DegenerateInput);
  }
}

TEST_CASE("make_result keeps the anomaly-set invariant") {
  vg::Rng rng(31);
  Eigen::VectorXd raw(80);
  for (Eigen::Index i = 0; i < 80; ++i) raw(i) = rng.normal() * 3.0;
  const vg::AnomalyResult r = vg::make_result(raw, 0.6);
  CHECK(r.norm_scores.minCoeff() >= 0.0);
  CHECK(r.norm_scores.maxCoeff() <= 1.0);
  CHECK(r.image_score == raw.maxCoeff());
  std::vector<std::size_t> want;
  for (Eigen::Index i = 0; i < 80; ++i)
    if (r.norm_scores(i) > r.threshold) want.push_back(static_cast<std::size_t>(i));
  CHECK(r.anomaly_set == want);
}

TEST_CASE("detection is invariant under increasing affine maps of raw scores") {
  vg::Rng rng(41);
  Eigen::VectorXd raw(60);
  for (Eigen::Index i = 0; i < 60; ++i) raw(i) = rng.normal();
  const auto base = vg::threshold_detect(vg::normalize_scores(raw), 0.55);
  const Eigen::VectorXd mapped = (raw.array() * 4.0 + 11.0).matrix();
  const auto same = vg::threshold_detect(vg::normalize_scores(mapped), 0.55);
  CHECK(base == same);

  // Argmax survives any strictly increasing map, affine or not.
  Eigen::VectorXd cubed(60);
  for (Eigen::Index i = 0; i < 60; ++i) cubed(i) = raw(i) * raw(i) * raw(i);
  Eigen::Index a1, a2;
  vg::normalize_scores(raw).maxCoeff(&a1);
  vg::normalize_scores(cubed).maxCoeff(&a2);
  CHECK(a1 == a2);
}
