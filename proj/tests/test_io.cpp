// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "votegrid/io.hpp"
#include "votegrid/rng.hpp"

namespace vg = votegrid;

namespace {

struct TempPath {
  std::string path;
  explicit TempPath(const std::string& name) : path("/tmp/votegrid_io_" + name) {}
  ~TempPath() { std::remove(path.c_str()); }
};

vg::PointCloud organized_cloud(int rows, int cols, std::uint64_t seed) {
  vg::Rng rng(seed);
  vg::PointCloud cloud;
  cloud.grid_shape = {rows, cols};
  for (int i = 0; i < rows * cols; ++i) {
    cloud.points.push_back({rng.normal(), rng.normal(), rng.normal()});
    cloud.valid.push_back(1);
  }
  return cloud;
}

}  // namespace

TEST_CASE("xyz-grid round-trips an organized cloud bit-exactly") {
  vg::PointCloud cloud = organized_cloud(5, 7, 3);
  cloud.valid[9] = 0;
  cloud.points[9] = vg::Vec3::Zero();
  cloud.valid[20] = 0;
  cloud.points[20] = vg::Vec3::Zero();
  TempPath tmp("roundtrip.xyz");
  vg::write_xyz_grid(tmp.path, cloud);
  const vg::PointCloud back = vg::read_xyz_grid(tmp.path);
  REQUIRE(back.organized());
  CHECK(back.grid_shape->first == 5);
  CHECK(back.grid_shape->second == 7);
  REQUIRE(back.size() == cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    CHECK(back.is_valid(i) == cloud.is_valid(i));
    if (cloud.is_valid(i)) CHECK(back.points[i] == cloud.points[i]);
  }
}

TEST_CASE("xyz-grid reads the documented minimal example") {
  TempPath tmp("minimal.xyz");
  vg::write_text_file(tmp.path, "2 2\n0 0 1\n0.5 0 1.25\nnan nan nan\n0 0.5 1\n");
  const vg::PointCloud cloud = vg::read_xyz_grid(tmp.path);
  REQUIRE(cloud.size() == 4);
  CHECK(cloud.valid_count() == 3);
  CHECK_FALSE(cloud.is_valid(2));
  CHECK(cloud.points[1] == vg::Vec3(0.5, 0.0, 1.25));
}

TEST_CASE("xyz-grid reports parse errors with line numbers") {
  SECTION("bad header") {
    TempPath tmp("badheader.xyz");
    vg::write_text_file(tmp.path, "two three\n");
    try {
      vg::read_xyz_grid(tmp.path);
      FAIL("expected rejection");
    } catch (const vg::Error& e) {
      CHECK(e.kind() == vg::ErrorKind::ParseError);
      CHECK(std::string(e.what()).find(":1:") != std::string::npos);
    }
  }
  SECTION("short row on line 3") {
    TempPath tmp("shortrow.xyz");
    vg::write_text_file(tmp.path, "2 1\n1 2 3\n4 5\n");
    try {
      vg::read_xyz_grid(tmp.path);
      FAIL("expected rejection");
    } catch (const vg::Error& e) {
      CHECK(e.kind() == vg::ErrorKind::ParseError);
      CHECK(std::string(e.what()).find(":3:") != std::string::npos);
    }
  }
  SECTION("file ends before all points") {
    TempPath tmp("truncated.xyz");
    vg::write_text_file(tmp.path, "2 2\n1 2 3\n");
    CHECK_THROWS_AS(vg::read_xyz_grid(tmp.path), vg::Error);
  }
  SECTION("unorganized cloud cannot be written") {
    const vg::PointCloud flat = vg::make_cloud({{0, 0, 0}});
    TempPath tmp("unorganized.xyz");
    try {
      vg::write_xyz_grid(tmp.path, flat);
      FAIL("expected rejection");
    } catch (const vg::Error& e) {
      CHECK(e.kind() == vg::ErrorKind::RequiresOrganized);
    }
  }
}

TEST_CASE("PGM masks round-trip and validate strictly") {
  const std::vector<std::uint8_t> truth = {0, 1, 1, 0, 0, 1};
  TempPath tmp("mask.pgm");
  vg::write_pgm_mask(tmp.path, truth, 2, 3);
  const vg::PgmMask back = vg::read_pgm_mask(tmp.path);
  CHECK(back.rows == 2);
  CHECK(back.cols == 3);
  CHECK(back.truth == truth);

  SECTION("ascii P2 masks with comments are accepted") {
    TempPath ascii("mask_ascii.pgm");
    vg::write_text_file(ascii.path, "P2\n# a comment\n3 2\n255\n0 255 255\n0 0 255\n");
    const vg::PgmMask m = vg::read_pgm_mask(ascii.path);
    CHECK(m.rows == 2);
    CHECK(m.cols == 3);
    CHECK(m.truth == truth);
  }
  SECTION("intermediate gray values are rejected") {
    TempPath gray("mask_gray.pgm");
    vg::write_text_file(gray.path, "P2\n1 1\n255\n128\n");
    try {
      vg::read_pgm_mask(gray.path);
      FAIL("expected rejection");
    } catch (const vg::Error& e) {
      CHECK(e.kind() == vg::ErrorKind::ParseError);
    }
  }
  SECTION("wrong maxval is rejected") {
    TempPath bad("mask_maxval.pgm");
    vg::write_text_file(bad.path, "P2\n1 1\n65535\n0\n");
    CHECK_THROWS_AS(vg::read_pgm_mask(bad.path), vg::Error);
  }
}

TEST_CASE("16-bit depth PGM quantizes to millimeters big-endian") {
  vg::DepthImage img;
  img.rows = 1;
  img.cols = 3;
  img.depth = {0.5, std::numeric_limits<double>::infinity(), 1.2345};
  img.point_index = {0, -1, 1};
  TempPath tmp("depth.pgm");
  vg::write_pgm_depth16(tmp.path, img);
  const std::string bytes = vg::read_text_file(tmp.path);
  const std::string head = "P5\n3 1\n65535\n";
  REQUIRE(bytes.size() == head.size() + 6);
  CHECK(bytes.compare(0, head.size(), head) == 0);
  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data() + head.size());
  const auto sample = [&](int i) { return (p[2 * i] << 8) | p[2 * i + 1]; };
  CHECK(sample(0) == 500);    // 0.5 m
  CHECK(sample(1) == 0);      // empty
  CHECK(sample(2) == 1235);   // rounded 1234.5 mm
}

TEST_CASE("VGK1 parameters round-trip at float precision") {
  vg::Rng rng(5);
  vg::NetParams params;
  vg::ConvKernel3D k = vg::ConvKernel3D::zeros(3, 3, 3, 2, 4);
  for (double& x : k.w) x = rng.normal();
  for (double& x : k.bias) x = rng.normal();
  params.conv.push_back(k);

  vg::GraphLayerParams g;
  g.weight.resize(5, 3);
  for (Eigen::Index i = 0; i < g.weight.size(); ++i) g.weight.data()[i] = rng.normal();
  g.has_bias = true;
  g.bias.resize(3);
  for (Eigen::Index i = 0; i < 3; ++i) g.bias(i) = rng.normal();
  params.graph.push_back(g);
  vg::GraphLayerParams g2;
  g2.weight.resize(3, 2);
  for (Eigen::Index i = 0; i < g2.weight.size(); ++i) g2.weight.data()[i] = rng.normal();
  params.graph.push_back(g2);

  vg::MlpLayer m;
  m.weight.resize(2, 1);
  m.weight << 0.25, -1.5;
  m.bias = Eigen::VectorXd::Constant(1, 0.125);
  params.mlp.push_back(m);

  TempPath tmp("params.vgk");
  vg::write_params(tmp.path, params);
  const vg::NetParams back = vg::read_params(tmp.path);
  REQUIRE(back.conv.size() == 1);
  REQUIRE(back.graph.size() == 2);
  REQUIRE(back.mlp.size() == 1);
  const auto f32 = [](double v) { return static_cast<double>(static_cast<float>(v)); };
  CHECK(back.conv[0].kx == 3);
  CHECK(back.conv[0].cin == 2);
  CHECK(back.conv[0].cout == 4);
  for (std::size_t i = 0; i < k.w.size(); ++i) CHECK(back.conv[0].w[i] == f32(k.w[i]));
  for (std::size_t i = 0; i < k.bias.size(); ++i) CHECK(back.conv[0].bias[i] == f32(k.bias[i]));
  CHECK(back.graph[0].has_bias);
  for (Eigen::Index i = 0; i < g.weight.rows(); ++i)
    for (Eigen::Index j = 0; j < g.weight.cols(); ++j)
      CHECK(back.graph[0].weight(i, j) == f32(g.weight(i, j)));
  for (Eigen::Index i = 0; i < 3; ++i) CHECK(back.graph[0].bias(i) == f32(g.bias(i)));
  CHECK_FALSE(back.graph[1].has_bias);
  CHECK(back.mlp[0].weight(0, 0) == 0.25);
  CHECK(back.mlp[0].weight(1, 0) == -1.5);
  CHECK(back.mlp[0].bias(0) == 0.125);

  SECTION("magic and header bytes are exact") {
    const std::string bytes = vg::read_text_file(tmp.path);
    REQUIRE(bytes.size() >= 8);
    CHECK(bytes.compare(0, 4, "VGK1") == 0);
    CHECK(static_cast<unsigned char>(bytes[4]) == 4);  // 4 layers, LE u32
    CHECK(static_cast<unsigned char>(bytes[5]) == 0);
  }
  SECTION("corrupted magic is rejected") {
    std::string bytes = vg::read_text_file(tmp.path);
    bytes[0] = 'X';
    TempPath bad("params_bad.vgk");
    vg::write_text_file(bad.path, bytes);
    CHECK_THROWS_AS(vg::read_params(bad.path), vg::Error);
  }
  SECTION("truncation is rejected") {
    const std::string bytes = vg::read_text_file(tmp.path);
    TempPath cut("params_cut.vgk");
    vg::write_text_file(cut.path, bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(vg::read_params(cut.path), vg::Error);
  }
}

TEST_CASE("JSON serialization is stable and complete") {
  Eigen::VectorXd raw(4);
  raw << 1.0, 3.0, 2.0, 5.0;
  const vg::AnomalyResult r = vg::make_result(raw, 0.5);
  const nlohmann::ordered_json j = vg::result_to_json("test_007", r);
  CHECK(j["sample_id"] == "test_007");
  CHECK(j["image_score"] == 5.0);
  CHECK(j["tau"] == 0.5);
  REQUIRE(j["scores"].size() == 4);
  CHECK(j["scores"][0] == 0.0);
  CHECK(j["scores"][3] == 1.0);
  REQUIRE(j["anomalies"].size() == 1);
  CHECK(j["anomalies"][0] == 3);

  vg::MetricReport report;
  report.per_class.push_back({"bump", {0.95, true, 0.8}});
  report.per_class.push_back({"hole", {0.9, false, 0.0}});
  report.mean_i_roc = 0.925;
  report.has_mean_p_pro = true;
  report.mean_p_pro = 0.8;
  const nlohmann::ordered_json rep = vg::report_to_json(report);
  CHECK(rep["per_class"]["bump"]["i_roc"] == 0.95);
  CHECK(rep["per_class"]["bump"]["p_pro"] == 0.8);
  CHECK(rep["per_class"]["hole"]["p_pro"].is_null());
  CHECK(rep["mean_i_roc"] == 0.925);
  // Serialized key order is fixed, so dumps are byte-stable.
  CHECK(rep.dump() == vg::report_to_json(report).dump());
}
