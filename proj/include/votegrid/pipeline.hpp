// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "core.hpp"
#include "detect.hpp"
#include "error.hpp"
#include "feat2d.hpp"
#include "fpfh.hpp"
#include "graph_net.hpp"
#include "io.hpp"
#include "metrics.hpp"
#include "multiview.hpp"
#include "parallel.hpp"
#include "preprocess.hpp"
#include "rng.hpp"
#include "synthetic.hpp"
#include "train.hpp"

namespace votegrid {

// ---------------------------------------------------------------------------
// Key-value configuration files
// ---------------------------------------------------------------------------

/// "key = value" lines; '#' starts a comment; blank lines ignored. Every
/// getter marks its key consumed so require_consumed() can reject typos.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text,
                              const std::string& source = "<config>") {
    KeyValueConfig cfg;
    cfg.source_ = source;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const std::size_t hash = line.find('#'); hash != std::string::npos)
        line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const std::size_t eq = trimmed.find('=');
      require(eq != std::string::npos, ErrorKind::InvalidConfig,
              source + ":" + std::to_string(lineno) + ": expected 'key = value'");
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      require(!key.empty(), ErrorKind::InvalidConfig,
              source + ":" + std::to_string(lineno) + ": empty key");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  static KeyValueConfig load(const std::string& path) {
    return parse(read_text_file(path), path);
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& def) const {
    consumed_.insert(key);
    const auto it = values_.find(key);
    return it == values_.end() ? def : it->second;
  }

  double get_double(const std::string& key, double def) const {
    consumed_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return def;
    return parse_double(key, it->second);
  }

  long long get_int(const std::string& key, long long def) const {
    consumed_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return def;
    const double v = parse_double(key, it->second);
    require(v == std::floor(v) && std::abs(v) < 9.0e15, ErrorKind::InvalidConfig,
            source_ + ": key '" + key + "': expected an integer, got '" +
                it->second + "'");
    return static_cast<long long>(v);
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t def) const {
    consumed_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return def;
    const std::string& s = it->second;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    require(end == s.c_str() + s.size() && !s.empty() && s[0] != '-',
            ErrorKind::InvalidConfig,
            source_ + ": key '" + key + "': expected an unsigned integer, got '" +
                s + "'");
    return v;
  }

  bool get_bool(const std::string& key, bool def) const {
    consumed_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return def;
    const std::string& s = it->second;
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    fail(ErrorKind::InvalidConfig,
         source_ + ": key '" + key + "': expected a boolean, got '" + s + "'");
  }

  std::vector<double> get_double_list(const std::string& key,
                                      const std::vector<double>& def) const {
    consumed_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return def;
    std::vector<double> out;
    std::istringstream in(it->second);
    std::string item;
    while (std::getline(in, item, ',')) out.push_back(parse_double(key, trim(item)));
    require(!out.empty(), ErrorKind::InvalidConfig,
            source_ + ": key '" + key + "': empty list");
    return out;
  }

  std::vector<int> get_int_list(const std::string& key,
                                const std::vector<int>& def) const {
    consumed_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return def;
    std::vector<int> out;
    for (double v : get_double_list(key, {})) {
      require(v == std::floor(v), ErrorKind::InvalidConfig,
              source_ + ": key '" + key + "': expected integers");
      out.push_back(static_cast<int>(v));
    }
    return out;
  }

  /// Rejects keys no getter ever looked at: catches misspelled settings.
  void require_consumed() const {
    std::string unknown;
    for (const auto& [key, value] : values_)
      if (!consumed_.count(key)) unknown += (unknown.empty() ? "" : ", ") + key;
    require(unknown.empty(), ErrorKind::InvalidConfig,
            source_ + ": unknown keys: " + unknown);
  }

  const std::string& source() const { return source_; }

 private:
  static std::string trim(const std::string& s) {
    const std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  double parse_double(const std::string& key, const std::string& s) const {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    require(!s.empty() && end == s.c_str() + s.size(), ErrorKind::InvalidConfig,
            source_ + ": key '" + key + "': expected a number, got '" + s + "'");
    return v;
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;
  std::string source_ = "<config>";
};

// ---------------------------------------------------------------------------
// Pipeline configuration
// ---------------------------------------------------------------------------

enum class ScorerKind { Bank, Mlp };
enum class FeatureMode { F3d, F2d, Fused };

inline ScorerKind parse_scorer_kind(const std::string& s) {
  if (s == "bank") return ScorerKind::Bank;
  if (s == "mlp") return ScorerKind::Mlp;
  fail(ErrorKind::InvalidConfig, "unknown scorer '" + s + "' (bank | mlp)");
}

inline FeatureMode parse_feature_mode(const std::string& s) {
  if (s == "f3d") return FeatureMode::F3d;
  if (s == "f2d") return FeatureMode::F2d;
  if (s == "fused") return FeatureMode::Fused;
  fail(ErrorKind::InvalidConfig,
       "unknown feature mode '" + s + "' (f3d | f2d | fused)");
}

inline std::string to_string(FeatureMode m) {
  switch (m) {
    case FeatureMode::F3d: return "f3d";
    case FeatureMode::F2d: return "f2d";
    case FeatureMode::Fused: return "fused";
  }
  return "?";
}

struct GraphConfig {
  int k = 8;
  int layers = 2;
  int hidden = 16;
  bool self_loops = false;

  void check() const {
    require(k >= 1, ErrorKind::InvalidConfig, "graph.k must be at least 1");
    require(layers >= 1 && hidden >= 1, ErrorKind::InvalidConfig,
            "graph layers and hidden width must be positive");
  }
};

struct PipelineConfig {
  PreprocessConfig preprocess;
  FpfhConfig fpfh;
  int n_views = 3;
  int image_rows = 224;
  int image_cols = 224;
  Extractor2DConfig extractor;
  GraphConfig graph;
  ScorerKind scorer = ScorerKind::Bank;
  double bank_subsample = 1.0;
  double tau = 0.5;
  FeatureMode feature_mode = FeatureMode::Fused;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  TrainConfig train;            // mlp scorer fitting
  double pseudo_fraction = 0.2; // one-class proxy augmentation
  double pseudo_magnitude = 2.0;

  void check() const {
    preprocess.check();
    fpfh.check();
    extractor.check();
    graph.check();
    train.check();
    require(n_views >= 1, ErrorKind::InvalidConfig, "n_views must be at least 1");
    require(image_rows >= 8 && image_cols >= 8, ErrorKind::InvalidConfig,
            "image size must be at least 8x8");
    require(bank_subsample > 0.0 && bank_subsample <= 1.0, ErrorKind::InvalidConfig,
            "bank.subsample must lie in (0, 1]");
    require(tau >= 0.0 && tau <= 1.0, ErrorKind::InvalidConfig,
            "tau must lie in [0, 1]");
    require(pseudo_fraction > 0.0 && pseudo_fraction <= 1.0, ErrorKind::InvalidConfig,
            "pseudo.fraction must lie in (0, 1]");
    require(std::isfinite(pseudo_magnitude) && pseudo_magnitude > 0.0,
            ErrorKind::InvalidConfig, "pseudo.magnitude must be positive");
    require(threads >= 1, ErrorKind::InvalidConfig, "threads must be at least 1");
  }
};

/// Reads every pipeline key (all optional, defaults above) and rejects
/// unknown ones.
inline PipelineConfig pipeline_config_from_kv(const KeyValueConfig& kv) {
  PipelineConfig c;
  c.preprocess.strip_width_px =
      static_cast<int>(kv.get_int("preprocess.strip_width", c.preprocess.strip_width_px));
  c.preprocess.ransac_iters =
      static_cast<int>(kv.get_int("preprocess.ransac_iters", c.preprocess.ransac_iters));
  c.preprocess.ransac_eps = kv.get_double("preprocess.ransac_eps", c.preprocess.ransac_eps);
  c.preprocess.dbscan_eps = kv.get_double("preprocess.dbscan_eps", c.preprocess.dbscan_eps);
  c.preprocess.dbscan_min_pts =
      static_cast<int>(kv.get_int("preprocess.dbscan_min_pts", c.preprocess.dbscan_min_pts));
  c.preprocess.seed = kv.get_u64("preprocess.seed", c.preprocess.seed);

  c.fpfh.normal_radius = kv.get_double("fpfh.normal_radius", c.fpfh.normal_radius);
  c.fpfh.feature_radius = kv.get_double("fpfh.feature_radius", c.fpfh.feature_radius);
  c.fpfh.bins_per_angle =
      static_cast<int>(kv.get_int("fpfh.bins_per_angle", c.fpfh.bins_per_angle));
  c.fpfh.downsample_leaf = kv.get_double("fpfh.downsample_leaf", c.fpfh.downsample_leaf);

  c.n_views = static_cast<int>(kv.get_int("n_views", c.n_views));
  c.image_rows = static_cast<int>(kv.get_int("image_rows", c.image_rows));
  c.image_cols = static_cast<int>(kv.get_int("image_cols", c.image_cols));

  const std::string ekind = kv.get_string("extractor.kind", "builtin");
  if (ekind == "builtin") {
    c.extractor.kind = ExtractorKind::BuiltinPyramid;
  } else if (ekind == "file") {
    c.extractor.kind = ExtractorKind::ExternalFile;
  } else {
    fail(ErrorKind::InvalidConfig,
         "unknown extractor.kind '" + ekind + "' (builtin | file)");
  }
  c.extractor.channels =
      static_cast<int>(kv.get_int("extractor.channels", c.extractor.channels));
  c.extractor.levels = static_cast<int>(kv.get_int("extractor.levels", c.extractor.levels));
  c.extractor.seed = kv.get_u64("extractor.seed", c.extractor.seed);
  c.extractor.path = kv.get_string("extractor.path", c.extractor.path);

  c.graph.k = static_cast<int>(kv.get_int("graph.k", c.graph.k));
  c.graph.layers = static_cast<int>(kv.get_int("graph.layers", c.graph.layers));
  c.graph.hidden = static_cast<int>(kv.get_int("graph.hidden", c.graph.hidden));
  c.graph.self_loops = kv.get_bool("graph.self_loops", c.graph.self_loops);

  c.scorer = parse_scorer_kind(kv.get_string("scorer", "bank"));
  c.bank_subsample = kv.get_double("bank.subsample", c.bank_subsample);
  c.tau = kv.get_double("tau", c.tau);
  c.feature_mode = parse_feature_mode(kv.get_string("feature_mode", "fused"));
  c.seed = kv.get_u64("seed", c.seed);
  c.threads = static_cast<unsigned>(kv.get_int("threads", c.threads));

  c.train.iters = static_cast<int>(kv.get_int("train.iters", c.train.iters));
  c.train.step = kv.get_double("train.step", c.train.step);
  c.train.lambda = kv.get_double("train.lambda", c.train.lambda);
  c.train.seed = kv.get_u64("train.seed", c.train.seed);
  c.pseudo_fraction = kv.get_double("pseudo.fraction", c.pseudo_fraction);
  c.pseudo_magnitude = kv.get_double("pseudo.magnitude", c.pseudo_magnitude);

  c.check();
  return c;
}

// ---------------------------------------------------------------------------
// Dataset ingestion
// ---------------------------------------------------------------------------

enum class DatasetFormat { XyzGrid, PlyAscii };

inline DatasetFormat parse_dataset_format(const std::string& s) {
  if (s == "xyz-grid") return DatasetFormat::XyzGrid;
  if (s == "ply-ascii") return DatasetFormat::PlyAscii;
  fail(ErrorKind::InvalidConfig,
       "unknown dataset format '" + s + "' (xyz-grid | ply-ascii)");
}

struct Sample {
  std::string id;      // "<defect>/<stem>"
  std::string defect;  // "good" for nominal samples
  PointCloud cloud;
  bool has_mask = false;
  std::vector<std::uint8_t> truth;  // per original point, only when has_mask
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
  std::vector<std::string> warnings;
};

/// Minimal ASCII PLY reader: float/double x y z vertex properties, an
/// optional "comment grid <rows> <cols>" line restoring sensor
/// organization, non-finite coordinates marking invalid points.
inline PointCloud read_ply_ascii(const std::string& path) {
  const std::string text = read_text_file(path);
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  const auto parse_fail = [&](const std::string& msg) {
    fail(ErrorKind::ParseError, path + ":" + std::to_string(lineno) + ": " + msg);
  };
  const auto next_line = [&]() {
    if (!std::getline(in, line)) parse_fail("unexpected end of file");
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
  };

  next_line();
  if (line != "ply") parse_fail("not a PLY file (missing 'ply')");
  long long n_vertices = -1;
  int grid_rows = 0, grid_cols = 0;
  bool has_grid = false, ascii = false, in_vertex = false;
  std::vector<std::string> vertex_props;
  for (;;) {
    next_line();
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "end_header") break;
    if (tok == "format") {
      std::string kind, version;
      ls >> kind >> version;
      if (kind != "ascii") parse_fail("only ascii PLY is supported");
      ascii = true;
    } else if (tok == "comment") {
      std::string word;
      ls >> word;
      if (word == "grid") {
        if (!(ls >> grid_rows >> grid_cols) || grid_rows <= 0 || grid_cols <= 0)
          parse_fail("malformed grid comment");
        has_grid = true;
      }
    } else if (tok == "element") {
      std::string name;
      long long count = 0;
      if (!(ls >> name >> count)) parse_fail("malformed element line");
      if (name == "vertex") {
        n_vertices = count;
        in_vertex = true;
      } else {
        if (n_vertices < 0) parse_fail("vertex element must come first");
        in_vertex = false;
      }
    } else if (tok == "property") {
      if (in_vertex) {
        std::string type, name;
        if (!(ls >> type >> name)) parse_fail("malformed property line");
        vertex_props.push_back(name);
      }
    }
  }
  if (!ascii) parse_fail("missing format line");
  if (n_vertices < 0) parse_fail("missing vertex element");
  if (vertex_props.size() < 3 || vertex_props[0] != "x" || vertex_props[1] != "y" ||
      vertex_props[2] != "z")
    parse_fail("vertex properties must start with x y z");
  if (has_grid &&
      static_cast<long long>(grid_rows) * grid_cols != n_vertices)
    parse_fail("grid comment does not match the vertex count");

  PointCloud cloud;
  cloud.points.resize(static_cast<std::size_t>(n_vertices), Vec3::Zero());
  cloud.valid.assign(static_cast<std::size_t>(n_vertices), 1);
  if (has_grid) cloud.grid_shape = std::make_pair(grid_rows, grid_cols);
  for (long long i = 0; i < n_vertices; ++i) {
    next_line();
    const char* p = line.c_str();
    char* end = nullptr;
    double v[3];
    for (int c = 0; c < 3; ++c) {
      v[c] = std::strtod(p, &end);
      if (end == p) parse_fail("expected a coordinate");
      p = end;
    }
    if (std::isfinite(v[0]) && std::isfinite(v[1]) && std::isfinite(v[2]))
      cloud.points[static_cast<std::size_t>(i)] = Vec3(v[0], v[1], v[2]);
    else
      cloud.valid[static_cast<std::size_t>(i)] = 0;
  }
  cloud.check();
  return cloud;
}

inline void write_ply_ascii(const std::string& path, const PointCloud& cloud) {
  std::string out = "ply\nformat ascii 1.0\n";
  if (cloud.organized())
    out += "comment grid " + std::to_string(cloud.grid_shape->first) + " " +
           std::to_string(cloud.grid_shape->second) + "\n";
  out += "element vertex " + std::to_string(cloud.size()) + "\n";
  out += "property double x\nproperty double y\nproperty double z\n";
  out += "end_header\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (cloud.is_valid(i)) {
      const Vec3& p = cloud.points[i];
      out += detail::format_double(p.x()) + " " + detail::format_double(p.y()) +
             " " + detail::format_double(p.z()) + "\n";
    } else {
      out += "nan nan nan\n";
    }
  }
  write_text_file(path, out);
}

inline PointCloud read_cloud_file(const std::string& path, DatasetFormat fmt) {
  return fmt == DatasetFormat::XyzGrid ? read_xyz_grid(path) : read_ply_ascii(path);
}

inline void write_cloud_file(const std::string& path, const PointCloud& cloud,
                             DatasetFormat fmt) {
  if (fmt == DatasetFormat::XyzGrid)
    write_xyz_grid(path, cloud);
  else
    write_ply_ascii(path, cloud);
}

namespace detail {

inline std::vector<std::filesystem::path> sorted_files(
    const std::filesystem::path& dir, const std::string& extension) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name.empty() || name[0] == '.') continue;
    if (entry.path().extension() != extension) continue;
    out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<std::string> sorted_subdirs(const std::filesystem::path& dir) {
  std::vector<std::string> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_directory()) continue;
    const std::string name = entry.path().filename().string();
    if (name.empty() || name[0] == '.') continue;
    out.push_back(name);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Layout: {train/good/*, test/<defect>/*, ground_truth/<defect>/<stem>.pgm}.
/// test/good needs no masks (all-false truth); a defective sample without a
/// mask loads with a warning and is skipped by P-PRO.
inline Dataset load_dataset(const std::string& root, DatasetFormat fmt) {
  namespace fs = std::filesystem;
  const std::string ext = fmt == DatasetFormat::XyzGrid ? ".xyz" : ".ply";
  const fs::path base(root);
  require(fs::is_directory(base / "train" / "good"), ErrorKind::IoError,
          "dataset: missing train/good directory under " + root);

  Dataset ds;
  for (const fs::path& file : detail::sorted_files(base / "train" / "good", ext)) {
    Sample s;
    s.defect = "good";
    s.id = "good/" + file.stem().string();
    s.cloud = read_cloud_file(file.string(), fmt);
    ds.train.push_back(std::move(s));
  }

  for (const std::string& defect : detail::sorted_subdirs(base / "test")) {
    for (const fs::path& file : detail::sorted_files(base / "test" / defect, ext)) {
      Sample s;
      s.defect = defect;
      s.id = defect + "/" + file.stem().string();
      s.cloud = read_cloud_file(file.string(), fmt);
      if (defect == "good") {
        s.has_mask = true;
        s.truth.assign(s.cloud.size(), 0);
      } else {
        const fs::path mask_path =
            base / "ground_truth" / defect / (file.stem().string() + ".pgm");
        if (fs::is_regular_file(mask_path)) {
          const PgmMask mask = read_pgm_mask(mask_path.string());
          if (s.cloud.organized()) {
            require(mask.rows == s.cloud.grid_shape->first &&
                        mask.cols == s.cloud.grid_shape->second,
                    ErrorKind::ShapeMismatch,
                    "sample " + s.id + ": mask size does not match the grid");
          } else {
            require(static_cast<std::size_t>(mask.rows) * mask.cols ==
                        s.cloud.size(),
                    ErrorKind::ShapeMismatch,
                    "sample " + s.id + ": mask size does not match the cloud");
          }
          s.truth = mask.truth;
          s.has_mask = true;
        } else {
          ds.warnings.push_back("sample " + s.id +
                                ": missing ground-truth mask; excluded from P-PRO");
        }
      }
      ds.test.push_back(std::move(s));
    }
  }
  return ds;
}

/// Writes the MVTec-style tree load_dataset reads back. Masks are written
/// for defective organized samples only.
inline void write_dataset(const Dataset& ds, const std::string& root,
                          DatasetFormat fmt = DatasetFormat::XyzGrid) {
  namespace fs = std::filesystem;
  const std::string ext = fmt == DatasetFormat::XyzGrid ? ".xyz" : ".ply";
  const fs::path base(root);
  const auto stem_of = [](const Sample& s) {
    const std::size_t slash = s.id.find('/');
    return slash == std::string::npos ? s.id : s.id.substr(slash + 1);
  };
  fs::create_directories(base / "train" / "good");
  for (const Sample& s : ds.train)
    write_cloud_file((base / "train" / "good" / (stem_of(s) + ext)).string(),
                     s.cloud, fmt);
  for (const Sample& s : ds.test) {
    fs::create_directories(base / "test" / s.defect);
    write_cloud_file((base / "test" / s.defect / (stem_of(s) + ext)).string(),
                     s.cloud, fmt);
    if (s.defect != "good" && s.has_mask && s.cloud.organized()) {
      fs::create_directories(base / "ground_truth" / s.defect);
      write_pgm_mask(
          (base / "ground_truth" / s.defect / (stem_of(s) + ".pgm")).string(),
          s.truth, s.cloud.grid_shape->first, s.cloud.grid_shape->second);
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic suite
// ---------------------------------------------------------------------------

struct SuiteSpec {
  int n_train = 10;
  int n_test_good = 10;
  int n_bump = 5;
  int n_dent = 5;
  int n_hole = 0;
  BaseShape shape = BaseShape::Sphere;
  int n_points = 4096;
  double noise_sigma = 0.002;
  double anomaly_size = 0.03;
  double anomaly_depth = 0.01;
  std::uint64_t seed = 0;

  void check() const {
    require(n_train >= 0 && n_test_good >= 0 && n_bump >= 0 && n_dent >= 0 &&
                n_hole >= 0,
            ErrorKind::InvalidSpec, "suite: counts must be non-negative");
    require(n_train + n_test_good + n_bump + n_dent + n_hole > 0,
            ErrorKind::InvalidSpec, "suite: empty suite");
  }
};

inline SuiteSpec suite_spec_from_kv(const KeyValueConfig& kv) {
  SuiteSpec s;
  s.n_train = static_cast<int>(kv.get_int("suite.n_train", s.n_train));
  s.n_test_good = static_cast<int>(kv.get_int("suite.n_test_good", s.n_test_good));
  s.n_bump = static_cast<int>(kv.get_int("suite.n_bump", s.n_bump));
  s.n_dent = static_cast<int>(kv.get_int("suite.n_dent", s.n_dent));
  s.n_hole = static_cast<int>(kv.get_int("suite.n_hole", s.n_hole));
  s.shape = parse_base_shape(kv.get_string("suite.shape", "sphere"));
  s.n_points = static_cast<int>(kv.get_int("suite.n_points", s.n_points));
  s.noise_sigma = kv.get_double("suite.noise_sigma", s.noise_sigma);
  s.anomaly_size = kv.get_double("suite.anomaly_size", s.anomaly_size);
  s.anomaly_depth = kv.get_double("suite.anomaly_depth", s.anomaly_depth);
  s.seed = kv.get_u64("suite.seed", s.seed);
  s.check();
  return s;
}

/// Deterministic in-memory dataset: per-sample seeds derive from the
/// suite seed and a running counter, so any two suites with the same
/// spec are identical.
inline Dataset make_synthetic_suite(const SuiteSpec& spec) {
  spec.check();
  Dataset ds;
  std::uint64_t counter = 0;
  const auto sample_of = [&](AnomalyKind kind, const std::string& defect,
                             const std::string& stem) {
    SyntheticSpec g;
    g.base_shape = spec.shape;
    g.n_points = spec.n_points;
    g.anomaly = kind;
    if (kind != AnomalyKind::None) {
      g.anomaly_size = spec.anomaly_size;
      g.anomaly_depth = spec.anomaly_depth;
    }
    g.noise_sigma = spec.noise_sigma;
    g.seed = spec.seed + 1000003ULL * (++counter);
    const SyntheticSample made = generate_synthetic(g);
    Sample s;
    s.defect = defect;
    s.id = defect + "/" + stem;
    s.cloud = made.cloud;
    s.has_mask = true;
    s.truth = made.mask.truth;
    return s;
  };
  const auto pad = [](int i) {
    std::string n = std::to_string(i);
    return std::string(n.size() >= 3 ? 0 : 3 - n.size(), '0') + n;
  };
  for (int i = 0; i < spec.n_train; ++i) {
    Sample s = sample_of(AnomalyKind::None, "good", "train_" + pad(i));
    s.has_mask = false;
    s.truth.clear();
    ds.train.push_back(std::move(s));
  }
  for (int i = 0; i < spec.n_test_good; ++i)
    ds.test.push_back(sample_of(AnomalyKind::None, "good", "test_" + pad(i)));
  for (int i = 0; i < spec.n_bump; ++i)
    ds.test.push_back(sample_of(AnomalyKind::Bump, "bump", "bump_" + pad(i)));
  for (int i = 0; i < spec.n_dent; ++i)
    ds.test.push_back(sample_of(AnomalyKind::Dent, "dent", "dent_" + pad(i)));
  for (int i = 0; i < spec.n_hole; ++i)
    ds.test.push_back(sample_of(AnomalyKind::Hole, "hole", "hole_" + pad(i)));
  return ds;
}

// ---------------------------------------------------------------------------
// Per-sample feature extraction
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fn>
auto run_stage(const std::string& id, const char* stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    fail(e.kind(), "sample " + id + " (" + stage + "): " + e.what());
  }
}

}  // namespace detail

struct SampleFeatures {
  PointCloud object;                   // cleaned foreground cloud
  std::vector<std::size_t> index_map;  // object index -> original index
  FeatureMatrix f3d;                   // descriptor block
  FeatureMatrix f2d;                   // fused multi-view block
};

/// remove_background -> fpfh -> render/extract/sample per view -> fuse.
/// Failures are rethrown with the sample id and stage name attached.
inline SampleFeatures extract_sample_features(const Sample& sample,
                                              const PipelineConfig& cfg,
                                              unsigned threads = 1) {
  SampleFeatures out;
  detail::run_stage(sample.id, "preprocess", [&] {
    BackgroundRemoval br = remove_background(sample.cloud, cfg.preprocess);
    out.object = std::move(br.cloud);
    out.index_map = std::move(br.index_map);
    return 0;
  });
  detail::run_stage(sample.id, "fpfh", [&] {
    out.f3d = fpfh(out.object, cfg.fpfh, threads);
    return 0;
  });
  detail::run_stage(sample.id, "multiview", [&] {
    const std::vector<ViewPose> poses =
        make_views(out.object, cfg.n_views, 2.5, cfg.image_rows, cfg.image_cols);
    std::vector<SampledFeatures> sampled;
    sampled.reserve(poses.size());
    for (std::size_t v = 0; v < poses.size(); ++v) {
      const DepthImage zbuf = render_depth(out.object, poses[v]);
      const FeatureMap2D fmap =
          extract_2d(zbuf, cfg.extractor, static_cast<int>(v),
                     static_cast<int>(threads));
      sampled.push_back(sample_point_features(out.object, poses[v], fmap, zbuf,
                                              0.0, threads));
    }
    out.f2d = fuse_views(sampled);
    return 0;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Feature-block calibration and selection
// ---------------------------------------------------------------------------

/// Per-block scale factors equalizing mean row norms over the training
/// set: descriptor rows sum to a fixed mass while 2D responses float, so
/// an uncalibrated concatenation would let one block dominate distances.
struct FeatureScaling {
  double s3d = 1.0;
  double s2d = 1.0;
};

inline FeatureScaling fit_feature_scaling(const std::vector<SampleFeatures>& train) {
  double sum3 = 0.0, sum2 = 0.0;
  std::size_t rows = 0;
  for (const SampleFeatures& sf : train) {
    for (Eigen::Index i = 0; i < sf.f3d.rows(); ++i) sum3 += sf.f3d.row(i).norm();
    for (Eigen::Index i = 0; i < sf.f2d.rows(); ++i) sum2 += sf.f2d.row(i).norm();
    rows += static_cast<std::size_t>(sf.f3d.rows());
  }
  FeatureScaling sc;
  if (rows > 0) {
    const double m3 = sum3 / static_cast<double>(rows);
    const double m2 = sum2 / static_cast<double>(rows);
    if (m3 > 0.0) sc.s3d = 1.0 / m3;
    if (m2 > 0.0) sc.s2d = 1.0 / m2;
  }
  return sc;
}

inline FeatureMatrix select_features(const SampleFeatures& sf, FeatureMode mode,
                                     const FeatureScaling& sc) {
  switch (mode) {
    case FeatureMode::F3d: return sc.s3d * sf.f3d;
    case FeatureMode::F2d: return sc.s2d * sf.f2d;
    case FeatureMode::Fused:
      return concat_features(sc.s3d * sf.f3d, sc.s2d * sf.f2d);
  }
  fail(ErrorKind::InvalidConfig, "unhandled feature mode");
}

// ---------------------------------------------------------------------------
// End-to-end run
// ---------------------------------------------------------------------------

struct SampleOutcome {
  std::string id;
  std::string defect;
  bool has_mask = false;
  AnomalyResult result;
  PointCloud object;
  std::vector<std::size_t> index_map;
  std::vector<std::uint8_t> truth_object;  // ground truth gathered onto the object
};

struct PipelineRun {
  MetricReport report;
  std::vector<SampleOutcome> outcomes;  // test order
  std::vector<std::string> warnings;
};

namespace detail {

struct FittedScorer {
  ScorerKind kind = ScorerKind::Bank;
  MemoryBank bank;
  GraphScorerParams graph;
};

inline SparseRowMatrix sample_adjacency(const PointCloud& object,
                                        const GraphConfig& g, unsigned threads) {
  return normalize_adjacency(build_graph(object, g.k, g.self_loops, threads));
}

}  // namespace detail

/// Runs the full pipeline: train-side feature extraction, block scaling,
/// scorer fitting, test-side scoring, and per-class metrics. Never touches
/// the dataset files (it only ever sees parsed samples).
inline PipelineRun run_pipeline(const PipelineConfig& cfg, const Dataset& ds) {
  cfg.check();
  require(!ds.train.empty(), ErrorKind::EmptyBank,
          "run_pipeline: no nominal training samples");

  PipelineRun run;
  run.warnings = ds.warnings;

  // Training side. Samples in parallel, per-sample work single-threaded:
  // all modules are thread-count invariant, so the partition only moves
  // wall time around.
  std::vector<SampleFeatures> train_sf(ds.train.size());
  parallel_for(ds.train.size(), cfg.threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i)
      train_sf[i] = extract_sample_features(ds.train[i], cfg, 1);
  });
  const FeatureScaling scaling = fit_feature_scaling(train_sf);

  std::vector<FeatureMatrix> train_feats(train_sf.size());
  for (std::size_t i = 0; i < train_sf.size(); ++i)
    train_feats[i] = select_features(train_sf[i], cfg.feature_mode, scaling);

  detail::FittedScorer scorer;
  scorer.kind = cfg.scorer;
  if (cfg.scorer == ScorerKind::Bank) {
    std::vector<std::string> ids;
    ids.reserve(ds.train.size());
    for (const Sample& s : ds.train) ids.push_back(s.id);
    scorer.bank = bank_build(train_feats, cfg.bank_subsample, cfg.seed, ids);
  } else {
    Rng aug(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<GraphTrainInstance> instances;
    instances.reserve(train_sf.size());
    for (std::size_t i = 0; i < train_sf.size(); ++i) {
      GraphTrainInstance inst;
      inst.a_hat = detail::run_stage(ds.train[i].id, "graph", [&] {
        return detail::sample_adjacency(train_sf[i].object, cfg.graph, cfg.threads);
      });
      PseudoAnomaly p = make_pseudo_anomalies(train_feats[i], cfg.pseudo_fraction,
                                              cfg.pseudo_magnitude, aug);
      inst.features = std::move(p.features);
      inst.targets = std::move(p.targets);
      instances.push_back(std::move(inst));
    }
    const GraphScorerParams init = init_graph_scorer(
        static_cast<int>(train_feats.front().cols()), cfg.graph.hidden,
        cfg.graph.layers, cfg.seed);
    scorer.graph =
        train_graph_scorer(init, instances, cfg.train, cfg.threads).params;
  }

  // Test side.
  run.outcomes.resize(ds.test.size());
  parallel_for(ds.test.size(), cfg.threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const Sample& s = ds.test[i];
      SampleFeatures sf = extract_sample_features(s, cfg, 1);
      const FeatureMatrix feats = select_features(sf, cfg.feature_mode, scaling);
      Eigen::VectorXd raw;
      if (scorer.kind == ScorerKind::Bank) {
        raw = bank_score(feats, scorer.bank, 1);
      } else {
        const SparseRowMatrix a_hat = detail::run_stage(s.id, "graph", [&] {
          return detail::sample_adjacency(sf.object, cfg.graph, 1);
        });
        raw = graph_net_forward_perpoint(feats, a_hat, scorer.graph.layers,
                                         scorer.graph.mlp, 1)
                  .scores;
      }
      SampleOutcome& out = run.outcomes[i];
      out.id = s.id;
      out.defect = s.defect;
      out.has_mask = s.has_mask;
      out.result = detail::run_stage(s.id, "detect", [&] {
        return make_result(raw, cfg.tau);
      });
      out.object = std::move(sf.object);
      out.index_map = std::move(sf.index_map);
      if (s.has_mask) {
        out.truth_object.resize(out.index_map.size());
        for (std::size_t j = 0; j < out.index_map.size(); ++j)
          out.truth_object[j] = s.truth[out.index_map[j]];
      }
    }
  });

  // Metrics. Image labels are defect vs good over raw max scores; P-PRO
  // runs per defective masked sample on the object subcloud, regions from
  // mutual k-NN connectivity.
  std::set<std::string> classes;
  for (const SampleOutcome& o : run.outcomes)
    if (o.defect != "good") classes.insert(o.defect);
  require(!classes.empty(), ErrorKind::UndefinedMetric,
          "run_pipeline: no defective classes in the test set");

  std::vector<double> good_scores;
  for (const SampleOutcome& o : run.outcomes)
    if (o.defect == "good") good_scores.push_back(o.result.image_score);
  require(!good_scores.empty(), ErrorKind::UndefinedMetric,
          "run_pipeline: no nominal test samples for I-ROC");

  double sum_iroc = 0.0, sum_ppro = 0.0;
  std::size_t ppro_classes = 0;
  for (const std::string& cls : classes) {
    std::vector<double> scores = good_scores;
    std::vector<std::uint8_t> labels(good_scores.size(), 0);
    double cls_ppro = 0.0;
    std::size_t cls_ppro_n = 0;
    for (const SampleOutcome& o : run.outcomes) {
      if (o.defect != cls) continue;
      scores.push_back(o.result.image_score);
      labels.push_back(1);
      if (!o.has_mask) continue;
      const std::size_t positives = static_cast<std::size_t>(
          std::count(o.truth_object.begin(), o.truth_object.end(), 1));
      if (positives == 0) {
        run.warnings.push_back("sample " + o.id +
                               ": anomaly absent from the object cloud; excluded "
                               "from P-PRO");
        continue;
      }
      if (positives == o.truth_object.size()) {
        run.warnings.push_back("sample " + o.id +
                               ": no nominal points left; excluded from P-PRO");
        continue;
      }
      RegionMask mask;
      mask.truth = o.truth_object;
      mask.regions = connected_components_points(
          o.object, mask.truth, static_cast<std::size_t>(cfg.graph.k));
      const std::span<const double> raw(o.result.raw_scores.data(),
                                        static_cast<std::size_t>(
                                            o.result.raw_scores.size()));
      cls_ppro += p_pro(raw, mask, 0.3, 200, cfg.threads);
      ++cls_ppro_n;
    }
    MetricReport::ClassMetrics m;
    m.i_roc = auroc(std::span<const double>(scores),
                    std::span<const std::uint8_t>(labels));
    if (cls_ppro_n > 0) {
      m.has_p_pro = true;
      m.p_pro = cls_ppro / static_cast<double>(cls_ppro_n);
      sum_ppro += m.p_pro;
      ++ppro_classes;
    }
    sum_iroc += m.i_roc;
    run.report.per_class.emplace_back(cls, m);
  }
  run.report.mean_i_roc = sum_iroc / static_cast<double>(classes.size());
  if (ppro_classes > 0) {
    run.report.has_mean_p_pro = true;
    run.report.mean_p_pro = sum_ppro / static_cast<double>(ppro_classes);
  }
  return run;
}

// ---------------------------------------------------------------------------
// Ablation sweeps
// ---------------------------------------------------------------------------

enum class AblationAxis { NViews, FeatureMode };

inline AblationAxis parse_ablation_axis(const std::string& s) {
  if (s == "n_views") return AblationAxis::NViews;
  if (s == "feature_mode") return AblationAxis::FeatureMode;
  fail(ErrorKind::InvalidConfig,
       "unknown ablation axis '" + s + "' (n_views | feature_mode)");
}

struct AblationRow {
  std::string axis_value;
  double i_roc = 0.0;
  bool has_p_pro = false;
  double p_pro = 0.0;
};

/// One pipeline run per axis value, every run sharing the base seed.
/// n_views sweeps the ten-value protocol {1, 3, 6, ..., 27}; feature_mode
/// sweeps its three settings.
inline std::vector<AblationRow> run_ablation(const PipelineConfig& base,
                                             const Dataset& ds, AblationAxis axis) {
  std::vector<AblationRow> rows;
  const auto run_one = [&](const PipelineConfig& cfg, const std::string& value) {
    const PipelineRun run = run_pipeline(cfg, ds);
    AblationRow row;
    row.axis_value = value;
    row.i_roc = run.report.mean_i_roc;
    row.has_p_pro = run.report.has_mean_p_pro;
    row.p_pro = run.report.mean_p_pro;
    rows.push_back(row);
  };
  if (axis == AblationAxis::NViews) {
    for (int n : {1, 3, 6, 9, 12, 15, 18, 21, 24, 27}) {
      PipelineConfig cfg = base;
      cfg.n_views = n;
      run_one(cfg, std::to_string(n));
    }
  } else {
    for (FeatureMode m : {FeatureMode::F3d, FeatureMode::F2d, FeatureMode::Fused}) {
      PipelineConfig cfg = base;
      cfg.feature_mode = m;
      run_one(cfg, to_string(m));
    }
  }
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "axis_value,i_roc,p_pro\n";
  for (const AblationRow& r : rows) {
    out += r.axis_value + "," + detail::format_double(r.i_roc) + ",";
    out += r.has_p_pro ? detail::format_double(r.p_pro) : std::string("nan");
    out += "\n";
  }
  return out;
}

}  // namespace votegrid
