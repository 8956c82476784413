// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0
//
// File formats: organized clouds as xyz-grid text, masks and depth images
// as PGM, network parameters as the VGK1 binary container, and JSON
// reports. Every writer is deterministic so identical runs produce
// byte-identical files.

#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "votegrid/core.hpp"
#include "votegrid/detect.hpp"
#include "votegrid/error.hpp"
#include "votegrid/feat2d.hpp"
#include "votegrid/graph_net.hpp"
#include "votegrid/multiview.hpp"
#include "votegrid/sparse_conv.hpp"

namespace votegrid {

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// xyz-grid text format
// ---------------------------------------------------------------------------

/// Writes an organized cloud as "W H" then W*H row-major "x y z" lines.
/// Invalid entries become "nan nan nan".
inline void write_xyz_grid(const std::string& path, const PointCloud& cloud) {
  require(cloud.organized(), ErrorKind::RequiresOrganized,
          "write_xyz_grid: cloud must be organized");
  cloud.check();
  std::unique_ptr<std::FILE, detail::FileCloser> f(std::fopen(path.c_str(), "wb"));
  require(f != nullptr, ErrorKind::IoError, "cannot write cloud file: " + path);
  const auto [rows, cols] = *cloud.grid_shape;
  std::string out = std::to_string(cols) + " " + std::to_string(rows) + "\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (!cloud.is_valid(i)) {
      out += "nan nan nan\n";
      continue;
    }
    out += detail::format_double(cloud.points[i].x()) + " " +
           detail::format_double(cloud.points[i].y()) + " " +
           detail::format_double(cloud.points[i].z()) + "\n";
  }
  require(std::fwrite(out.data(), 1, out.size(), f.get()) == out.size(), ErrorKind::IoError,
          "short write to cloud file: " + path);
}

/// Reads the xyz-grid format. Any non-finite coordinate marks the entry
/// invalid; invalid entries are stored as the origin placeholder.
inline PointCloud read_xyz_grid(const std::string& path) {
  std::unique_ptr<std::FILE, detail::FileCloser> f(std::fopen(path.c_str(), "rb"));
  require(f != nullptr, ErrorKind::IoError, "cannot open cloud file: " + path);

  std::string text;
  char chunk[65536];
  std::size_t got;
  while ((got = std::fread(chunk, 1, sizeof(chunk), f.get())) > 0) text.append(chunk, got);

  std::size_t pos = 0;
  std::size_t line_no = 0;
  const auto next_line = [&](std::string& line) {
    if (pos >= text.size()) return false;
    const std::size_t end = text.find('\n', pos);
    line = text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    pos = end == std::string::npos ? text.size() : end + 1;
    ++line_no;
    return true;
  };
  const auto parse_fail = [&](const std::string& what) {
    fail(ErrorKind::ParseError,
         path + ":" + std::to_string(line_no) + ": " + what);
  };

  std::string line;
  require(next_line(line), ErrorKind::ParseError, path + ": empty cloud file");
  long w = 0, h = 0;
  if (std::sscanf(line.c_str(), "%ld %ld", &w, &h) != 2 || w <= 0 || h <= 0)
    parse_fail("expected header \"W H\" with positive integers");

  PointCloud cloud;
  cloud.grid_shape = {static_cast<int>(h), static_cast<int>(w)};
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  cloud.points.reserve(n);
  cloud.valid.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!next_line(line)) {
      ++line_no;
      parse_fail("expected " + std::to_string(n) + " point lines, file ended early");
    }
    const char* s = line.c_str();
    char* endp = nullptr;
    double v[3];
    for (int k = 0; k < 3; ++k) {
      v[k] = std::strtod(s, &endp);
      if (endp == s) parse_fail("expected three coordinates \"x y z\"");
      s = endp;
    }
    while (*s != '\0' && std::isspace(static_cast<unsigned char>(*s))) ++s;
    if (*s != '\0') parse_fail("trailing characters after three coordinates");
    const bool ok = std::isfinite(v[0]) && std::isfinite(v[1]) && std::isfinite(v[2]);
    cloud.points.push_back(ok ? Vec3(v[0], v[1], v[2]) : Vec3::Zero());
    cloud.valid.push_back(ok ? 1 : 0);
  }
  while (next_line(line)) {
    for (char ch : line)
      if (!std::isspace(static_cast<unsigned char>(ch)))
        parse_fail("unexpected content after the last point line");
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// PGM images
// ---------------------------------------------------------------------------

/// Binary PGM, maxval 255; anomalous pixels are 255, good pixels 0.
inline void write_pgm_mask(const std::string& path, const std::vector<std::uint8_t>& truth,
                           int rows, int cols) {
  require(rows > 0 && cols > 0 &&
              truth.size() == static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols),
          ErrorKind::ShapeMismatch, "write_pgm_mask: mask does not match its dimensions");
  std::unique_ptr<std::FILE, detail::FileCloser> f(std::fopen(path.c_str(), "wb"));
  require(f != nullptr, ErrorKind::IoError, "cannot write mask file: " + path);
  const std::string head = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  std::fwrite(head.data(), 1, head.size(), f.get());
  std::vector<std::uint8_t> bytes(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i) bytes[i] = truth[i] ? 255 : 0;
  require(std::fwrite(bytes.data(), 1, bytes.size(), f.get()) == bytes.size(), ErrorKind::IoError,
          "short write to mask file: " + path);
}

namespace detail {

/// PGM header tokens, skipping whitespace and '#' comment lines.
inline std::string pgm_token(const std::string& text, std::size_t& pos, const std::string& path) {
  while (pos < text.size()) {
    if (std::isspace(static_cast<unsigned char>(text[pos]))) {
      ++pos;
    } else if (text[pos] == '#') {
      while (pos < text.size() && text[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  const std::size_t start = pos;
  while (pos < text.size() && !std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
  require(pos > start, ErrorKind::ParseError, path + ": truncated PGM header");
  return text.substr(start, pos - start);
}

}  // namespace detail

struct PgmMask {
  int rows = 0, cols = 0;
  std::vector<std::uint8_t> truth;  // 1 = anomalous
};

/// Reads a P5 or P2 mask with maxval 255; every pixel must be 0 or 255.
inline PgmMask read_pgm_mask(const std::string& path) {
  std::unique_ptr<std::FILE, detail::FileCloser> f(std::fopen(path.c_str(), "rb"));
  require(f != nullptr, ErrorKind::IoError, "cannot open mask file: " + path);
  std::string text;
  char chunk[65536];
  std::size_t got;
  while ((got = std::fread(chunk, 1, sizeof(chunk), f.get())) > 0) text.append(chunk, got);

  std::size_t pos = 0;
  const std::string magic = detail::pgm_token(text, pos, path);
  require(magic == "P5" || magic == "P2", ErrorKind::ParseError,
          path + ": expected a P5 or P2 PGM mask");
  const auto to_int = [&](const std::string& tok) {
    try {
      return std::stol(tok);
    } catch (...) {
      fail(ErrorKind::ParseError, path + ": bad integer in PGM header");
    }
  };
  PgmMask mask;
  mask.cols = static_cast<int>(to_int(detail::pgm_token(text, pos, path)));
  mask.rows = static_cast<int>(to_int(detail::pgm_token(text, pos, path)));
  const long maxval = to_int(detail::pgm_token(text, pos, path));
  require(mask.cols > 0 && mask.rows > 0, ErrorKind::ParseError,
          path + ": non-positive PGM dimensions");
  require(maxval == 255, ErrorKind::ParseError, path + ": mask maxval must be 255");
  const std::size_t n = static_cast<std::size_t>(mask.rows) * mask.cols;
  mask.truth.resize(n);
  if (magic == "P5") {
    require(pos < text.size(), ErrorKind::ParseError, path + ": missing PGM payload");
    ++pos;  // single whitespace byte after maxval
    require(text.size() - pos >= n, ErrorKind::ParseError, path + ": truncated PGM payload");
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint8_t v = static_cast<std::uint8_t>(text[pos + i]);
      require(v == 0 || v == 255, ErrorKind::ParseError,
              path + ": mask pixels must be 0 or 255");
      mask.truth[i] = v ? 1 : 0;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const long v = to_int(detail::pgm_token(text, pos, path));
      require(v == 0 || v == 255, ErrorKind::ParseError,
              path + ": mask pixels must be 0 or 255");
      mask.truth[i] = v ? 1 : 0;
    }
  }
  return mask;
}

/// 16-bit PGM with depth quantized to millimeters (big-endian samples, as
/// the format requires). Empty pixels write 0.
inline void write_pgm_depth16(const std::string& path, const DepthImage& image) {
  require(image.rows > 0 && image.cols > 0, ErrorKind::InvalidArgument,
          "write_pgm_depth16: degenerate image");
  std::unique_ptr<std::FILE, detail::FileCloser> f(std::fopen(path.c_str(), "wb"));
  require(f != nullptr, ErrorKind::IoError, "cannot write depth file: " + path);
  const std::string head =
      "P5\n" + std::to_string(image.cols) + " " + std::to_string(image.rows) + "\n65535\n";
  std::fwrite(head.data(), 1, head.size(), f.get());
  std::vector<std::uint8_t> bytes(image.depth.size() * 2);
  for (std::size_t i = 0; i < image.depth.size(); ++i) {
    const double d = image.depth[i];
    long long mm = 0;
    if (std::isfinite(d)) mm = std::llround(d * 1000.0);
    const std::uint16_t q =
        static_cast<std::uint16_t>(std::clamp<long long>(mm, 0, 65535));
    bytes[2 * i] = static_cast<std::uint8_t>(q >> 8);
    bytes[2 * i + 1] = static_cast<std::uint8_t>(q & 0xff);
  }
  require(std::fwrite(bytes.data(), 1, bytes.size(), f.get()) == bytes.size(), ErrorKind::IoError,
          "short write to depth file: " + path);
}

// ---------------------------------------------------------------------------
// VGK1 parameter container
// ---------------------------------------------------------------------------

/// Every trainable parameter set, in a fixed order: sparse conv kernels,
/// then graph layers, then MLP layers.
struct NetParams {
  std::vector<ConvKernel3D> conv;
  std::vector<GraphLayerParams> graph;
  std::vector<MlpLayer> mlp;
};

namespace detail {

inline void write_f32_block(std::FILE* f, const double* data, std::size_t n,
                            const std::string& path) {
  std::vector<unsigned char> buf(n * 4);
  for (std::size_t i = 0; i < n; ++i) f32_to_le(static_cast<float>(data[i]), &buf[i * 4]);
  require(std::fwrite(buf.data(), 1, buf.size(), f) == buf.size(), ErrorKind::IoError,
          "short write to parameter file: " + path);
}

inline void read_f32_block(std::FILE* f, double* data, std::size_t n, const std::string& path) {
  std::vector<unsigned char> buf(n * 4);
  require(std::fread(buf.data(), 1, buf.size(), f) == buf.size(), ErrorKind::ParseError,
          "truncated parameter file: " + path);
  for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<double>(f32_from_le(&buf[i * 4]));
}

}  // namespace detail

/// Writes the VGK1 container: magic, layer count, then per layer a type
/// tag, shape words, and little-endian float32 payload. Tags: 1 = 3D conv
/// kernel (kx,ky,kz,cin,cout; weights then bias), 2 = graph layer
/// (d_in,d_out,has_bias; row-major weight then optional bias), 3 = MLP
/// layer (d_in,d_out; row-major weight then bias).
inline void write_params(const std::string& path, const NetParams& params) {
  std::unique_ptr<std::FILE, detail::FileCloser> f(std::fopen(path.c_str(), "wb"));
  require(f != nullptr, ErrorKind::IoError, "cannot write parameter file: " + path);
  std::fwrite("VGK1", 1, 4, f.get());
  detail::write_u32le(f.get(), static_cast<std::uint32_t>(params.conv.size() +
                                                          params.graph.size() +
                                                          params.mlp.size()));
  for (const ConvKernel3D& k : params.conv) {
    detail::write_u32le(f.get(), 1);
    for (int v : {k.kx, k.ky, k.kz, k.cin, k.cout})
      detail::write_u32le(f.get(), static_cast<std::uint32_t>(v));
    detail::write_f32_block(f.get(), k.w.data(), k.w.size(), path);
    detail::write_f32_block(f.get(), k.bias.data(), k.bias.size(), path);
  }
  for (const GraphLayerParams& g : params.graph) {
    detail::write_u32le(f.get(), 2);
    detail::write_u32le(f.get(), static_cast<std::uint32_t>(g.weight.rows()));
    detail::write_u32le(f.get(), static_cast<std::uint32_t>(g.weight.cols()));
    detail::write_u32le(f.get(), g.has_bias ? 1 : 0);
    FeatureMatrix wt = g.weight.transpose();  // row-major on disk
    detail::write_f32_block(f.get(), wt.data(), static_cast<std::size_t>(wt.size()), path);
    if (g.has_bias)
      detail::write_f32_block(f.get(), g.bias.data(), static_cast<std::size_t>(g.bias.size()),
                              path);
  }
  for (const MlpLayer& m : params.mlp) {
    detail::write_u32le(f.get(), 3);
    detail::write_u32le(f.get(), static_cast<std::uint32_t>(m.weight.rows()));
    detail::write_u32le(f.get(), static_cast<std::uint32_t>(m.weight.cols()));
    FeatureMatrix wt = m.weight.transpose();
    detail::write_f32_block(f.get(), wt.data(), static_cast<std::size_t>(wt.size()), path);
    detail::write_f32_block(f.get(), m.bias.data(), static_cast<std::size_t>(m.bias.size()),
                            path);
  }
}

inline NetParams read_params(const std::string& path) {
  std::unique_ptr<std::FILE, detail::FileCloser> f(std::fopen(path.c_str(), "rb"));
  require(f != nullptr, ErrorKind::IoError, "cannot open parameter file: " + path);
  char magic[4];
  require(std::fread(magic, 1, 4, f.get()) == 4 && std::memcmp(magic, "VGK1", 4) == 0,
          ErrorKind::ParseError, "bad parameter file magic: " + path);
  const std::uint32_t count = detail::read_u32le(f.get(), path);
  NetParams params;
  for (std::uint32_t l = 0; l < count; ++l) {
    const std::uint32_t tag = detail::read_u32le(f.get(), path);
    if (tag == 1) {
      int shape[5];
      for (int& v : shape) {
        v = static_cast<int>(detail::read_u32le(f.get(), path));
        require(v > 0, ErrorKind::ParseError, "bad kernel shape in parameter file: " + path);
      }
      ConvKernel3D k = ConvKernel3D::zeros(shape[0], shape[1], shape[2], shape[3], shape[4]);
      detail::read_f32_block(f.get(), k.w.data(), k.w.size(), path);
      detail::read_f32_block(f.get(), k.bias.data(), k.bias.size(), path);
      params.conv.push_back(std::move(k));
    } else if (tag == 2) {
      const std::uint32_t din = detail::read_u32le(f.get(), path);
      const std::uint32_t dout = detail::read_u32le(f.get(), path);
      const std::uint32_t has_bias = detail::read_u32le(f.get(), path);
      require(din > 0 && dout > 0 && has_bias <= 1, ErrorKind::ParseError,
              "bad graph layer shape in parameter file: " + path);
      GraphLayerParams g;
      FeatureMatrix wt(dout, din);
      detail::read_f32_block(f.get(), wt.data(), static_cast<std::size_t>(wt.size()), path);
      g.weight = wt.transpose();
      g.has_bias = has_bias != 0;
      if (g.has_bias) {
        g.bias.resize(dout);
        detail::read_f32_block(f.get(), g.bias.data(), dout, path);
      }
      params.graph.push_back(std::move(g));
    } else if (tag == 3) {
      const std::uint32_t din = detail::read_u32le(f.get(), path);
      const std::uint32_t dout = detail::read_u32le(f.get(), path);
      require(din > 0 && dout > 0, ErrorKind::ParseError,
              "bad mlp layer shape in parameter file: " + path);
      MlpLayer m;
      FeatureMatrix wt(dout, din);
      detail::read_f32_block(f.get(), wt.data(), static_cast<std::size_t>(wt.size()), path);
      m.weight = wt.transpose();
      m.bias.resize(dout);
      detail::read_f32_block(f.get(), m.bias.data(), dout, path);
      params.mlp.push_back(std::move(m));
    } else {
      fail(ErrorKind::ParseError, "unknown layer tag in parameter file: " + path);
    }
  }
  return params;
}

// ---------------------------------------------------------------------------
// JSON reports
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json result_to_json(const std::string& sample_id,
                                             const AnomalyResult& result) {
  nlohmann::ordered_json j;
  j["sample_id"] = sample_id;
  j["image_score"] = result.image_score;
  j["tau"] = result.threshold;
  j["scores"] = std::vector<double>(result.norm_scores.data(),
                                    result.norm_scores.data() + result.norm_scores.size());
  j["anomalies"] = result.anomaly_set;
  return j;
}

/// Per-defect-class metrics plus their means. Classes without usable
/// ground-truth masks carry a null p_pro.
struct MetricReport {
  struct ClassMetrics {
    double i_roc = 0.0;
    bool has_p_pro = false;
    double p_pro = 0.0;
  };
  std::vector<std::pair<std::string, ClassMetrics>> per_class;  // sorted by class
  double mean_i_roc = 0.0;
  bool has_mean_p_pro = false;
  double mean_p_pro = 0.0;
};

inline nlohmann::ordered_json report_to_json(const MetricReport& report) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json classes = nlohmann::ordered_json::object();
  for (const auto& [name, m] : report.per_class) {
    nlohmann::ordered_json c;
    c["i_roc"] = m.i_roc;
    if (m.has_p_pro)
      c["p_pro"] = m.p_pro;
    else
      c["p_pro"] = nullptr;
    classes[name] = c;
  }
  j["per_class"] = classes;
  j["mean_i_roc"] = report.mean_i_roc;
  if (report.has_mean_p_pro)
    j["mean_p_pro"] = report.mean_p_pro;
  else
    j["mean_p_pro"] = nullptr;
  return j;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::unique_ptr<std::FILE, detail::FileCloser> f(std::fopen(path.c_str(), "wb"));
  require(f != nullptr, ErrorKind::IoError, "cannot write file: " + path);
  require(std::fwrite(content.data(), 1, content.size(), f.get()) == content.size(),
          ErrorKind::IoError, "short write: " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::unique_ptr<std::FILE, detail::FileCloser> f(std::fopen(path.c_str(), "rb"));
  require(f != nullptr, ErrorKind::IoError, "cannot open file: " + path);
  std::string text;
  char chunk[65536];
  std::size_t got;
  while ((got = std::fread(chunk, 1, sizeof(chunk), f.get())) > 0) text.append(chunk, got);
  return text;
}

}  // namespace votegrid
