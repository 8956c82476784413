// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "votegrid/error.hpp"
#include "votegrid/multiview.hpp"
#include "votegrid/parallel.hpp"
#include "votegrid/rng.hpp"

namespace votegrid {

enum class ExtractorKind { BuiltinPyramid, ExternalFile };

/// Configuration for the per-view 2D feature extractor.
struct Extractor2DConfig {
  ExtractorKind kind = ExtractorKind::BuiltinPyramid;
  int channels = 64;       // builtin: output feature dimension
  int levels = 3;          // builtin: conv/relu/pool stages; output stride 2^levels
  std::uint64_t seed = 0;  // builtin: fixes the random projection weights
  std::string path;        // external: VGF1 feature container

  void check() const {
    if (kind == ExtractorKind::BuiltinPyramid) {
      require(channels > 0, ErrorKind::InvalidConfig, "extractor channels must be positive");
      require(levels > 0, ErrorKind::InvalidConfig, "extractor levels must be positive");
    } else {
      require(!path.empty(), ErrorKind::InvalidConfig,
              "external extractor requires a feature file path");
    }
  }
};

namespace detail {

/// 3x3 convolution, zero padding, "same" spatial size, no bias.
/// Weight layout: w[((ky*3 + kx)*cin + ci)*cout + co], kernel offsets
/// ky,kx in {0,1,2} addressing input row r+ky-1, col c+kx-1.
inline FeatureMap2D conv3x3_same(const FeatureMap2D& in, const std::vector<double>& w,
                                 int cout, int threads = 1) {
  const int cin = in.channels;
  require(static_cast<std::size_t>(9) * cin * cout == w.size(), ErrorKind::ShapeMismatch,
          "conv3x3 weight count mismatch");
  FeatureMap2D out = FeatureMap2D::zeros(in.rows, in.cols, cout);
  parallel_for(static_cast<std::size_t>(in.rows), static_cast<unsigned>(threads),
               [&](std::size_t row_begin, std::size_t row_end) {
    for (std::size_t r_ = row_begin; r_ < row_end; ++r_) {
      const int r = static_cast<int>(r_);
      for (int c = 0; c < in.cols; ++c) {
        double* dst = &out.at(r, c, 0);
        for (int ky = 0; ky < 3; ++ky) {
          const int rr = r + ky - 1;
          if (rr < 0 || rr >= in.rows) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int cc = c + kx - 1;
            if (cc < 0 || cc >= in.cols) continue;
            const double* src = &in.v[(static_cast<std::size_t>(rr) * in.cols + cc) * cin];
            const double* wk = &w[(static_cast<std::size_t>(ky) * 3 + kx) * cin * cout];
            for (int ci = 0; ci < cin; ++ci) {
              const double f = src[ci];
              if (f == 0.0) continue;
              const double* wc = wk + static_cast<std::size_t>(ci) * cout;
              for (int co = 0; co < cout; ++co) dst[co] += f * wc[co];
            }
          }
        }
      }
    }
  });
  return out;
}

inline void relu_inplace(FeatureMap2D& m) {
  for (double& x : m.v) x = std::max(0.0, x);
}

/// 2x average pooling; spatial dims must be even.
inline FeatureMap2D avgpool2x2(const FeatureMap2D& in) {
  require(in.rows % 2 == 0 && in.cols % 2 == 0, ErrorKind::InvalidArgument,
          "avgpool2x2 requires even spatial dimensions");
  FeatureMap2D out = FeatureMap2D::zeros(in.rows / 2, in.cols / 2, in.channels);
  for (int r = 0; r < out.rows; ++r)
    for (int c = 0; c < out.cols; ++c)
      for (int ch = 0; ch < in.channels; ++ch)
        out.at(r, c, ch) = 0.25 * (in.at(2 * r, 2 * c, ch) + in.at(2 * r, 2 * c + 1, ch) +
                                   in.at(2 * r + 1, 2 * c, ch) + in.at(2 * r + 1, 2 * c + 1, ch));
  return out;
}

/// Fixed weights for every pyramid level, drawn in a definite order from the
/// config seed. Scaled by 1/sqrt(fan_in) so stage outputs keep unit variance.
inline std::vector<std::vector<double>> pyramid_weights(const Extractor2DConfig& cfg) {
  Rng rng(cfg.seed);
  std::vector<std::vector<double>> levels;
  levels.reserve(static_cast<std::size_t>(cfg.levels));
  int cin = 1;
  for (int l = 0; l < cfg.levels; ++l) {
    const double scale = 1.0 / std::sqrt(9.0 * cin);
    std::vector<double> w(static_cast<std::size_t>(9) * cin * cfg.channels);
    for (double& x : w) x = rng.normal() * scale;
    levels.push_back(std::move(w));
    cin = cfg.channels;
  }
  return levels;
}

/// Runs the conv/relu/pool stack on an already-normalized single-channel
/// field. Positively homogeneous: every stage is bias-free.
inline FeatureMap2D pyramid_forward(const FeatureMap2D& field, const Extractor2DConfig& cfg,
                                    int threads = 1) {
  require(field.channels == 1, ErrorKind::ShapeMismatch, "pyramid input must be single-channel");
  const int stride = 1 << cfg.levels;
  require(field.rows % stride == 0 && field.cols % stride == 0, ErrorKind::InvalidArgument,
          "image dimensions must be divisible by 2^levels");
  const auto weights = pyramid_weights(cfg);
  FeatureMap2D cur = field;
  for (int l = 0; l < cfg.levels; ++l) {
    cur = conv3x3_same(cur, weights[static_cast<std::size_t>(l)], cfg.channels, threads);
    relu_inplace(cur);
    cur = avgpool2x2(cur);
  }
  return cur;
}

/// Depth rescaled to [0,1] over finite pixels; empty pixels map to 0.
/// A constant finite depth also maps to 0 (span is degenerate).
inline FeatureMap2D normalize_depth(const DepthImage& image) {
  FeatureMap2D field = FeatureMap2D::zeros(image.rows, image.cols, 1);
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (double d : image.depth) {
    if (!std::isfinite(d)) continue;
    lo = std::min(lo, d);
    hi = std::max(hi, d);
  }
  if (!(hi > lo)) return field;
  const double inv = 1.0 / (hi - lo);
  for (std::size_t i = 0; i < image.depth.size(); ++i) {
    const double d = image.depth[i];
    if (std::isfinite(d)) field.v[i] = (d - lo) * inv;
  }
  return field;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// External feature container (VGF1)
// ---------------------------------------------------------------------------

/// Per-sample feature container: one H'xW'xd field per view.
struct ExternalFeatures {
  std::vector<FeatureMap2D> views;
};

namespace detail {

inline std::uint32_t read_u32le(std::FILE* f, const std::string& path) {
  unsigned char b[4];
  require(std::fread(b, 1, 4, f) == 4, ErrorKind::ParseError,
          "truncated feature file header: " + path);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_u32le(std::FILE* f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  std::fwrite(b, 1, 4, f);
}

inline float f32_from_le(const unsigned char* b) {
  std::uint32_t u = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                    (static_cast<std::uint32_t>(b[2]) << 16) |
                    (static_cast<std::uint32_t>(b[3]) << 24);
  float f;
  static_assert(sizeof(f) == sizeof(u));
  std::memcpy(&f, &u, sizeof(f));
  return f;
}

inline void f32_to_le(float f, unsigned char* b) {
  std::uint32_t u;
  std::memcpy(&u, &f, sizeof(u));
  b[0] = static_cast<unsigned char>(u & 0xff);
  b[1] = static_cast<unsigned char>((u >> 8) & 0xff);
  b[2] = static_cast<unsigned char>((u >> 16) & 0xff);
  b[3] = static_cast<unsigned char>((u >> 24) & 0xff);
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace detail

/// Reads a VGF1 container: header {magic "VGF1", n_views, H', W', d as
/// little-endian u32}, then n_views contiguous row-major float32 fields
/// (row outer, column middle, channel inner).
inline ExternalFeatures read_feature_file(const std::string& path) {
  std::unique_ptr<std::FILE, detail::FileCloser> f(std::fopen(path.c_str(), "rb"));
  require(f != nullptr, ErrorKind::IoError, "cannot open feature file: " + path);
  char magic[4];
  require(std::fread(magic, 1, 4, f.get()) == 4 && std::memcmp(magic, "VGF1", 4) == 0,
          ErrorKind::ParseError, "bad feature file magic: " + path);
  const std::uint32_t n_views = detail::read_u32le(f.get(), path);
  const std::uint32_t rows = detail::read_u32le(f.get(), path);
  const std::uint32_t cols = detail::read_u32le(f.get(), path);
  const std::uint32_t chans = detail::read_u32le(f.get(), path);
  require(n_views > 0 && rows > 0 && cols > 0 && chans > 0, ErrorKind::ParseError,
          "degenerate feature file dimensions: " + path);
  const std::size_t per_view = static_cast<std::size_t>(rows) * cols * chans;
  require(per_view <= (std::size_t{1} << 31), ErrorKind::ParseError,
          "feature field too large: " + path);
  ExternalFeatures out;
  out.views.reserve(n_views);
  std::vector<unsigned char> buf(per_view * 4);
  for (std::uint32_t v = 0; v < n_views; ++v) {
    require(std::fread(buf.data(), 1, buf.size(), f.get()) == buf.size(), ErrorKind::ParseError,
            "truncated feature file payload: " + path);
    FeatureMap2D m = FeatureMap2D::zeros(static_cast<int>(rows), static_cast<int>(cols),
                                         static_cast<int>(chans));
    for (std::size_t i = 0; i < per_view; ++i)
      m.v[i] = static_cast<double>(detail::f32_from_le(&buf[i * 4]));
    out.views.push_back(std::move(m));
  }
  return out;
}

/// Writes a VGF1 container; all views must share one shape.
inline void write_feature_file(const std::string& path, const std::vector<FeatureMap2D>& views) {
  require(!views.empty(), ErrorKind::InvalidArgument, "feature file needs at least one view");
  const FeatureMap2D& first = views.front();
  for (const FeatureMap2D& m : views)
    require(m.rows == first.rows && m.cols == first.cols && m.channels == first.channels,
            ErrorKind::ShapeMismatch, "feature views must share one shape");
  std::unique_ptr<std::FILE, detail::FileCloser> f(std::fopen(path.c_str(), "wb"));
  require(f != nullptr, ErrorKind::IoError, "cannot write feature file: " + path);
  std::fwrite("VGF1", 1, 4, f.get());
  detail::write_u32le(f.get(), static_cast<std::uint32_t>(views.size()));
  detail::write_u32le(f.get(), static_cast<std::uint32_t>(first.rows));
  detail::write_u32le(f.get(), static_cast<std::uint32_t>(first.cols));
  detail::write_u32le(f.get(), static_cast<std::uint32_t>(first.channels));
  std::vector<unsigned char> buf;
  for (const FeatureMap2D& m : views) {
    buf.resize(m.v.size() * 4);
    for (std::size_t i = 0; i < m.v.size(); ++i)
      detail::f32_to_le(static_cast<float>(m.v[i]), &buf[i * 4]);
    require(std::fwrite(buf.data(), 1, buf.size(), f.get()) == buf.size(), ErrorKind::IoError,
            "short write to feature file: " + path);
  }
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

/// Produces the per-view 2D feature field for a rendered depth image.
///
/// Builtin path: depth normalized to [0,1] over finite pixels, then `levels`
/// stages of [3x3 seeded conv, max(0,.), 2x average pool]; output spatial
/// size is the input divided by 2^levels, d = cfg.channels. External path:
/// returns field `view_index` from the VGF1 container at cfg.path after
/// checking it tiles the image evenly.
inline FeatureMap2D extract_2d(const DepthImage& image, const Extractor2DConfig& cfg,
                               int view_index = 0, int threads = 1) {
  cfg.check();
  require(image.rows > 0 && image.cols > 0, ErrorKind::InvalidArgument,
          "depth image must be non-degenerate");
  require(image.depth.size() == static_cast<std::size_t>(image.rows) * image.cols,
          ErrorKind::ShapeMismatch, "depth image buffer does not match its dimensions");
  if (cfg.kind == ExtractorKind::BuiltinPyramid) {
    return detail::pyramid_forward(detail::normalize_depth(image), cfg, threads);
  }
  ExternalFeatures ext = read_feature_file(cfg.path);
  require(view_index >= 0 && static_cast<std::size_t>(view_index) < ext.views.size(),
          ErrorKind::InvalidArgument, "view index out of range for feature file");
  FeatureMap2D m = std::move(ext.views[static_cast<std::size_t>(view_index)]);
  require(image.rows % m.rows == 0 && image.cols % m.cols == 0, ErrorKind::ShapeMismatch,
          "external feature field does not tile the rendered image");
  return m;
}

}  // namespace votegrid
