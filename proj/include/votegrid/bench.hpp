// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0
//
// Occupancy benchmark for the voting convolution. Random grids are drawn
// at each (size, occupancy) pair and both the voting path and the dense
// 6-loop oracle are timed on the same kernel, so the CSV directly exposes
// how cost scales with occupied cells rather than total cells.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include "votegrid/error.hpp"
#include "votegrid/io.hpp"
#include "votegrid/rng.hpp"
#include "votegrid/sparse_conv.hpp"

namespace votegrid {

struct BenchConfig {
  std::vector<int> grid_sizes{16, 32, 64};
  std::vector<double> occupancies{0.01, 0.10};
  int kernel = 3;
  int c_in = 1;
  int c_out = 1;
  int repeats = 5;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void check() const {
    require(!grid_sizes.empty() && !occupancies.empty(),
            ErrorKind::InvalidConfig, "bench: empty size or occupancy list");
    for (int s : grid_sizes)
      require(s >= 1 && s <= 256, ErrorKind::InvalidConfig,
              "bench: grid size must be in [1, 256]");
    for (double o : occupancies)
      require(o > 0.0 && o <= 1.0, ErrorKind::InvalidConfig,
              "bench: occupancy must be in (0, 1]");
    require(kernel >= 1 && kernel % 2 == 1, ErrorKind::InvalidConfig,
            "bench: kernel extent must be odd positive");
    require(c_in >= 1 && c_out >= 1, ErrorKind::InvalidConfig,
            "bench: channel counts must be positive");
    require(repeats >= 1, ErrorKind::InvalidConfig,
            "bench: repeats must be positive");
  }
};

struct BenchRow {
  int size = 0;
  double occupancy = 0.0;
  std::uint64_t occupied = 0;  // drawn cell count (not a CSV column)
  std::uint64_t votes = 0;
  double voting_time = 0.0;  // seconds, median of repeats
  double dense_time = 0.0;   // seconds, median of repeats
};

/// Number of cells a (size, occupancy) row draws: occupancy rounds through
/// the cell count, so vote ratios track occupancy ratios only up to this
/// integer rounding.
inline std::uint64_t bench_cell_count(int size, double occupancy) {
  const auto total = static_cast<std::uint64_t>(size) * size * size;
  const auto m = static_cast<std::uint64_t>(
      std::llround(occupancy * static_cast<double>(total)));
  return std::min(m, total);
}

/// Random grid with exactly bench_cell_count(size, occupancy) distinct
/// cells inside [0, size)^3 and nonzero channel values.
inline SparseVoxelGrid make_bench_grid(int size, double occupancy, int channels,
                                       std::uint64_t seed) {
  const auto total = static_cast<std::uint64_t>(size) * size * size;
  const std::uint64_t m = bench_cell_count(size, occupancy);
  Rng rng(seed);

  // Rejection-sample whichever of {occupied, empty} is the smaller set.
  const bool invert = m > total / 2;
  const std::uint64_t draw = invert ? total - m : m;
  std::unordered_set<std::uint64_t> picked;
  picked.reserve(static_cast<std::size_t>(draw) * 2 + 1);
  while (picked.size() < draw) picked.insert(rng.uniform_index(total));

  SparseVoxelGrid g;
  g.channels = channels;
  g.cell_size = 1.0;
  const auto insert_cell = [&](std::uint64_t lin) {
    const int z = static_cast<int>(lin % static_cast<std::uint64_t>(size));
    const std::uint64_t rest = lin / static_cast<std::uint64_t>(size);
    const int y = static_cast<int>(rest % static_cast<std::uint64_t>(size));
    const int x = static_cast<int>(rest / static_cast<std::uint64_t>(size));
    const std::span<double> f = g.insert(CellIndex{x, y, z});
    for (int c = 0; c < channels; ++c) f[c] = rng.uniform(0.5, 1.5);
  };
  if (invert) {
    for (std::uint64_t lin = 0; lin < total; ++lin)
      if (!picked.count(lin)) insert_cell(lin);
  } else {
    // Insertion order must not depend on unordered_set iteration order.
    std::vector<std::uint64_t> cells(picked.begin(), picked.end());
    std::sort(cells.begin(), cells.end());
    for (std::uint64_t lin : cells) insert_cell(lin);
  }
  return g;
}

namespace detail {

inline double median_seconds(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// Times voting_conv against dense_conv_oracle on the same random grid and
/// kernel for every (size, occupancy) pair. The vote counter is recorded
/// per row; densification is excluded from the dense timing so both
/// columns measure convolution work only.
inline std::vector<BenchRow> bench_sparse(const BenchConfig& cfg) {
  cfg.check();
  using clock = std::chrono::steady_clock;
  std::vector<BenchRow> rows;
  volatile double sink = 0.0;  // keeps the timed results live

  std::uint64_t row_index = 0;
  for (int size : cfg.grid_sizes) {
    for (double occ : cfg.occupancies) {
      ++row_index;
      const std::uint64_t row_seed = cfg.seed + 0x9e3779b97f4a7c15ULL * row_index;
      const SparseVoxelGrid grid =
          make_bench_grid(size, occ, cfg.c_in, row_seed);

      ConvKernel3D k =
          ConvKernel3D::zeros(cfg.kernel, cfg.kernel, cfg.kernel, cfg.c_in,
                              cfg.c_out);
      Rng krng(row_seed ^ 0x5851f42d4c957f2dULL);
      for (double& w : k.w) w = krng.normal(0.0, 0.5);

      BenchRow row;
      row.size = size;
      row.occupancy = occ;
      row.occupied = grid.cell_count();

      std::vector<double> tv, td;
      tv.reserve(static_cast<std::size_t>(cfg.repeats));
      td.reserve(static_cast<std::size_t>(cfg.repeats));
      for (int r = 0; r < cfg.repeats; ++r) {
        std::uint64_t votes = 0;
        const auto t0 = clock::now();
        const SparseVoxelGrid out =
            voting_conv(grid, k, BiasMode::Off, cfg.threads, &votes);
        const auto t1 = clock::now();
        tv.push_back(std::chrono::duration<double>(t1 - t0).count());
        sink = sink + static_cast<double>(out.cell_count());
        row.votes = votes;
      }

      const DenseTensor3D dense =
          densify(grid, CellIndex{0, 0, 0}, size, size, size);
      for (int r = 0; r < cfg.repeats; ++r) {
        const auto t0 = clock::now();
        const DenseTensor3D out = dense_conv_oracle(dense, k);
        const auto t1 = clock::now();
        td.push_back(std::chrono::duration<double>(t1 - t0).count());
        sink = sink + out.v.back();
      }

      row.voting_time = detail::median_seconds(tv);
      row.dense_time = detail::median_seconds(td);
      rows.push_back(row);
    }
  }
  (void)sink;
  return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "size,occupancy,votes,voting_time,dense_time\n";
  for (const BenchRow& r : rows) {
    out += std::to_string(r.size) + "," + detail::format_double(r.occupancy) +
           "," + std::to_string(r.votes) + "," +
           detail::format_double(r.voting_time) + "," +
           detail::format_double(r.dense_time) + "\n";
  }
  return out;
}

}  // namespace votegrid
