// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0
//
// Feature-centric voting sparse 3D convolution: each occupied cell scatters
// its feature through the kernel window, so cost scales with occupancy
// instead of volume. A direct dense convolution serves as the reference
// semantics. ReLU layers carry an L1 activation penalty that rewards
// sparsity in intermediate grids.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "votegrid/core.hpp"
#include "votegrid/error.hpp"
#include "votegrid/parallel.hpp"

namespace votegrid {

// ---------------------------------------------------------------------------
// Kernel
// ---------------------------------------------------------------------------

/// 3D convolution kernel with odd spatial extents. Weight layout is
/// w[(((ax*ky + ay)*kz + az)*cin + ci)*cout + co].
struct ConvKernel3D {
  int kx = 1, ky = 1, kz = 1;
  int cin = 1, cout = 1;
  std::vector<double> w;
  std::vector<double> bias;

  static ConvKernel3D zeros(int kx, int ky, int kz, int cin, int cout) {
    ConvKernel3D k;
    k.kx = kx;
    k.ky = ky;
    k.kz = kz;
    k.cin = cin;
    k.cout = cout;
    k.w.assign(static_cast<std::size_t>(kx) * ky * kz * cin * cout, 0.0);
    k.bias.assign(cout, 0.0);
    return k;
  }

  std::size_t weight_count() const {
    return static_cast<std::size_t>(kx) * ky * kz * cin * cout;
  }

  double& at(int ax, int ay, int az, int ci, int co) {
    return w[((((static_cast<std::size_t>(ax) * ky + ay) * kz + az) * cin + ci) *
                  cout +
              co)];
  }
  double at(int ax, int ay, int az, int ci, int co) const {
    return w[((((static_cast<std::size_t>(ax) * ky + ay) * kz + az) * cin + ci) *
                  cout +
              co)];
  }

  void check() const {
    require(kx > 0 && ky > 0 && kz > 0 && kx % 2 == 1 && ky % 2 == 1 &&
                kz % 2 == 1,
            ErrorKind::InvalidArgument, "kernel extents must be odd positive");
    require(cin > 0 && cout > 0, ErrorKind::InvalidArgument,
            "kernel channel counts must be positive");
    require(w.size() == weight_count(), ErrorKind::ShapeMismatch,
            "kernel weight buffer size mismatch");
    require(bias.size() == static_cast<std::size_t>(cout),
            ErrorKind::ShapeMismatch, "kernel bias size mismatch");
    for (double x : w)
      require(std::isfinite(x), ErrorKind::InvalidArgument,
              "kernel weights must be finite");
    for (double x : bias)
      require(std::isfinite(x), ErrorKind::InvalidArgument,
              "kernel bias must be finite");
  }
};

enum class BiasMode { Off, OnSupport };

// ---------------------------------------------------------------------------
// Dense reference
// ---------------------------------------------------------------------------

/// Dense 3D multi-channel box anchored at an integer grid index.
/// v[(((x*ny + y)*nz + z)*channels + c)].
struct DenseTensor3D {
  CellIndex origin;
  int nx = 0, ny = 0, nz = 0;
  int channels = 1;
  std::vector<double> v;

  static DenseTensor3D zeros(CellIndex origin, int nx, int ny, int nz, int c) {
    DenseTensor3D t;
    t.origin = origin;
    t.nx = nx;
    t.ny = ny;
    t.nz = nz;
    t.channels = c;
    t.v.assign(static_cast<std::size_t>(nx) * ny * nz * c, 0.0);
    return t;
  }

  double& at(int x, int y, int z, int c) {
    return v[(((static_cast<std::size_t>(x) * ny + y) * nz + z) * channels + c)];
  }
  double at(int x, int y, int z, int c) const {
    return v[(((static_cast<std::size_t>(x) * ny + y) * nz + z) * channels + c)];
  }
};

/// Materializes a sparse grid into the dense box [origin, origin + n).
/// Cells outside the box must not exist; callers size the box to cover
/// the support.
inline DenseTensor3D densify(const SparseVoxelGrid& grid, CellIndex origin,
                             int nx, int ny, int nz) {
  DenseTensor3D t = DenseTensor3D::zeros(origin, nx, ny, nz, grid.channels);
  for (const CellIndex& c : grid.sorted_cells()) {
    const int x = c.x - origin.x, y = c.y - origin.y, z = c.z - origin.z;
    require(x >= 0 && x < nx && y >= 0 && y < ny && z >= 0 && z < nz,
            ErrorKind::ShapeMismatch, "densify: cell outside target box");
    const double* f = grid.find(c);
    for (int ch = 0; ch < grid.channels; ++ch) t.at(x, y, z, ch) = f[ch];
  }
  return t;
}

/// Inverse of densify: exact nonzero vectors become cells.
inline SparseVoxelGrid sparsify(const DenseTensor3D& t, Vec3 origin_pos,
                                double cell_size) {
  SparseVoxelGrid g;
  g.origin = origin_pos;
  g.cell_size = cell_size;
  g.channels = t.channels;
  for (int x = 0; x < t.nx; ++x)
    for (int y = 0; y < t.ny; ++y)
      for (int z = 0; z < t.nz; ++z) {
        bool nonzero = false;
        for (int ch = 0; ch < t.channels; ++ch)
          if (t.at(x, y, z, ch) != 0.0) {
            nonzero = true;
            break;
          }
        if (!nonzero) continue;
        auto f = g.insert(CellIndex{t.origin.x + x, t.origin.y + y, t.origin.z + z});
        for (int ch = 0; ch < t.channels; ++ch) f[ch] = t.at(x, y, z, ch);
      }
  return g;
}

/// Direct 6-nested-loop dense convolution, no sparsity shortcuts, no bias.
/// Output has the input's shape; reads outside the box are zero. A unit
/// impulse reproduces the kernel itself (true convolution orientation):
/// out[x] = sum_a in[x - (a - h)] * W[a].
inline DenseTensor3D dense_conv_oracle(const DenseTensor3D& in,
                                       const ConvKernel3D& k) {
  k.check();
  require(k.cin == in.channels, ErrorKind::ShapeMismatch,
          "dense_conv_oracle: channel mismatch");
  const int hx = k.kx / 2, hy = k.ky / 2, hz = k.kz / 2;
  DenseTensor3D out = DenseTensor3D::zeros(in.origin, in.nx, in.ny, in.nz, k.cout);
  for (int x = 0; x < in.nx; ++x)
    for (int y = 0; y < in.ny; ++y)
      for (int z = 0; z < in.nz; ++z)
        for (int ax = 0; ax < k.kx; ++ax)
          for (int ay = 0; ay < k.ky; ++ay)
            for (int az = 0; az < k.kz; ++az) {
              const int sx = x - (ax - hx);
              const int sy = y - (ay - hy);
              const int sz = z - (az - hz);
              if (sx < 0 || sx >= in.nx || sy < 0 || sy >= in.ny || sz < 0 ||
                  sz >= in.nz)
                continue;
              for (int co = 0; co < k.cout; ++co) {
                double acc = 0.0;
                for (int ci = 0; ci < k.cin; ++ci)
                  acc += in.at(sx, sy, sz, ci) * k.at(ax, ay, az, ci, co);
                out.at(x, y, z, co) += acc;
              }
            }
  return out;
}

// ---------------------------------------------------------------------------
// Voting convolution
// ---------------------------------------------------------------------------

namespace detail {

/// One input column's z-stream inside a single output column of the
/// voting support: the cells of `[pos, end)` (all sharing one (x, y))
/// dilated along z into runs of [z - hz, z + hz], with overlaps between
/// consecutive runs skipped so every yielded z is new.
///
/// The cursor also resolves, for every input cell it passes, the support
/// slot of that cell's run head (z - hz). When a cell's run touches or
/// overlaps its predecessor's, the whole span lies in consecutive slots,
/// so the head slot follows from the predecessor's by arithmetic.
/// Otherwise the head is this cursor's next yield and `pending` asks the
/// merge loop to record its slot.
struct VoteZCursor {
  std::uint32_t pos = 0, end = 0;  // cell range of the input column
  int cur_z = 0, run_end = 0;
  int col = 0;                    // kernel column id, indexes slot0 rows
  std::uint32_t pending = kNone;  // cell awaiting its run-head slot
  std::uint32_t prev_slot = 0;    // run-head slot of cells[pos]
  int prev_z = 0;                 // z of cells[pos]
  bool done = false;

  static constexpr std::uint32_t kNone = 0xffffffffu;

  void rewind(std::uint32_t begin, std::uint32_t finish, int column, int hz,
              const CellIndex* cells) {
    pos = begin;
    end = finish;
    col = column;
    const int cz = cells[begin].z;
    cur_z = cz - hz;
    run_end = cz + hz;
    pending = begin;
    prev_z = cz;
    done = false;
  }

  void next(const CellIndex* cells, std::uint32_t* slot0, int n_cols, int hz) {
    if (cur_z < run_end) {
      ++cur_z;
      return;
    }
    while (++pos < end) {
      const int cz = cells[pos].z;
      int lo = cz - hz;
      if (lo <= cur_z + 1) {
        // Contiguous with the previous cell's span: head slot by offset.
        const std::uint32_t head =
            prev_slot + static_cast<std::uint32_t>(cz - prev_z);
        slot0[static_cast<std::size_t>(pos) * n_cols +
              static_cast<std::size_t>(col)] = head;
        prev_slot = head;
        prev_z = cz;
        lo = cur_z + 1;
        if (lo > cz + hz) continue;  // run fully covered by predecessor
      } else {
        pending = pos;
        prev_z = cz;
      }
      cur_z = lo;
      run_end = cz + hz;
      return;
    }
    done = true;
  }
};

}  // namespace detail

/// Feature-centric voting convolution. Each occupied input cell u casts
/// votes f(u) * W[a] into output cell u + (a - h) for every kernel array
/// index a, which reproduces dense true convolution on the support.
/// Cost (and the optional vote counter) is exactly
/// occupied * kx*ky*kz * cin*cout multiply-accumulates; support assembly
/// and slot lookup stay proportional to the vote count (a kx*ky-way merge
/// of sorted column streams, no hashing per vote).
///
/// Determinism: every output cell is accumulated in sorted input-cell
/// order by exactly one worker (partition by output slot), so the
/// result is bit-identical for any thread count.
inline SparseVoxelGrid voting_conv(const SparseVoxelGrid& in,
                                   const ConvKernel3D& k, BiasMode bias_mode,
                                   unsigned threads = 1,
                                   std::uint64_t* vote_counter = nullptr) {
  k.check();
  require(k.cin == in.channels, ErrorKind::ShapeMismatch,
          "voting_conv: kernel c_in != input channels");

  SparseVoxelGrid out;
  out.origin = in.origin;
  out.cell_size = in.cell_size;
  out.channels = k.cout;

  const std::vector<CellIndex> cells = in.sorted_cells();
  const int hx = k.kx / 2, hy = k.ky / 2, hz = k.kz / 2;

  if (vote_counter)
    *vote_counter += static_cast<std::uint64_t>(cells.size()) * k.kx * k.ky *
                     k.kz * k.cin * k.cout;
  if (cells.empty()) return out;

  // Output support, merged in lexicographic order at two levels: the
  // input cells grouped into contiguous (x, y) column ranges, the output
  // (x, y) columns streamed as a kx*ky-way merge of the shifted column
  // list, and each output column's z values as a merge of its (at most
  // kx*ky) contributing z-streams. Slot s is the s-th support cell, so a
  // z-run of dilated cells occupies consecutive slots; slot0 records each
  // (input cell, kernel column) run-head slot so accumulation needs no
  // lookups.
  const int n_cols = k.kx * k.ky;
  std::vector<std::uint32_t> slot0(cells.size() *
                                   static_cast<std::size_t>(n_cols));
  {
    struct InCol {
      int x, y;
      std::uint32_t begin, end;
    };
    std::vector<InCol> icols;
    for (std::uint32_t i = 0; i < cells.size();) {
      std::uint32_t j = i + 1;
      while (j < cells.size() && cells[j].x == cells[i].x &&
             cells[j].y == cells[i].y)
        ++j;
      icols.push_back(InCol{cells[i].x, cells[i].y, i, j});
      i = j;
    }

    // One cursor per kernel column walks the shifted input column list.
    // Heads are (x, y) packed sign-biased into uint64 so the min scan is
    // a flat integer pass; an exhausted cursor parks at the maximum key.
    constexpr std::uint64_t kDone = ~std::uint64_t{0};
    const auto xy_key = [](int x, int y) {
      return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(x) ^
                                         0x80000000u)
              << 32) |
             static_cast<std::uint64_t>(static_cast<std::uint32_t>(y) ^
                                        0x80000000u);
    };
    std::vector<std::uint64_t> okey(static_cast<std::size_t>(n_cols));
    std::vector<std::uint32_t> opos(static_cast<std::size_t>(n_cols), 0);
    std::vector<int> sxv(static_cast<std::size_t>(n_cols)),
        syv(static_cast<std::size_t>(n_cols));
    for (int ax = 0; ax < k.kx; ++ax)
      for (int ay = 0; ay < k.ky; ++ay) {
        const int j = ax * k.ky + ay;
        sxv[j] = ax - hx;
        syv[j] = ay - hy;
        okey[j] = xy_key(icols[0].x + sxv[j], icols[0].y + syv[j]);
      }

    std::vector<CellIndex> support;
    support.reserve(cells.size() * k.kx * k.ky * k.kz);
    std::vector<detail::VoteZCursor> zc(static_cast<std::size_t>(n_cols));
    std::vector<int> zhead(static_cast<std::size_t>(n_cols));
    const CellIndex* cp = cells.data();
    std::uint32_t* s0 = slot0.data();

    while (true) {
      std::uint64_t mink = okey[0];
      for (int j = 1; j < n_cols; ++j) mink = std::min(mink, okey[j]);
      if (mink == kDone) break;
      const int ox = static_cast<int>(
          static_cast<std::uint32_t>(mink >> 32) ^ 0x80000000u);
      const int oy = static_cast<int>(static_cast<std::uint32_t>(mink) ^
                                      0x80000000u);

      // Collect this output column's contributors and advance their
      // column cursors.
      int m = 0;
      for (int j = 0; j < n_cols; ++j) {
        if (okey[j] != mink) continue;
        const InCol& ic = icols[opos[j]];
        zc[m].rewind(ic.begin, ic.end, j, hz, cp);
        zhead[m] = zc[m].cur_z;
        ++m;
        ++opos[j];
        okey[j] = opos[j] < icols.size()
                      ? xy_key(icols[opos[j]].x + sxv[j],
                               icols[opos[j]].y + syv[j])
                      : kDone;
      }

      // Merge the z-streams. last_z is wider than any cell z, so its
      // initial value can never collide with a real coordinate.
      std::int64_t last_z = std::numeric_limits<std::int64_t>::min();
      int active = m;
      while (active > 0) {
        int best = 0, second = 0;
        bool have_second = false;
        for (int t = 1; t < active; ++t) {
          if (zhead[t] < zhead[best]) {
            second = zhead[best];
            have_second = true;
            best = t;
          } else if (!have_second || zhead[t] < second) {
            second = zhead[t];
            have_second = true;
          }
        }
        // Yield from the winner until it passes the runner-up; z-runs
        // make this stretch several cells per scan.
        detail::VoteZCursor& w = zc[best];
        while (true) {
          const int z = w.cur_z;
          const bool dup = static_cast<std::int64_t>(z) == last_z;
          if (w.pending != detail::VoteZCursor::kNone) {
            const std::uint32_t slot =
                static_cast<std::uint32_t>(support.size() - (dup ? 1 : 0));
            s0[static_cast<std::size_t>(w.pending) * n_cols +
               static_cast<std::size_t>(w.col)] = slot;
            w.prev_slot = slot;
            w.pending = detail::VoteZCursor::kNone;
          }
          if (!dup) {
            support.push_back(CellIndex{ox, oy, z});
            last_z = z;
          }
          w.next(cp, s0, n_cols, hz);
          if (w.done || (have_second && w.cur_z >= second)) break;
        }
        if (w.done) {
          --active;
          zc[best] = zc[active];
          zhead[best] = zhead[active];
        } else {
          zhead[best] = w.cur_z;
        }
      }
    }
    out.feat.assign(support.size() * k.cout, 0.0);
    // Slot order is the sorted emission order, so the grid stays sorted.
    out.cells = std::move(support);
  }

  const unsigned t = std::max(1u, threads);
  auto accumulate = [&](unsigned worker, unsigned n_workers) {
    for (std::size_t ui = 0; ui < cells.size(); ++ui) {
      const CellIndex& u = cells[ui];
      const double* f = in.find(u);
      const std::uint32_t* heads =
          slot0.data() + ui * static_cast<std::size_t>(n_cols);
      for (int ax = 0; ax < k.kx; ++ax)
        for (int ay = 0; ay < k.ky; ++ay) {
          // The column's kz vote targets sit in consecutive slots.
          const std::size_t head = heads[ax * k.ky + ay];
          for (int az = 0; az < k.kz; ++az) {
            const std::size_t slot = head + static_cast<std::size_t>(az);
            if (n_workers > 1 && slot % n_workers != worker) continue;
            double* o = out.feat.data() + slot * k.cout;
            const double* wk = k.w.data() +
                               ((static_cast<std::size_t>(ax) * k.ky + ay) * k.kz +
                                az) *
                                   k.cin * k.cout;
            for (int ci = 0; ci < k.cin; ++ci) {
              const double fv = f[ci];
              if (fv == 0.0) continue;
              const double* wrow = wk + static_cast<std::size_t>(ci) * k.cout;
              for (int co = 0; co < k.cout; ++co) o[co] += fv * wrow[co];
            }
          }
        }
    }
  };

  if (t <= 1) {
    accumulate(0, 1);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(t);
    for (unsigned w = 0; w < t; ++w) pool.emplace_back(accumulate, w, t);
    for (auto& th : pool) th.join();
  }

  if (bias_mode == BiasMode::OnSupport) {
    // Every stored cell received at least one vote by construction.
    for (std::size_t slot = 0; slot < out.cell_count(); ++slot) {
      double* o = out.feat.data() + slot * k.cout;
      for (int co = 0; co < k.cout; ++co) o[co] += k.bias[co];
    }
  }
  out.prune_zero_cells();
  return out;
}

// ---------------------------------------------------------------------------
// Activation, penalty, stacked net
// ---------------------------------------------------------------------------

struct SparseLayerOutput {
  SparseVoxelGrid grid;
  double l1_value = 0.0;
  std::size_t occupancy_in = 0;
  std::size_t occupancy_out = 0;
};

/// Elementwise max(0, x); all-zero cells are dropped so absence keeps
/// meaning exact zero. l1_value sums the surviving activations.
inline SparseLayerOutput relu_sparse(const SparseVoxelGrid& in) {
  SparseLayerOutput out;
  out.occupancy_in = in.cell_count();
  out.grid.origin = in.origin;
  out.grid.cell_size = in.cell_size;
  out.grid.channels = in.channels;
  for (std::size_t s = 0; s < in.cell_count(); ++s) {
    const double* f = in.feat.data() + s * in.channels;
    bool any = false;
    for (int ch = 0; ch < in.channels; ++ch)
      if (f[ch] > 0.0) {
        any = true;
        break;
      }
    if (!any) continue;
    auto dst = out.grid.insert(in.cells[s]);
    for (int ch = 0; ch < in.channels; ++ch) {
      const double a = f[ch] > 0.0 ? f[ch] : 0.0;
      dst[ch] = a;
      out.l1_value += a;
    }
  }
  out.occupancy_out = out.grid.cell_count();
  return out;
}

inline double l1_penalty(const std::vector<SparseLayerOutput>& outputs,
                         double lambda) {
  require(lambda >= 0.0, ErrorKind::InvalidArgument,
          "l1_penalty: lambda must be non-negative");
  double sum = 0.0;
  for (const auto& o : outputs) sum += o.l1_value;
  return lambda * sum;
}

/// Forward trace retained for reverse mode: inputs and pre-activations of
/// every layer.
struct SparseNetTrace {
  SparseVoxelGrid input;
  std::vector<SparseVoxelGrid> pre;   // conv output + on-support bias
  std::vector<SparseVoxelGrid> act;   // post-ReLU
  std::vector<double> l1_values;      // per layer
  std::vector<std::size_t> occupancy; // per layer, post-activation
  double lambda = 0.0;
  double penalty = 0.0;               // lambda-weighted sum
};

/// Alternating voting_conv (bias on-support) and relu_sparse.
inline SparseNetTrace sparse_net_forward(const SparseVoxelGrid& input,
                                         const std::vector<ConvKernel3D>& layers,
                                         double lambda, unsigned threads = 1,
                                         std::uint64_t* vote_counter = nullptr) {
  require(lambda >= 0.0, ErrorKind::InvalidArgument,
          "sparse_net_forward: lambda must be non-negative");
  SparseNetTrace tr;
  tr.input = input;
  tr.lambda = lambda;
  const SparseVoxelGrid* cur = &tr.input;
  for (const ConvKernel3D& k : layers) {
    SparseVoxelGrid pre = voting_conv(*cur, k, BiasMode::OnSupport, threads,
                                      vote_counter);
    SparseLayerOutput act = relu_sparse(pre);
    tr.pre.push_back(std::move(pre));
    tr.l1_values.push_back(act.l1_value);
    tr.occupancy.push_back(act.occupancy_out);
    tr.act.push_back(std::move(act.grid));
    cur = &tr.act.back();
  }
  for (double v : tr.l1_values) tr.penalty += lambda * v;
  return tr;
}

struct SparseNetGrads {
  std::vector<std::vector<double>> w;     // per layer, kernel weight layout
  std::vector<std::vector<double>> bias;  // per layer
};

/// Exact reverse-mode gradients of (sum over upstream cells of
/// upstream . final_activation) + lambda * sum of all L1 terms, with the
/// ReLU/L1 subgradient at 0 taken as 0.
inline SparseNetGrads sparse_net_backward(const std::vector<ConvKernel3D>& layers,
                                          const SparseNetTrace& trace,
                                          const SparseVoxelGrid& upstream,
                                          unsigned threads = 1) {
  require(trace.pre.size() == layers.size() && trace.act.size() == layers.size(),
          ErrorKind::StateError,
          "sparse_net_backward: trace does not match the layer stack");
  const std::size_t n_layers = layers.size();
  require(n_layers > 0, ErrorKind::InvalidArgument,
          "sparse_net_backward: empty layer stack");
  require(upstream.channels == layers.back().cout, ErrorKind::ShapeMismatch,
          "sparse_net_backward: upstream channel mismatch");

  SparseNetGrads grads;
  grads.w.resize(n_layers);
  grads.bias.resize(n_layers);

  // Gradient with respect to the current layer's post-activation grid.
  // Starts as the upstream task gradient; the lambda term joins inside
  // the loop because it applies at every layer.
  SparseVoxelGrid g_act = upstream;

  for (std::size_t li = n_layers; li-- > 0;) {
    const ConvKernel3D& k = layers[li];
    const SparseVoxelGrid& pre = trace.pre[li];
    const SparseVoxelGrid& in_grid = li == 0 ? trace.input : trace.act[li - 1];

    // d/d pre = (g_act + lambda) masked by pre > 0, on pre's support.
    SparseVoxelGrid g_pre;
    g_pre.origin = pre.origin;
    g_pre.cell_size = pre.cell_size;
    g_pre.channels = pre.channels;
    std::vector<double> g_b(k.cout, 0.0);
    for (const CellIndex& c : pre.sorted_cells()) {
      const double* pv = pre.find(c);
      const double* gu = g_act.find(c);
      auto dst = g_pre.insert(c);
      for (int co = 0; co < k.cout; ++co) {
        if (pv[co] > 0.0) {
          const double g = (gu ? gu[co] : 0.0) + trace.lambda;
          dst[co] = g;
          g_b[co] += g;
        }
      }
    }
    grads.bias[li] = std::move(g_b);

    const std::vector<CellIndex> in_cells = in_grid.sorted_cells();
    const int hx = k.kx / 2, hy = k.ky / 2, hz = k.kz / 2;

    // Weight gradient: parallel over kernel spatial index (disjoint slots),
    // each summing over sorted input cells.
    std::vector<double> g_w(k.weight_count(), 0.0);
    const std::size_t kvol = static_cast<std::size_t>(k.kx) * k.ky * k.kz;
    parallel_for(kvol, threads, [&](std::size_t begin, std::size_t end) {
      for (std::size_t a = begin; a < end; ++a) {
        const int ax = static_cast<int>(a / (k.ky * k.kz));
        const int ay = static_cast<int>((a / k.kz) % k.ky);
        const int az = static_cast<int>(a % k.kz);
        double* gw = g_w.data() + a * k.cin * k.cout;
        for (const CellIndex& u : in_cells) {
          const CellIndex dst{u.x + ax - hx, u.y + ay - hy, u.z + az - hz};
          const double* gp = g_pre.find(dst);
          if (!gp) continue;
          const double* f = in_grid.find(u);
          for (int ci = 0; ci < k.cin; ++ci) {
            const double fv = f[ci];
            if (fv == 0.0) continue;
            double* row = gw + static_cast<std::size_t>(ci) * k.cout;
            for (int co = 0; co < k.cout; ++co) row[co] += fv * gp[co];
          }
        }
      }
    });
    grads.w[li] = std::move(g_w);

    if (li == 0) break;

    // Gradient into this layer's input grid (the previous activation).
    SparseVoxelGrid g_in;
    g_in.origin = in_grid.origin;
    g_in.cell_size = in_grid.cell_size;
    g_in.channels = k.cin;
    g_in.feat.assign(in_cells.size() * static_cast<std::size_t>(k.cin), 0.0);
    g_in.cells = in_cells;
    parallel_for(in_cells.size(), threads, [&](std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) {
        const CellIndex& u = in_cells[i];
        double* gi = g_in.feat.data() + i * k.cin;
        for (int ax = 0; ax < k.kx; ++ax)
          for (int ay = 0; ay < k.ky; ++ay)
            for (int az = 0; az < k.kz; ++az) {
              const CellIndex dst{u.x + ax - hx, u.y + ay - hy, u.z + az - hz};
              const double* gp = g_pre.find(dst);
              if (!gp) continue;
              const double* wk =
                  k.w.data() +
                  ((static_cast<std::size_t>(ax) * k.ky + ay) * k.kz + az) *
                      k.cin * k.cout;
              for (int ci = 0; ci < k.cin; ++ci) {
                double acc = 0.0;
                const double* wrow = wk + static_cast<std::size_t>(ci) * k.cout;
                for (int co = 0; co < k.cout; ++co) acc += wrow[co] * gp[co];
                gi[ci] += acc;
              }
            }
      }
    });
    g_act = std::move(g_in);
  }
  return grads;
}

}  // namespace votegrid
