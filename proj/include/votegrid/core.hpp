// Copyright Contributors to the VoteGrid Project
// SPDX-License-Identifier: Apache-2.0
//
// Foundational geometric types: point clouds, sparse voxel grids, feature
// matrices, plus voxelization and exact nearest-neighbor search.

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "votegrid/error.hpp"
#include "votegrid/parallel.hpp"

namespace votegrid {

using Vec3 = Eigen::Vector3d;

/// N x d feature table. Rows align 1:1 with the retained points of the
/// cloud that produced them.
using FeatureMatrix = Eigen::MatrixXd;

inline bool all_finite(const FeatureMatrix& m) { return m.allFinite(); }

// ---------------------------------------------------------------------------
// PointCloud
// ---------------------------------------------------------------------------

/// Ordered set of 3D points in meters. Optionally organized as an R x C
/// sensor grid (row-major), in which case `valid` marks which entries hold
/// real measurements; invalid entries are placeholders.
struct PointCloud {
  std::vector<Vec3> points;
  std::optional<std::pair<int, int>> grid_shape;  // (rows, cols)
  std::vector<std::uint8_t> valid;                // empty => all valid

  std::size_t size() const { return points.size(); }

  bool organized() const { return grid_shape.has_value(); }

  bool is_valid(std::size_t i) const {
    return valid.empty() ? true : valid[i] != 0;
  }

  std::size_t valid_count() const {
    if (valid.empty()) return points.size();
    std::size_t n = 0;
    for (std::size_t i = 0; i < points.size(); ++i)
      if (valid[i]) ++n;
    return n;
  }

  std::vector<std::size_t> valid_indices() const {
    std::vector<std::size_t> out;
    out.reserve(points.size());
    for (std::size_t i = 0; i < points.size(); ++i)
      if (is_valid(i)) out.push_back(i);
    return out;
  }

  /// Checks the structural invariants; throws on violation.
  void check() const {
    if (grid_shape) {
      const auto [r, c] = *grid_shape;
      require(r > 0 && c > 0, ErrorKind::InvalidArgument,
              "organized cloud needs positive grid shape");
      require(points.size() == static_cast<std::size_t>(r) * c,
              ErrorKind::ShapeMismatch,
              "organized cloud must have rows*cols entries");
      require(valid.size() == points.size(), ErrorKind::ShapeMismatch,
              "organized cloud must carry a validity mask");
    }
    if (!valid.empty())
      require(valid.size() == points.size(), ErrorKind::ShapeMismatch,
              "validity mask length mismatch");
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (is_valid(i))
        require(points[i].allFinite(), ErrorKind::InvalidArgument,
                "valid point with non-finite coordinates");
    }
  }
};

inline PointCloud make_cloud(std::vector<Vec3> pts) {
  PointCloud c;
  c.points = std::move(pts);
  return c;
}

/// Centroid of the valid points.
inline Vec3 centroid(const PointCloud& cloud) {
  Vec3 sum = Vec3::Zero();
  std::size_t n = 0;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (cloud.is_valid(i)) {
      sum += cloud.points[i];
      ++n;
    }
  }
  require(n > 0, ErrorKind::EmptyResult, "centroid of empty cloud");
  return sum / static_cast<double>(n);
}

/// Max distance from the centroid to any valid point.
inline double bounding_radius(const PointCloud& cloud, const Vec3& center) {
  double r = 0.0;
  for (std::size_t i = 0; i < cloud.size(); ++i)
    if (cloud.is_valid(i)) r = std::max(r, (cloud.points[i] - center).norm());
  return r;
}

// ---------------------------------------------------------------------------
// SparseVoxelGrid
// ---------------------------------------------------------------------------

struct CellIndex {
  std::int32_t x = 0, y = 0, z = 0;

  friend bool operator==(const CellIndex&, const CellIndex&) = default;

  friend bool operator<(const CellIndex& a, const CellIndex& b) {
    if (a.x != b.x) return a.x < b.x;
    if (a.y != b.y) return a.y < b.y;
    return a.z < b.z;
  }
};

struct CellIndexHash {
  std::size_t operator()(const CellIndex& c) const noexcept {
    // splitmix64 over the packed coordinates
    std::uint64_t h = (static_cast<std::uint64_t>(static_cast<std::uint32_t>(c.x)) << 42) ^
                      (static_cast<std::uint64_t>(static_cast<std::uint32_t>(c.y)) << 21) ^
                      static_cast<std::uint64_t>(static_cast<std::uint32_t>(c.z));
    h += 0x9e3779b97f4a7c15ULL;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
    return static_cast<std::size_t>(h ^ (h >> 31));
  }
};

/// Open-addressing map from cell index to feature slot, the scratch index
/// for bulk out-of-order grid construction. Linear probing over a
/// power-of-two table at load factor <= 1/2; insert-only, since grids are
/// rebuilt rather than edited in place. One sentinel key (all coordinates at
/// INT32_MIN) marks empty table entries and cannot be stored.
class CellSlotMap {
 public:
  // 16-byte entries: a grid can't exceed 2^32 slots (feat would not fit in
  // memory long before that), so slots narrow losslessly.
  struct Entry {
    CellIndex first;
    std::uint32_t second = 0;
  };

  std::size_t size() const { return size_; }

  void reserve(std::size_t n) { grow_to(n); }

  const Entry* find(const CellIndex& c) const {
    if (table_.empty()) return nullptr;
    std::size_t i = CellIndexHash{}(c) & mask_;
    while (true) {
      const Entry& e = table_[i];
      if (e.first == c) return &e;
      if (e.first == kEmpty) return nullptr;
      i = (i + 1) & mask_;
    }
  }

  /// Inserts if absent; an existing cell keeps its slot.
  void emplace(const CellIndex& c, std::size_t slot) {
    require(!(c == kEmpty), ErrorKind::InvalidArgument,
            "cell map: the sentinel index is reserved");
    if ((size_ + 1) * 2 > table_.size()) grow_to(size_ + 1);
    std::size_t i = CellIndexHash{}(c) & mask_;
    while (true) {
      Entry& e = table_[i];
      if (e.first == c) return;
      if (e.first == kEmpty) {
        e = Entry{c, static_cast<std::uint32_t>(slot)};
        ++size_;
        return;
      }
      i = (i + 1) & mask_;
    }
  }

  std::size_t at(const CellIndex& c) const {
    const Entry* e = find(c);
    require(e != nullptr, ErrorKind::StateError, "cell map: cell not present");
    return e->second;
  }

  class const_iterator {
   public:
    const_iterator(const Entry* p, const Entry* end) : p_(p), end_(end) {
      skip();
    }
    const Entry& operator*() const { return *p_; }
    const Entry* operator->() const { return p_; }
    const_iterator& operator++() {
      ++p_;
      skip();
      return *this;
    }
    friend bool operator==(const const_iterator&, const const_iterator&) =
        default;

   private:
    void skip() {
      while (p_ != end_ && p_->first == kEmpty) ++p_;
    }
    const Entry* p_;
    const Entry* end_;
  };

  const_iterator begin() const {
    return {table_.data(), table_.data() + table_.size()};
  }
  const_iterator end() const {
    return {table_.data() + table_.size(), table_.data() + table_.size()};
  }

 private:
  static constexpr CellIndex kEmpty{std::numeric_limits<std::int32_t>::min(),
                                    std::numeric_limits<std::int32_t>::min(),
                                    std::numeric_limits<std::int32_t>::min()};

  void grow_to(std::size_t n) {
    std::size_t want = 16;
    while (want < n * 2) want <<= 1;
    if (want <= table_.size()) return;
    std::vector<Entry> old = std::move(table_);
    table_.assign(want, Entry{kEmpty, 0});
    mask_ = want - 1;
    for (const Entry& e : old)
      if (!(e.first == kEmpty)) raw_insert(e);
  }

  void raw_insert(const Entry& entry) {
    std::size_t i = CellIndexHash{}(entry.first) & mask_;
    while (!(table_[i].first == kEmpty)) i = (i + 1) & mask_;
    table_[i] = entry;
  }

  std::vector<Entry> table_;
  std::size_t mask_ = 0;
  std::size_t size_ = 0;
};

/// Map from integer 3D cell index to a c-channel feature vector. Zero cells
/// are represented by absence: no stored vector is all-zero. Slot s holds
/// cell `cells[s]` with its features at `feat[s * channels ..]`. Grids built
/// by this library keep `cells` in ascending lexicographic order so lookups
/// binary-search; out-of-order insertion is legal but demotes `find` to a
/// linear scan until `sort_cells` restores order.
struct SparseVoxelGrid {
  Vec3 origin = Vec3::Zero();
  double cell_size = 1.0;
  int channels = 1;
  std::vector<CellIndex> cells;
  std::vector<double> feat;
  bool sorted = true;

  std::size_t cell_count() const { return cells.size(); }

  std::span<double> features(std::size_t slot) {
    return {feat.data() + slot * channels, static_cast<std::size_t>(channels)};
  }
  std::span<const double> features(std::size_t slot) const {
    return {feat.data() + slot * channels, static_cast<std::size_t>(channels)};
  }

  const double* find(const CellIndex& c) const {
    if (sorted) {
      const auto it = std::lower_bound(cells.begin(), cells.end(), c);
      if (it == cells.end() || !(*it == c)) return nullptr;
      return feat.data() + static_cast<std::size_t>(it - cells.begin()) * channels;
    }
    for (std::size_t s = 0; s < cells.size(); ++s)
      if (cells[s] == c) return feat.data() + s * channels;
    return nullptr;
  }

  /// Inserts a new cell (must not exist) and returns its feature span.
  std::span<double> insert(const CellIndex& c) {
    const std::size_t slot = cells.size();
    if (slot != 0 && !(cells.back() < c)) sorted = false;
    cells.push_back(c);
    feat.resize(feat.size() + channels, 0.0);
    return features(slot);
  }

  /// Cell indices in lexicographic order, for deterministic iteration.
  std::vector<CellIndex> sorted_cells() const {
    if (sorted) return cells;
    std::vector<CellIndex> out = cells;
    std::sort(out.begin(), out.end());
    return out;
  }

  /// Re-establishes ascending cell order after out-of-order insertion.
  void sort_cells() {
    if (sorted) return;
    std::vector<std::uint32_t> perm(cells.size());
    std::iota(perm.begin(), perm.end(), 0u);
    std::sort(perm.begin(), perm.end(),
              [this](std::uint32_t a, std::uint32_t b) { return cells[a] < cells[b]; });
    std::vector<CellIndex> nc(cells.size());
    std::vector<double> nf(feat.size());
    for (std::size_t s = 0; s < perm.size(); ++s) {
      nc[s] = cells[perm[s]];
      std::copy_n(feat.begin() + perm[s] * channels, channels, nf.begin() + s * channels);
    }
    cells = std::move(nc);
    feat = std::move(nf);
    sorted = true;
  }

  /// Drops cells whose stored vector is exactly all-zero. Leaves the grid
  /// in ascending cell order.
  void prune_zero_cells() {
    sort_cells();
    std::size_t w = 0;
    for (std::size_t s = 0; s < cells.size(); ++s) {
      bool zero = true;
      for (int ch = 0; ch < channels; ++ch)
        if (feat[s * channels + ch] != 0.0) {
          zero = false;
          break;
        }
      if (zero) continue;
      if (w != s) {
        cells[w] = cells[s];
        std::copy_n(feat.begin() + s * channels, channels, feat.begin() + w * channels);
      }
      ++w;
    }
    cells.resize(w);
    feat.resize(w * channels);
  }
};

// ---------------------------------------------------------------------------
// Voxelization
// ---------------------------------------------------------------------------

enum class VoxelReducer { Count, MeanFeature };

/// Bins valid points into cells of side `cell_size`. The grid origin is
/// anchored at the component-wise minimum of the valid points so all cell
/// indices are non-negative. Reducer Count yields 1-channel occupancy
/// counts; MeanFeature averages the attached per-point feature rows.
inline SparseVoxelGrid voxelize(const PointCloud& cloud, double cell_size,
                                VoxelReducer reducer = VoxelReducer::Count,
                                const FeatureMatrix* point_features = nullptr) {
  require(cell_size > 0.0, ErrorKind::InvalidArgument,
          "voxelize: cell_size must be positive");

  SparseVoxelGrid grid;
  grid.cell_size = cell_size;

  const auto valid = cloud.valid_indices();
  if (valid.empty()) {
    grid.channels = reducer == VoxelReducer::Count
                        ? 1
                        : (point_features ? static_cast<int>(point_features->cols()) : 1);
    grid.origin = Vec3::Zero();
    return grid;
  }

  Vec3 lo = cloud.points[valid[0]];
  for (std::size_t i : valid) lo = lo.cwiseMin(cloud.points[i]);
  grid.origin = lo;

  int c = 1;
  if (reducer == VoxelReducer::MeanFeature) {
    require(point_features != nullptr, ErrorKind::InvalidArgument,
            "voxelize: mean-feature reducer needs per-point features");
    require(point_features->rows() == static_cast<Eigen::Index>(cloud.size()),
            ErrorKind::ShapeMismatch,
            "voxelize: feature rows must match cloud size");
    c = static_cast<int>(point_features->cols());
  }
  grid.channels = c;

  CellSlotMap slots;
  std::unordered_map<CellIndex, std::size_t, CellIndexHash> counts;
  for (std::size_t i : valid) {
    const Vec3 q = (cloud.points[i] - grid.origin) / cell_size;
    const CellIndex cell{static_cast<std::int32_t>(std::floor(q.x())),
                         static_cast<std::int32_t>(std::floor(q.y())),
                         static_cast<std::int32_t>(std::floor(q.z()))};
    double* f;
    if (const auto* it = slots.find(cell)) {
      f = grid.feat.data() + it->second * c;
    } else {
      slots.emplace(cell, static_cast<std::uint32_t>(grid.cell_count()));
      auto span = grid.insert(cell);
      f = span.data();
    }
    if (reducer == VoxelReducer::Count) {
      f[0] += 1.0;
    } else {
      for (int ch = 0; ch < c; ++ch) f[ch] += (*point_features)(i, ch);
      counts[cell] += 1;
    }
  }
  if (reducer == VoxelReducer::MeanFeature) {
    for (auto& [cell, n] : counts) {
      double* f = grid.feat.data() + slots.at(cell) * c;
      for (int ch = 0; ch < c; ++ch) f[ch] /= static_cast<double>(n);
    }
  }
  grid.sort_cells();
  if (reducer == VoxelReducer::MeanFeature) grid.prune_zero_cells();
  return grid;
}

// ---------------------------------------------------------------------------
// Exact nearest-neighbor search (kd-tree, oracle-equivalent contract)
// ---------------------------------------------------------------------------

/// kd-tree over the valid points of a cloud. Queries are exact; distance
/// ties are broken by the smaller point index, matching the brute-force
/// oracle on every input.
class KdTree {
 public:
  explicit KdTree(const PointCloud& cloud) : cloud_(&cloud) {
    ids_ = cloud.valid_indices();
    nodes_.reserve(ids_.size());
    if (!ids_.empty()) root_ = build(0, ids_.size());
  }

  std::size_t point_count() const { return ids_.size(); }

  /// k nearest valid points to cloud point `query_index`, excluding the
  /// query itself. Results sorted by (distance, index).
  std::vector<std::size_t> knn(std::size_t query_index, std::size_t k) const {
    return knn_position(cloud_->points[query_index], k, query_index);
  }

  /// k nearest valid points to an arbitrary position (no exclusion).
  std::vector<std::size_t> knn_position(
      const Vec3& q, std::size_t k,
      std::size_t exclude = std::numeric_limits<std::size_t>::max()) const {
    Best best;
    best.k = k;
    if (root_ >= 0 && k > 0) search_knn(root_, q, exclude, best);
    std::sort(best.items.begin(), best.items.end(), CandLess{});
    std::vector<std::size_t> out;
    out.reserve(best.items.size());
    for (const auto& c : best.items) out.push_back(c.idx);
    return out;
  }

  /// All valid points within `radius` (closed ball) of cloud point
  /// `center_index`, excluding the center, ascending index order.
  std::vector<std::size_t> radius(std::size_t center_index, double r) const {
    require(r > 0.0, ErrorKind::InvalidArgument,
            "radius_search: radius must be positive");
    std::vector<std::size_t> out;
    if (root_ >= 0)
      search_radius(root_, cloud_->points[center_index], r * r, center_index, out);
    std::sort(out.begin(), out.end());
    return out;
  }

  std::vector<std::size_t> radius_position(const Vec3& q, double r) const {
    require(r > 0.0, ErrorKind::InvalidArgument,
            "radius_search: radius must be positive");
    std::vector<std::size_t> out;
    if (root_ >= 0)
      search_radius(root_, q, r * r, std::numeric_limits<std::size_t>::max(), out);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  struct Node {
    std::size_t id;     // cloud point index stored at this node
    int axis;
    int left = -1, right = -1;
  };

  struct Cand {
    double d2;
    std::size_t idx;
  };
  // "worse" ordering: larger distance, then larger index.
  struct CandWorse {
    bool operator()(const Cand& a, const Cand& b) const {
      if (a.d2 != b.d2) return a.d2 < b.d2;
      return a.idx < b.idx;
    }
  };
  struct CandLess {
    bool operator()(const Cand& a, const Cand& b) const {
      if (a.d2 != b.d2) return a.d2 < b.d2;
      return a.idx < b.idx;
    }
  };

  struct Best {
    std::size_t k = 0;
    std::vector<Cand> items;  // max-heap by CandWorse

    bool full() const { return items.size() >= k; }
    const Cand& worst() const { return items.front(); }

    void offer(const Cand& c) {
      if (!full()) {
        items.push_back(c);
        std::push_heap(items.begin(), items.end(), CandWorse{});
      } else if (CandLess{}(c, worst())) {
        std::pop_heap(items.begin(), items.end(), CandWorse{});
        items.back() = c;
        std::push_heap(items.begin(), items.end(), CandWorse{});
      }
    }
  };

  int build(std::size_t begin, std::size_t end) {
    if (begin >= end) return -1;
    // Split along the widest extent of this subset.
    Vec3 lo = cloud_->points[ids_[begin]], hi = lo;
    for (std::size_t i = begin + 1; i < end; ++i) {
      lo = lo.cwiseMin(cloud_->points[ids_[i]]);
      hi = hi.cwiseMax(cloud_->points[ids_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(ids_.begin() + begin, ids_.begin() + mid,
                     ids_.begin() + end, [&](std::size_t a, std::size_t b) {
                       const double ca = cloud_->points[a][axis];
                       const double cb = cloud_->points[b][axis];
                       if (ca != cb) return ca < cb;
                       return a < b;
                     });
    const int self = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{ids_[mid], axis});
    const int left = build(begin, mid);
    const int right = build(mid + 1, end);
    nodes_[self].left = left;
    nodes_[self].right = right;
    return self;
  }

  void search_knn(int ni, const Vec3& q, std::size_t exclude, Best& best) const {
    const Node& node = nodes_[ni];
    const Vec3& p = cloud_->points[node.id];
    if (node.id != exclude) best.offer(Cand{(p - q).squaredNorm(), node.id});

    const double delta = q[node.axis] - p[node.axis];
    const int near = delta < 0 ? node.left : node.right;
    const int far = delta < 0 ? node.right : node.left;
    if (near >= 0) search_knn(near, q, exclude, best);
    // <= so equal-distance candidates across the split plane are examined
    // and the index tie-break can decide.
    if (far >= 0 && (!best.full() || delta * delta <= best.worst().d2))
      search_knn(far, q, exclude, best);
  }

  void search_radius(int ni, const Vec3& q, double r2, std::size_t exclude,
                     std::vector<std::size_t>& out) const {
    const Node& node = nodes_[ni];
    const Vec3& p = cloud_->points[node.id];
    if (node.id != exclude && (p - q).squaredNorm() <= r2) out.push_back(node.id);
    const double delta = q[node.axis] - p[node.axis];
    const int near = delta < 0 ? node.left : node.right;
    const int far = delta < 0 ? node.right : node.left;
    if (near >= 0) search_radius(near, q, r2, exclude, out);
    if (far >= 0 && delta * delta <= r2) search_radius(far, q, r2, exclude, out);
  }

  const PointCloud* cloud_;
  std::vector<std::size_t> ids_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

/// For each valid point, the indices of its k nearest distinct other
/// points. Entries for invalid points are empty. Ties broken by smaller
/// point index.
inline std::vector<std::vector<std::size_t>> knn_search(const PointCloud& cloud,
                                                        std::size_t k,
                                                        unsigned threads = 1) {
  require(k >= 1, ErrorKind::InvalidArgument, "knn_search: k must be >= 1");
  const auto valid = cloud.valid_indices();
  require(valid.size() >= k + 1, ErrorKind::InsufficientPoints,
          "knn_search: need at least k+1 valid points");
  KdTree tree(cloud);
  std::vector<std::vector<std::size_t>> result(cloud.size());
  parallel_for(valid.size(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t v = begin; v < end; ++v)
      result[valid[v]] = tree.knn(valid[v], k);
  });
  return result;
}

/// All valid points within `radius` of the center point (excluded),
/// ascending index order.
inline std::vector<std::size_t> radius_search(const PointCloud& cloud,
                                              std::size_t center_index,
                                              double radius) {
  require(radius > 0.0, ErrorKind::InvalidArgument,
          "radius_search: radius must be positive");
  require(center_index < cloud.size() && cloud.is_valid(center_index),
          ErrorKind::InvalidArgument, "radius_search: center must be valid");
  KdTree tree(cloud);
  return tree.radius(center_index, radius);
}

}  // namespace votegrid
