#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "spm/ops.hpp"
#include "spm/parallel.hpp"
#include "spm/sfc.hpp"

namespace spm {

inline constexpr int kIgnoreLabel = -1;

struct PointCloud {
  Tensor coords;  // [N,3] meters
  Tensor feats;   // [N,C]
  std::optional<std::vector<int>> labels;

  std::size_t size() const { return coords.empty() ? 0 : coords.rows(); }
  std::size_t feat_dim() const { return feats.empty() ? 0 : feats.cols(); }

  void validate(std::optional<int> num_classes = std::nullopt) const {
    if (coords.empty()) throw ContractError("point cloud is empty");
    if (coords.rank() != 2 || coords.cols() != 3) throw DimensionError("point cloud coords must be [N,3]");
    if (feats.rank() != 2 || feats.rows() != coords.rows()) throw DimensionError("point cloud feats must be [N,C]");
    if (!coords.all_finite()) throw NumericError("point cloud coords must be finite");
    if (!feats.all_finite()) throw NumericError("point cloud feats must be finite");
    if (labels) {
      if (labels->size() != coords.rows()) throw DimensionError("point cloud needs one label per point");
      if (num_classes)
        for (int l : *labels)
          if (l != kIgnoreLabel && (l < 0 || l >= *num_classes)) throw RangeError("label " + std::to_string(l) + " out of range");
    }
  }
};

namespace detail {
inline constexpr int kPackBits = 21;

inline std::uint64_t pack_cell(const Cell& c) {
  return static_cast<std::uint64_t>(c[0]) << (2 * kPackBits) | static_cast<std::uint64_t>(c[1]) << kPackBits |
         static_cast<std::uint64_t>(c[2]);
}

inline bool packable(const Cell& c) {
  for (std::int32_t v : c)
    if (v < 0 || v >= (1 << kPackBits)) return false;
  return true;
}
}  // namespace detail

/// Sparse set of occupied cells with nonnegative coordinates.
struct VoxelSet {
  double grid_size = 0.0;
  std::vector<Cell> cells;                          // unique, lexicographically sorted
  std::unordered_map<std::uint64_t, std::int64_t> cell_index;
  IndexVec point_to_cell;                           // source point -> row
  Tensor cell_feats;                                // [M,C]
  std::vector<int> cell_labels;                     // empty when the source had no labels
  Cell origin{};                                    // absolute cell mapped to (0,0,0)

  std::size_t size() const { return cells.size(); }

  std::optional<std::int64_t> find(const Cell& c) const {
    if (!detail::packable(c)) return std::nullopt;
    auto it = cell_index.find(detail::pack_cell(c));
    if (it == cell_index.end()) return std::nullopt;
    return it->second;
  }
};

namespace detail {

inline void index_cells(VoxelSet& vs) {
  vs.cell_index.clear();
  vs.cell_index.reserve(vs.cells.size() * 2);
  for (std::size_t i = 0; i < vs.cells.size(); ++i) {
    if (!packable(vs.cells[i])) throw RangeError("voxel coordinates exceed 21 bits per axis");
    vs.cell_index.emplace(pack_cell(vs.cells[i]), static_cast<std::int64_t>(i));
  }
}

// Majority label; ties go to the smallest id, ignore labels do not vote.
inline int majority_label(const std::map<int, std::size_t>& votes) {
  int best = kIgnoreLabel;
  std::size_t best_count = 0;
  for (const auto& [label, count] : votes) {
    if (label == kIgnoreLabel) continue;
    if (count > best_count) {
      best = label;
      best_count = count;
    }
  }
  return best;
}

}  // namespace detail

/// cell = floor(coord / grid_size), shifted so the per-axis minimum is 0.
/// Co-located points are merged: mean features, majority label.
inline VoxelSet voxelize(const PointCloud& pc, double grid_size) {
  if (pc.size() == 0) throw ContractError("voxelize: empty point cloud");
  pc.validate();
  if (!(grid_size > 0.0)) throw DomainError("voxelize: grid_size must be positive");
  const std::size_t n = pc.size(), c = pc.feat_dim();

  std::vector<std::array<std::int64_t, 3>> raw(n);
  std::array<std::int64_t, 3> lo{INT64_MAX, INT64_MAX, INT64_MAX};
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) {
      const double q = std::floor(pc.coords.at(i, a) / grid_size);
      if (std::abs(q) > 9.0e15) throw RangeError("voxelize: coordinate too large for the grid");
      raw[i][a] = static_cast<std::int64_t>(q);
      lo[a] = std::min(lo[a], raw[i][a]);
    }

  std::vector<Cell> shifted(n);
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) {
      const std::int64_t v = raw[i][a] - lo[a];
      if (v >= (std::int64_t{1} << detail::kPackBits)) throw RangeError("voxelize: cloud extent exceeds 2^21 cells per axis");
      shifted[i][a] = static_cast<std::int32_t>(v);
    }

  VoxelSet vs;
  vs.grid_size = grid_size;
  vs.origin = {static_cast<std::int32_t>(lo[0]), static_cast<std::int32_t>(lo[1]), static_cast<std::int32_t>(lo[2])};
  vs.cells = shifted;
  std::sort(vs.cells.begin(), vs.cells.end());
  vs.cells.erase(std::unique(vs.cells.begin(), vs.cells.end()), vs.cells.end());
  detail::index_cells(vs);

  const std::size_t m = vs.cells.size();
  vs.point_to_cell.resize(n);
  std::vector<std::size_t> counts(m, 0);
  vs.cell_feats = Tensor({m, c});
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t row = *vs.find(shifted[i]);
    vs.point_to_cell[i] = row;
    ++counts[static_cast<std::size_t>(row)];
    for (std::size_t j = 0; j < c; ++j) vs.cell_feats.at(static_cast<std::size_t>(row), j) += pc.feats.at(i, j);
  }
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < c; ++j) vs.cell_feats.at(r, j) /= static_cast<double>(counts[r]);

  if (pc.labels) {
    std::vector<std::map<int, std::size_t>> votes(m);
    for (std::size_t i = 0; i < n; ++i) ++votes[static_cast<std::size_t>(vs.point_to_cell[i])][(*pc.labels)[i]];
    vs.cell_labels.resize(m);
    for (std::size_t r = 0; r < m; ++r) vs.cell_labels[r] = detail::majority_label(votes[r]);
  }
  return vs;
}

/// Row index of each of the 27 neighbors (offset o = (dx+1)*9 + (dy+1)*3 + (dz+1))
/// of every active cell, or -1 when that neighbor is inactive.
struct NeighborTable {
  static constexpr std::size_t kOffsets = 27;
  static constexpr std::size_t kCenter = 13;

  std::size_t rows = 0;
  IndexVec index;  // rows * 27

  std::int64_t at(std::size_t row, std::size_t offset) const { return index[row * kOffsets + offset]; }

  static std::array<int, 3> offset_delta(std::size_t o) {
    return {static_cast<int>(o / 9) - 1, static_cast<int>((o / 3) % 3) - 1, static_cast<int>(o % 3) - 1};
  }
};

inline NeighborTable build_neighbor_table(const VoxelSet& vs) {
  NeighborTable t;
  t.rows = vs.size();
  t.index.assign(t.rows * NeighborTable::kOffsets, -1);
  for (std::size_t i = 0; i < t.rows; ++i)
    for (std::size_t o = 0; o < NeighborTable::kOffsets; ++o) {
      const auto d = NeighborTable::offset_delta(o);
      const Cell nb = {vs.cells[i][0] + d[0], vs.cells[i][1] + d[1], vs.cells[i][2] + d[2]};
      if (auto r = vs.find(nb)) t.index[i * NeighborTable::kOffsets + o] = *r;
    }
  return t;
}

/// Submanifold 3x3x3 convolution evaluated only at active cells:
/// out[i] = bias + sum over present offsets o of x[nbr(i,o)] · W[o].
inline Var submconv3d(const NeighborTable& table, const Var& x, const Var& weight, const Var& bias) {
  if (x.shape().size() != 2 || x.rows() != table.rows) throw DimensionError("submconv3d: features must be [M,Cin] with M = active cells");
  if (weight.shape().size() != 3 || weight.shape()[0] != NeighborTable::kOffsets || weight.shape()[1] != x.cols()) {
    throw DimensionError("submconv3d: weights must be [27,Cin,Cout], got " + shape_str(weight.shape()) + " for Cin=" +
                         std::to_string(x.cols()));
  }
  const std::size_t m = table.rows, cin = x.cols(), cout = weight.shape()[2];
  if (bias.size() != cout) throw DimensionError("submconv3d: bias must have Cout entries");

  Tensor y({m, cout});
  const double* xv = x.value().data();
  const double* wv = weight.value().data();
  const double* bv = bias.value().data();
  parallel_for(m, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      double* yr = y.data() + i * cout;
      for (std::size_t j = 0; j < cout; ++j) yr[j] = bv[j];
      for (std::size_t o = 0; o < NeighborTable::kOffsets; ++o) {
        const std::int64_t nb = table.at(i, o);
        if (nb < 0) continue;
        const double* xr = xv + static_cast<std::size_t>(nb) * cin;
        const double* w = wv + o * cin * cout;
        for (std::size_t p = 0; p < cin; ++p) {
          const double xp = xr[p];
          const double* wr = w + p * cout;
          for (std::size_t j = 0; j < cout; ++j) yr[j] += xp * wr[j];
        }
      }
    }
  });

  return Var::from_op("submconv3d", std::move(y), {x, weight, bias}, [m, cin, cout, idx = table.index](Node& self) {
    const double* dy = self.grad.data();
    const double* xv = self.parent_value(0).data();
    const double* wv = self.parent_value(1).data();
    Tensor* gx = self.parent_grad(0);
    Tensor* gw = self.parent_grad(1);
    Tensor* gb = self.parent_grad(2);
    for (std::size_t i = 0; i < m; ++i) {
      const double* dyr = dy + i * cout;
      if (gb)
        for (std::size_t j = 0; j < cout; ++j) (*gb)[j] += dyr[j];
      for (std::size_t o = 0; o < NeighborTable::kOffsets; ++o) {
        const std::int64_t nb = idx[i * NeighborTable::kOffsets + o];
        if (nb < 0) continue;
        const auto r = static_cast<std::size_t>(nb);
        for (std::size_t p = 0; p < cin; ++p) {
          const double* wr = wv + (o * cin + p) * cout;
          if (gx) {
            double s = 0.0;
            for (std::size_t j = 0; j < cout; ++j) s += dyr[j] * wr[j];
            (*gx)[r * cin + p] += s;
          }
          if (gw) {
            const double xp = xv[r * cin + p];
            double* gwr = gw->data() + (o * cin + p) * cout;
            for (std::size_t j = 0; j < cout; ++j) gwr[j] += xp * dyr[j];
          }
        }
      }
    }
  });
}

/// Convenience overload convolving the voxelized input features.
inline Var submconv3d(const VoxelSet& vs, const NeighborTable& table, const Var& weight, const Var& bias) {
  return submconv3d(table, constant(vs.cell_feats), weight, bias);
}

struct PoolingMap {
  IndexVec parent;                  // fine row -> coarse row
  std::vector<std::size_t> counts;  // children per coarse row

  std::size_t fine_size() const { return parent.size(); }
  std::size_t coarse_size() const { return counts.size(); }
};

/// Coarse cell = floor(fine_cell / factor). A factor of 1 yields the identity map.
inline std::pair<VoxelSet, PoolingMap> pool_cells(const VoxelSet& vs, int factor) {
  if (factor < 1) throw DomainError("grid pooling factor must be >= 1");
  VoxelSet coarse;
  coarse.grid_size = vs.grid_size * factor;
  coarse.origin = vs.origin;
  std::vector<Cell> mapped(vs.size());
  for (std::size_t i = 0; i < vs.size(); ++i)
    for (int a = 0; a < 3; ++a) mapped[i][a] = vs.cells[i][a] / factor;
  coarse.cells = mapped;
  std::sort(coarse.cells.begin(), coarse.cells.end());
  coarse.cells.erase(std::unique(coarse.cells.begin(), coarse.cells.end()), coarse.cells.end());
  detail::index_cells(coarse);

  PoolingMap map;
  map.parent.resize(vs.size());
  map.counts.assign(coarse.size(), 0);
  for (std::size_t i = 0; i < vs.size(); ++i) {
    map.parent[i] = *coarse.find(mapped[i]);
    ++map.counts[static_cast<std::size_t>(map.parent[i])];
  }
  coarse.point_to_cell.resize(vs.point_to_cell.size());
  for (std::size_t p = 0; p < vs.point_to_cell.size(); ++p) {
    coarse.point_to_cell[p] = map.parent[static_cast<std::size_t>(vs.point_to_cell[p])];
  }
  if (!vs.cell_feats.empty()) {
    NoGradGuard guard;
    coarse.cell_feats = segment_reduce(constant(vs.cell_feats), map.parent, coarse.size(), Reduce::Mean).value();
  }
  return {std::move(coarse), std::move(map)};
}

inline Var pool_features(const Var& feats, const PoolingMap& map, Reduce reduce = Reduce::Mean) {
  return segment_reduce(feats, map.parent, map.coarse_size(), reduce);
}

struct GridPoolResult {
  VoxelSet coarse;
  Var feats;
  PoolingMap map;
};

inline GridPoolResult grid_pool(const VoxelSet& vs, const Var& feats, int factor, Reduce reduce = Reduce::Mean) {
  if (feats.shape().size() != 2 || feats.rows() != vs.size()) throw DimensionError("grid_pool: features must have one row per cell");
  auto [coarse, map] = pool_cells(vs, factor);
  Var pooled = pool_features(feats, map, reduce);
  return {std::move(coarse), std::move(pooled), std::move(map)};
}

/// Broadcasts each coarse row to its children; the gradient sums over children.
inline Var grid_unpool(const Var& coarse_feats, const PoolingMap& map) {
  const std::size_t mc = coarse_feats.rows();
  if (map.coarse_size() != mc) throw ContractError("grid_unpool: map does not match coarse feature rows");
  for (std::int64_t p : map.parent)
    if (p < 0 || static_cast<std::size_t>(p) >= mc) throw RangeError("grid_unpool: dangling parent index " + std::to_string(p));
  return gather_rows(coarse_feats, map.parent);
}

}  // namespace spm
