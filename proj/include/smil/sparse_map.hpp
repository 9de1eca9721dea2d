#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "smil/rng.hpp"
#include "smil/tensor.hpp"

namespace smil {

struct GridLoc {
  int row = 0;
  int col = 0;

  friend bool operator==(const GridLoc&, const GridLoc&) = default;
};

// Coordinate-format map of embeddings over a downsampled grid. Only active
// cells are stored; `values` packs one dim-length embedding per cell. When
// coalesced, coordinates are distinct and sorted lexicographically.
template <class T>
struct SparseMapT {
  int grid_h = 0;
  int grid_w = 0;
  int dim = 0;
  std::vector<std::int32_t> rows, cols;
  std::vector<T> values;
  bool coalesced = false;

  SparseMapT() = default;

  SparseMapT(int grid_h_in, int grid_w_in, int dim_in)
      : grid_h(grid_h_in), grid_w(grid_w_in), dim(dim_in) {
    require(grid_h > 0 && grid_w > 0 && dim > 0, "sparse map: extents and dim must be positive");
  }

  int n_active() const { return static_cast<int>(rows.size()); }

  std::span<T> cell(int i) {
    return {values.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)};
  }
  std::span<const T> cell(int i) const {
    return {values.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)};
  }

  void push_cell(int r, int c, std::span<const T> embedding) {
    require(r >= 0 && r < grid_h && c >= 0 && c < grid_w, "sparse map: cell out of bounds");
    require(static_cast<int>(embedding.size()) == dim, "sparse map: embedding length != dim");
    rows.push_back(r);
    cols.push_back(c);
    values.insert(values.end(), embedding.begin(), embedding.end());
    coalesced = false;
  }
};

using SparseMap = SparseMapT<float>;

enum class CoalesceRule { sum, mean };

// Spatial transform applied to a coalesced map, in this order: horizontal
// flip, vertical flip, quarter-turn rotations, then per-cell integer jitter
// (the local-shuffling augmentation) clamped to the grid. Embedding values
// are never touched; only coordinates move.
struct AugmentSpec {
  bool flip_h = false;
  bool flip_v = false;
  int rot90_quarter_turns = 0;
  int jitter_radius = 0;
  std::uint64_t prng_seed = 0;

  bool is_identity() const {
    return !flip_h && !flip_v && rot90_quarter_turns % 4 == 0 && jitter_radius == 0;
  }
};

namespace detail {

// Lexicographic cell order; colliding coordinates tie-break on the embedding
// values so the sort (and hence the merge accumulation order) is invariant
// to the input permutation.
template <class T>
struct CellOrder {
  const SparseMapT<T>* map;
  bool operator()(int a, int b) const {
    if (map->rows[a] != map->rows[b]) return map->rows[a] < map->rows[b];
    if (map->cols[a] != map->cols[b]) return map->cols[a] < map->cols[b];
    const auto ea = map->cell(a);
    const auto eb = map->cell(b);
    return std::lexicographical_compare(ea.begin(), ea.end(), eb.begin(), eb.end());
  }
};

}  // namespace detail

// Coalesce plus the provenance needed for backward: cell_map[i] is the output
// index of input cell i, cell_weight[i] the linear coefficient its embedding
// entered the merge with (1 for sum, 1/m for mean over m collisions).
template <class T>
struct CoalesceTrace {
  SparseMapT<T> map;
  std::vector<int> cell_map;
  std::vector<T> cell_weight;
};

template <class T>
CoalesceTrace<T> coalesce_traced(const SparseMapT<T>& in, CoalesceRule rule = CoalesceRule::sum) {
  const int n = in.n_active();
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), detail::CellOrder<T>{&in});

  CoalesceTrace<T> out;
  out.map = SparseMapT<T>(in.grid_h, in.grid_w, in.dim);
  out.cell_map.assign(static_cast<std::size_t>(n), -1);
  out.cell_weight.assign(static_cast<std::size_t>(n), T{1});

  int i = 0;
  while (i < n) {
    int j = i + 1;
    const int r = in.rows[order[i]], c = in.cols[order[i]];
    while (j < n && in.rows[order[j]] == r && in.cols[order[j]] == c) {
      ++j;
    }
    const int out_idx = out.map.n_active();
    out.map.rows.push_back(r);
    out.map.cols.push_back(c);
    const std::size_t base = out.map.values.size();
    out.map.values.resize(base + static_cast<std::size_t>(in.dim), T{});
    const T w = rule == CoalesceRule::mean ? static_cast<T>(1) / static_cast<T>(j - i) : T{1};
    for (int k = i; k < j; ++k) {
      const auto e = in.cell(order[k]);
      for (int d = 0; d < in.dim; ++d) {
        out.map.values[base + static_cast<std::size_t>(d)] += w * e[d];
      }
      out.cell_map[static_cast<std::size_t>(order[k])] = out_idx;
      out.cell_weight[static_cast<std::size_t>(order[k])] = w;
    }
    i = j;
  }
  out.map.coalesced = true;
  return out;
}

template <class T>
SparseMapT<T> coalesce(const SparseMapT<T>& in, CoalesceRule rule = CoalesceRule::sum) {
  return coalesce_traced(in, rule).map;
}

// Scatter instance embeddings onto the grid: location k maps to cell
// (row/downsampling, col/downsampling); the result is coalesced. Trace maps
// instance k back to its merged cell.
template <class T>
struct BuildTrace {
  SparseMapT<T> map;
  std::vector<int> cell_of_instance;
  std::vector<T> weight_of_instance;
};

template <class T>
BuildTrace<T> build_map_traced(std::span<const GridLoc> locations, const TensorT<T>& embeddings,
                               int downsampling, int full_h, int full_w,
                               CoalesceRule rule = CoalesceRule::sum) {
  require(downsampling >= 1, "build_map: downsampling must be >= 1");
  require(full_h >= 1 && full_w >= 1, "build_map: full extents must be positive");
  require(embeddings.ndim() == 2, "build_map: embeddings must be [k, dim]");
  const int k = embeddings.shape[0];
  const int dim = embeddings.shape[1];
  require(static_cast<int>(locations.size()) == k,
          "build_map: " + std::to_string(locations.size()) + " locations for " +
              std::to_string(k) + " embeddings");
  require(k >= 1, "build_map: empty bag");

  const int grid_h = (full_h + downsampling - 1) / downsampling;
  const int grid_w = (full_w + downsampling - 1) / downsampling;
  SparseMapT<T> raw(grid_h, grid_w, dim);
  for (int i = 0; i < k; ++i) {
    const auto& loc = locations[static_cast<std::size_t>(i)];
    require(loc.row >= 0 && loc.row < full_h && loc.col >= 0 && loc.col < full_w,
            "build_map: location (" + std::to_string(loc.row) + "," + std::to_string(loc.col) +
                ") outside [0," + std::to_string(full_h) + ")x[0," + std::to_string(full_w) + ")");
    raw.push_cell(loc.row / downsampling, loc.col / downsampling,
                  std::span<const T>(&embeddings.at(i, 0), static_cast<std::size_t>(dim)));
  }
  auto traced = coalesce_traced(raw, rule);
  return {std::move(traced.map), std::move(traced.cell_map), std::move(traced.cell_weight)};
}

template <class T>
SparseMapT<T> build_map(std::span<const GridLoc> locations, const TensorT<T>& embeddings,
                        int downsampling, int full_h, int full_w,
                        CoalesceRule rule = CoalesceRule::sum) {
  return build_map_traced(locations, embeddings, downsampling, full_h, full_w, rule).map;
}

template <class T>
struct AugmentTrace {
  SparseMapT<T> map;
  std::vector<int> cell_map;     // input cell -> output cell
  std::vector<T> cell_weight;    // merge coefficient after re-coalescing
};

template <class T>
AugmentTrace<T> augment_traced(const SparseMapT<T>& in, const AugmentSpec& spec,
                               CoalesceRule rule = CoalesceRule::sum) {
  require(in.coalesced, "augment: map must be coalesced");
  require(spec.jitter_radius >= 0, "augment: jitter radius must be >= 0");
  require(spec.jitter_radius < std::min(in.grid_h, in.grid_w) / 2 || spec.jitter_radius == 0,
          "augment: jitter radius too large for grid");

  int grid_h = in.grid_h, grid_w = in.grid_w;
  const int n = in.n_active();
  std::vector<int> r(static_cast<std::size_t>(n)), c(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    r[static_cast<std::size_t>(i)] = in.rows[static_cast<std::size_t>(i)];
    c[static_cast<std::size_t>(i)] = in.cols[static_cast<std::size_t>(i)];
  }

  if (spec.flip_h) {
    for (int i = 0; i < n; ++i) c[static_cast<std::size_t>(i)] = grid_w - 1 - c[static_cast<std::size_t>(i)];
  }
  if (spec.flip_v) {
    for (int i = 0; i < n; ++i) r[static_cast<std::size_t>(i)] = grid_h - 1 - r[static_cast<std::size_t>(i)];
  }
  const int turns = ((spec.rot90_quarter_turns % 4) + 4) % 4;
  for (int t = 0; t < turns; ++t) {
    for (int i = 0; i < n; ++i) {
      const int pr = r[static_cast<std::size_t>(i)], pc = c[static_cast<std::size_t>(i)];
      r[static_cast<std::size_t>(i)] = pc;
      c[static_cast<std::size_t>(i)] = grid_h - 1 - pr;
    }
    std::swap(grid_h, grid_w);
  }
  if (spec.jitter_radius > 0) {
    Rng jitter(spec.prng_seed);
    const int radius = spec.jitter_radius;
    for (int i = 0; i < n; ++i) {
      const int dr = static_cast<int>(jitter.uniform_int(-radius, radius));
      const int dc = static_cast<int>(jitter.uniform_int(-radius, radius));
      r[static_cast<std::size_t>(i)] =
          std::clamp(r[static_cast<std::size_t>(i)] + dr, 0, grid_h - 1);
      c[static_cast<std::size_t>(i)] =
          std::clamp(c[static_cast<std::size_t>(i)] + dc, 0, grid_w - 1);
    }
  }

  SparseMapT<T> moved(grid_h, grid_w, in.dim);
  for (int i = 0; i < n; ++i) {
    moved.push_cell(r[static_cast<std::size_t>(i)], c[static_cast<std::size_t>(i)], in.cell(i));
  }
  auto traced = coalesce_traced(moved, rule);
  return {std::move(traced.map), std::move(traced.cell_map), std::move(traced.cell_weight)};
}

template <class T>
SparseMapT<T> augment(const SparseMapT<T>& in, const AugmentSpec& spec,
                      CoalesceRule rule = CoalesceRule::sum) {
  return augment_traced(in, spec, rule).map;
}

// b i.i.d. uniform full-resolution locations; rows then cols per draw.
inline std::vector<GridLoc> sample_locations(int full_h, int full_w, int b, Rng& rng) {
  require(full_h >= 1 && full_w >= 1, "sample_locations: extents must be positive");
  require(b >= 1, "sample_locations: need b >= 1");
  std::vector<GridLoc> out(static_cast<std::size_t>(b));
  for (auto& loc : out) {
    loc.row = static_cast<int>(rng.uniform_int(0, full_h - 1));
    loc.col = static_cast<int>(rng.uniform_int(0, full_w - 1));
  }
  return out;
}

}  // namespace smil
