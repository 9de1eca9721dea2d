#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "smil/rng.hpp"
#include "smil/sparse_map.hpp"

using namespace smil;

namespace {

SparseMap map_from(int grid_h, int grid_w, int dim,
                   const std::vector<std::pair<GridLoc, std::vector<float>>>& cells) {
  SparseMap m(grid_h, grid_w, dim);
  for (const auto& [loc, e] : cells) {
    m.push_cell(loc.row, loc.col, std::span<const float>(e.data(), e.size()));
  }
  return m;
}

Tensor embeddings_from(const std::vector<std::vector<float>>& rows) {
  Tensor t({static_cast<int>(rows.size()), static_cast<int>(rows[0].size())});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      t.at(static_cast<int>(i), static_cast<int>(j)) = rows[i][j];
    }
  }
  return t;
}

}  // namespace

TEST_CASE("build_map floor division and grid extents") {
  const std::vector<GridLoc> locs{{1000, 512}};
  const SparseMap m = build_map(std::span<const GridLoc>(locs), embeddings_from({{1.0f}}), 128,
                                4096, 4096);
  REQUIRE(m.n_active() == 1);
  CHECK(m.rows[0] == 7);
  CHECK(m.cols[0] == 4);
  CHECK(m.grid_h == 32);
  CHECK(m.grid_w == 32);
  CHECK(m.coalesced);
}

TEST_CASE("build_map sums colliding embeddings") {
  const std::vector<GridLoc> locs{{64, 64}, {70, 70}};
  const SparseMap m = build_map(std::span<const GridLoc>(locs),
                                embeddings_from({{1.0f, 2.0f}, {10.0f, 20.0f}}), 128, 4096, 4096);
  REQUIRE(m.n_active() == 1);
  CHECK(m.rows[0] == 0);
  CHECK(m.cols[0] == 0);
  CHECK(m.cell(0)[0] == 11.0f);
  CHECK(m.cell(0)[1] == 22.0f);
}

TEST_CASE("build_map mean rule averages collisions") {
  const std::vector<GridLoc> locs{{64, 64}, {70, 70}};
  const SparseMap m =
      build_map(std::span<const GridLoc>(locs), embeddings_from({{1.0f}, {3.0f}}), 128, 4096,
                4096, CoalesceRule::mean);
  REQUIRE(m.n_active() == 1);
  CHECK(m.cell(0)[0] == 2.0f);
}

TEST_CASE("build_map with downsampling 1 keeps locations") {
  const std::vector<GridLoc> locs{{3, 4}, {0, 9}};
  const SparseMap m =
      build_map(std::span<const GridLoc>(locs), embeddings_from({{1.0f}, {2.0f}}), 1, 10, 10);
  REQUIRE(m.n_active() == 2);
  CHECK(m.rows[0] == 0);
  CHECK(m.cols[0] == 9);
  CHECK(m.rows[1] == 3);
  CHECK(m.cols[1] == 4);
}

TEST_CASE("build_map validates inputs") {
  const std::vector<GridLoc> locs{{5, 5}};
  CHECK_THROWS_AS(build_map(std::span<const GridLoc>(locs), embeddings_from({{1.0f}, {2.0f}}), 1,
                            10, 10),
                  std::invalid_argument);
  CHECK_THROWS_AS(build_map(std::span<const GridLoc>(locs), embeddings_from({{1.0f}}), 0, 10, 10),
                  std::invalid_argument);
  const std::vector<GridLoc> outside{{10, 5}};
  CHECK_THROWS_AS(
      build_map(std::span<const GridLoc>(outside), embeddings_from({{1.0f}}), 1, 10, 10),
      std::invalid_argument);
}

TEST_CASE("coalesce sorts, merges, and is permutation-invariant bit for bit") {
  Rng rng(123);
  // Deliberately includes three-way collisions.
  std::vector<std::pair<GridLoc, std::vector<float>>> cells;
  for (int i = 0; i < 12; ++i) {
    cells.push_back({{static_cast<int>(rng.uniform_int(0, 2)),
                      static_cast<int>(rng.uniform_int(0, 2))},
                     {static_cast<float>(rng.uniform(-1, 1)),
                      static_cast<float>(rng.uniform(-1, 1))}});
  }
  const SparseMap reference = coalesce(map_from(4, 4, 2, cells));
  CHECK(reference.coalesced);
  for (int i = 1; i < reference.n_active(); ++i) {
    const bool sorted = reference.rows[i - 1] < reference.rows[i] ||
                        (reference.rows[i - 1] == reference.rows[i] &&
                         reference.cols[i - 1] < reference.cols[i]);
    CHECK(sorted);
  }

  std::vector<std::size_t> order(cells.size());
  std::iota(order.begin(), order.end(), 0);
  for (int shuffle = 0; shuffle < 10; ++shuffle) {
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
    }
    std::vector<std::pair<GridLoc, std::vector<float>>> permuted;
    for (std::size_t idx : order) {
      permuted.push_back(cells[idx]);
    }
    const SparseMap again = coalesce(map_from(4, 4, 2, permuted));
    CHECK(again.rows == reference.rows);
    CHECK(again.cols == reference.cols);
    CHECK(again.values == reference.values);
  }

  // No duplicates: coalesce only sorts.
  const SparseMap plain = coalesce(map_from(
      4, 4, 1, {{{3, 1}, {1.0f}}, {{0, 2}, {2.0f}}, {{0, 1}, {3.0f}}}));
  CHECK(plain.n_active() == 3);
  CHECK(plain.rows == std::vector<std::int32_t>({0, 0, 3}));
  CHECK(plain.cols == std::vector<std::int32_t>({1, 2, 1}));
}

TEST_CASE("augment coordinate formulas") {
  SparseMap m = coalesce(map_from(250, 250, 1, {{{10, 20}, {1.0f}}}));

  AugmentSpec rot;
  rot.rot90_quarter_turns = 1;
  const SparseMap r = augment(m, rot);
  REQUIRE(r.n_active() == 1);
  CHECK(r.rows[0] == 20);
  CHECK(r.cols[0] == 239);

  AugmentSpec flip;
  flip.flip_h = true;
  const SparseMap once = augment(m, flip);
  CHECK(once.cols[0] == 229);
  const SparseMap twice = augment(once, flip);
  CHECK(twice.rows == m.rows);
  CHECK(twice.cols == m.cols);
  CHECK(twice.values == m.values);

  const SparseMap same = augment(m, AugmentSpec{});
  CHECK(same.rows == m.rows);
  CHECK(same.cols == m.cols);
  CHECK(same.values == m.values);
}

TEST_CASE("augment composition identities and geometry preservation") {
  Rng rng(77);
  SparseMap raw(40, 40, 3);
  for (int i = 0; i < 15; ++i) {
    std::vector<float> e{static_cast<float>(rng.uniform(-1, 1)),
                         static_cast<float>(rng.uniform(-1, 1)),
                         static_cast<float>(rng.uniform(-1, 1))};
    raw.push_cell(static_cast<int>(rng.uniform_int(0, 39)),
                  static_cast<int>(rng.uniform_int(0, 39)),
                  std::span<const float>(e.data(), e.size()));
  }
  const SparseMap m = coalesce(raw);

  // Four quarter turns come back to the start.
  AugmentSpec quarter;
  quarter.rot90_quarter_turns = 1;
  SparseMap turned = m;
  for (int i = 0; i < 4; ++i) {
    turned = augment(turned, quarter);
  }
  CHECK(turned.rows == m.rows);
  CHECK(turned.cols == m.cols);
  CHECK(turned.values == m.values);

  // Two quarter turns equals flipping both axes.
  AugmentSpec half;
  half.rot90_quarter_turns = 2;
  AugmentSpec both_flips;
  both_flips.flip_h = true;
  both_flips.flip_v = true;
  const SparseMap a = augment(m, half);
  const SparseMap b = augment(m, both_flips);
  CHECK(a.rows == b.rows);
  CHECK(a.cols == b.cols);
  CHECK(a.values == b.values);

  // Bijections preserve the active count and pairwise Chebyshev distances.
  AugmentSpec combo;
  combo.flip_h = true;
  combo.rot90_quarter_turns = 3;
  const SparseMap c = augment(m, combo);
  REQUIRE(c.n_active() == m.n_active());
  auto chebyshev_multiset = [](const SparseMap& map) {
    std::vector<int> d;
    for (int i = 0; i < map.n_active(); ++i) {
      for (int j = i + 1; j < map.n_active(); ++j) {
        d.push_back(std::max(std::abs(map.rows[i] - map.rows[j]),
                             std::abs(map.cols[i] - map.cols[j])));
      }
    }
    std::sort(d.begin(), d.end());
    return d;
  };
  CHECK(chebyshev_multiset(c) == chebyshev_multiset(m));
}

TEST_CASE("jitter stays in bounds and re-coalesces") {
  Rng rng(5);
  SparseMap raw(10, 10, 1);
  for (int i = 0; i < 8; ++i) {
    std::vector<float> e{static_cast<float>(i)};
    raw.push_cell(static_cast<int>(rng.uniform_int(0, 9)),
                  static_cast<int>(rng.uniform_int(0, 9)),
                  std::span<const float>(e.data(), e.size()));
  }
  const SparseMap m = coalesce(raw);
  AugmentSpec spec;
  spec.jitter_radius = 3;
  spec.prng_seed = 99;
  const SparseMap j = augment(m, spec);
  CHECK(j.coalesced);
  for (int i = 0; i < j.n_active(); ++i) {
    CHECK(j.rows[i] >= 0);
    CHECK(j.rows[i] < 10);
    CHECK(j.cols[i] >= 0);
    CHECK(j.cols[i] < 10);
  }
  // Total mass is conserved under sum-coalescing.
  float before = 0, after = 0;
  for (float v : m.values) before += v;
  for (float v : j.values) after += v;
  CHECK(before == doctest::Approx(after));

  AugmentSpec too_big;
  too_big.jitter_radius = 6;
  CHECK_THROWS_AS(augment(m, too_big), std::invalid_argument);
}

TEST_CASE("build_map is order-invariant over instances") {
  Rng rng(13);
  const int k = 20;
  std::vector<GridLoc> locs;
  Tensor emb({k, 2});
  for (int i = 0; i < k; ++i) {
    locs.push_back({static_cast<int>(rng.uniform_int(0, 511)),
                    static_cast<int>(rng.uniform_int(0, 511))});
    emb.at(i, 0) = static_cast<float>(rng.uniform(-1, 1));
    emb.at(i, 1) = static_cast<float>(rng.uniform(-1, 1));
  }
  const SparseMap reference = build_map(std::span<const GridLoc>(locs), emb, 64, 512, 512);

  std::vector<int> order(k);
  std::iota(order.begin(), order.end(), 0);
  for (int shuffle = 0; shuffle < 10; ++shuffle) {
    for (int i = k - 1; i > 0; --i) {
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    }
    std::vector<GridLoc> plocs(static_cast<std::size_t>(k));
    Tensor pemb({k, 2});
    for (int i = 0; i < k; ++i) {
      plocs[static_cast<std::size_t>(i)] = locs[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
      pemb.at(i, 0) = emb.at(order[static_cast<std::size_t>(i)], 0);
      pemb.at(i, 1) = emb.at(order[static_cast<std::size_t>(i)], 1);
    }
    const SparseMap again = build_map(std::span<const GridLoc>(plocs), pemb, 64, 512, 512);
    CHECK(again.rows == reference.rows);
    CHECK(again.cols == reference.cols);
    CHECK(again.values == reference.values);
  }
}

TEST_CASE("coarser downsampling never increases active cells") {
  Rng rng(29);
  const int k = 30;
  std::vector<GridLoc> locs;
  Tensor emb({k, 1});
  for (int i = 0; i < k; ++i) {
    locs.push_back({static_cast<int>(rng.uniform_int(0, 1023)),
                    static_cast<int>(rng.uniform_int(0, 1023))});
    emb.at(i, 0) = 1.0f;
  }
  int previous = k + 1;
  for (int ds : {8, 32, 128, 512}) {
    const SparseMap m = build_map(std::span<const GridLoc>(locs), emb, ds, 1024, 1024);
    CHECK(m.n_active() <= previous);
    previous = m.n_active();
  }
}

TEST_CASE("sample_locations determinism and bounds") {
  Rng one(42);
  const auto a = sample_locations(1, 1, 1, one);
  CHECK(a[0].row == 0);
  CHECK(a[0].col == 0);

  Rng r1(7), r2(7);
  const auto s1 = sample_locations(100, 200, 50, r1);
  const auto s2 = sample_locations(100, 200, 50, r2);
  REQUIRE(s1.size() == s2.size());
  for (std::size_t i = 0; i < s1.size(); ++i) {
    CHECK(s1[i] == s2[i]);
    CHECK(s1[i].row < 100);
    CHECK(s1[i].col < 200);
  }
}

TEST_CASE("sample_locations empirical mean is centered") {
  Rng rng(101);
  const int n = 100000;
  double row_sum = 0, col_sum = 0;
  const auto locs = sample_locations(1000, 1000, n, rng);
  for (const auto& loc : locs) {
    row_sum += loc.row;
    col_sum += loc.col;
  }
  CHECK(std::abs(row_sum / n - 499.5) < 10.0);
  CHECK(std::abs(col_sum / n - 499.5) < 10.0);
}
