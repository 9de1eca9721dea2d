#include <doctest.h>

#include "smil/gradcheck.hpp"
#include "smil/rng.hpp"
#include "smil/sparse_cnn.hpp"
#include "support/oracles.hpp"

using namespace smil;

namespace {

template <class T>
SparseMapT<T> random_map(Rng& rng, int grid_h, int grid_w, int dim, int n_cells,
                         double lo = -0.5, double hi = 0.5) {
  SparseMapT<T> raw(grid_h, grid_w, dim);
  for (int i = 0; i < n_cells; ++i) {
    std::vector<T> e(static_cast<std::size_t>(dim));
    for (auto& v : e) {
      v = static_cast<T>(rng.uniform(lo, hi));
    }
    raw.push_cell(static_cast<int>(rng.uniform_int(0, grid_h - 1)),
                  static_cast<int>(rng.uniform_int(0, grid_w - 1)),
                  std::span<const T>(e.data(), e.size()));
  }
  return coalesce(raw);
}

SparseMap single_cell_map(int grid, int r, int c, float value) {
  SparseMap m(grid, grid, 1);
  std::vector<float> e{value};
  m.push_cell(r, c, std::span<const float>(e.data(), e.size()));
  return coalesce(m);
}

}  // namespace

TEST_CASE("sparse conv 1x1 identity kernel reproduces the map") {
  Rng rng(3);
  SparseConvLayerT<float> layer(2, 2, 0, 1, false);
  layer.kernel.zero();
  layer.kernel.at(0, 0, 0, 0) = 1.0f;
  layer.kernel.at(1, 1, 0, 0) = 1.0f;
  const SparseMap in = random_map<float>(rng, 9, 9, 2, 6);
  const SparseMap out = layer.forward(in);
  CHECK(out.rows == in.rows);
  CHECK(out.cols == in.cols);
  CHECK(out.values == in.values);
}

TEST_CASE("sparse conv single active cell spreads over the kernel support") {
  SparseConvLayerT<float> layer(1, 1, 1, 1, false);
  layer.kernel.fill(1.0f);
  const SparseMap in = single_cell_map(12, 5, 5, 2.0f);
  const SparseMap out = layer.forward(in);
  REQUIRE(out.n_active() == 9);
  int idx = 0;
  for (int r = 4; r <= 6; ++r) {
    for (int c = 4; c <= 6; ++c) {
      CHECK(out.rows[idx] == r);
      CHECK(out.cols[idx] == c);
      CHECK(out.cell(idx)[0] == 2.0f);
      ++idx;
    }
  }
}

TEST_CASE("sparse conv sums neighbors at shared receptive fields") {
  SparseConvLayerT<float> layer(1, 1, 1, 1, false);
  layer.kernel.fill(1.0f);
  SparseMap in(8, 8, 1);
  const std::vector<float> one{1.0f};
  in.push_cell(0, 0, std::span<const float>(one.data(), 1));
  in.push_cell(0, 1, std::span<const float>(one.data(), 1));
  in = coalesce(in);
  const SparseMap out = layer.forward(in);
  REQUIRE(out.n_active() > 0);
  CHECK(out.rows[0] == 0);
  CHECK(out.cols[0] == 0);
  CHECK(out.cell(0)[0] == 2.0f);
}

TEST_CASE("sparse conv rejects channel mismatch") {
  SparseConvLayerT<float> layer(3, 2, 1, 1, true);
  Rng rng(9);
  const SparseMap in = random_map<float>(rng, 5, 5, 2, 3);
  CHECK_THROWS_AS(layer.forward(in), std::invalid_argument);
}

TEST_CASE("sparse conv equals dense zero-fill convolution on random maps") {
  Rng rng(2024);
  for (int trial = 0; trial < 40; ++trial) {
    const int grid_h = static_cast<int>(rng.uniform_int(3, 16));
    const int grid_w = static_cast<int>(rng.uniform_int(3, 16));
    const int in_c = static_cast<int>(rng.uniform_int(1, 4));
    const int out_c = static_cast<int>(rng.uniform_int(1, 4));
    const int f = static_cast<int>(rng.uniform_int(0, 2));
    const int stride = static_cast<int>(rng.uniform_int(1, 2));
    const int n_cells = static_cast<int>(rng.uniform_int(1, 12));

    SparseConvLayerT<float> layer(in_c, out_c, f, stride, false);
    for (auto& v : layer.kernel.data) {
      v = static_cast<float>(rng.uniform(-0.5, 0.5));
    }
    const SparseMap in = random_map<float>(rng, grid_h, grid_w, in_c, n_cells);
    const SparseMap out = layer.forward(in);

    const Tensor dense_in = oracle::densify(in);
    const Tensor dense_out =
        oracle::conv2d(dense_in, layer.kernel, Tensor({out_c}), stride, f);

    REQUIRE(dense_out.shape[2] == out.grid_h);
    REQUIRE(dense_out.shape[3] == out.grid_w);
    const Tensor sparse_dense = oracle::densify(out);
    Tensor active_mask({out.grid_h, out.grid_w});
    for (int i = 0; i < out.n_active(); ++i) {
      active_mask.at(out.rows[i], out.cols[i]) = 1.0f;
    }
    for (int o = 0; o < out_c; ++o) {
      for (int r = 0; r < out.grid_h; ++r) {
        for (int c = 0; c < out.grid_w; ++c) {
          if (active_mask.at(r, c) > 0.0f) {
            CHECK(std::abs(dense_out.at(0, o, r, c) - sparse_dense.at(0, o, r, c)) <= 1e-5f);
          } else {
            CHECK(dense_out.at(0, o, r, c) == 0.0f);
          }
        }
      }
    }
  }
}

TEST_CASE("stride-1 active set law: dilation of the input support") {
  Rng rng(55);
  for (int trial = 0; trial < 20; ++trial) {
    const int f = static_cast<int>(rng.uniform_int(0, 2));
    SparseConvLayerT<float> layer(1, 1, f, 1, true);
    layer.init(rng);
    const SparseMap in = random_map<float>(rng, 12, 12, 1, 7);
    const SparseMap out = layer.forward(in);

    std::vector<std::pair<int, int>> want;
    for (int i = 0; i < in.n_active(); ++i) {
      for (int dr = -f; dr <= f; ++dr) {
        for (int dc = -f; dc <= f; ++dc) {
          const int r = in.rows[i] + dr, c = in.cols[i] + dc;
          if (r >= 0 && r < 12 && c >= 0 && c < 12) {
            want.emplace_back(r, c);
          }
        }
      }
    }
    std::sort(want.begin(), want.end());
    want.erase(std::unique(want.begin(), want.end()), want.end());
    REQUIRE(out.n_active() == static_cast<int>(want.size()));
    for (int i = 0; i < out.n_active(); ++i) {
      CHECK(out.rows[i] == want[static_cast<std::size_t>(i)].first);
      CHECK(out.cols[i] == want[static_cast<std::size_t>(i)].second);
    }
  }
}

TEST_CASE("sparse conv is linear in the input (bias disabled)") {
  Rng rng(66);
  SparseConvLayerT<float> layer(2, 3, 1, 1, false);
  layer.init(rng);
  SparseMap a = random_map<float>(rng, 10, 10, 2, 6);
  SparseMap b = a;  // identical active set, fresh values
  for (auto& v : b.values) {
    v = static_cast<float>(rng.uniform(-0.5, 0.5));
  }
  const float alpha = 0.7f, beta = -1.3f;
  SparseMap mix = a;
  for (std::size_t i = 0; i < mix.values.size(); ++i) {
    mix.values[i] = alpha * a.values[i] + beta * b.values[i];
  }
  const SparseMap fa = layer.forward(a);
  const SparseMap fb = layer.forward(b);
  const SparseMap fmix = layer.forward(mix);
  REQUIRE(fmix.values.size() == fa.values.size());
  for (std::size_t i = 0; i < fmix.values.size(); ++i) {
    CHECK(std::abs(fmix.values[i] - (alpha * fa.values[i] + beta * fb.values[i])) <= 1e-5f);
  }
}

TEST_CASE("sparse conv backward identity and hand-computed kernel gradient") {
  // Identity 1x1 kernel passes gradients straight through.
  SparseConvLayerT<float> identity(1, 1, 0, 1, false);
  identity.kernel.at(0, 0, 0, 0) = 1.0f;
  identity.zero_grad();
  const SparseMap in = single_cell_map(6, 2, 3, 4.0f);
  SparseMap grad_out = identity.forward(in);
  grad_out.values = {2.5f};
  const SparseMap grad_in = identity.backward(in, grad_out);
  CHECK(grad_in.values == std::vector<float>({2.5f}));

  // Single input cell, all-ones 3x3 kernel, unit grads at all nine outputs:
  // every kernel tap accumulates the input value.
  SparseConvLayerT<float> ones(1, 1, 1, 1, false);
  ones.kernel.fill(1.0f);
  ones.zero_grad();
  const SparseMap mid = single_cell_map(9, 4, 4, 3.0f);
  SparseMap g = ones.forward(mid);
  for (auto& v : g.values) {
    v = 1.0f;
  }
  ones.backward(mid, g);
  for (float v : ones.grad_kernel.data) {
    CHECK(v == 3.0f);
  }
}

TEST_CASE("sparse conv backward rejects a mismatched active set") {
  Rng rng(4);
  SparseConvLayerT<float> layer(1, 1, 1, 1, true);
  layer.init(rng);
  const SparseMap in = random_map<float>(rng, 8, 8, 1, 4);
  SparseMap wrong = in;  // input active set, not the dilated output set
  CHECK_THROWS_AS(layer.backward(in, wrong), std::invalid_argument);
}

TEST_CASE("sparse pool forward semantics") {
  // avg over a window holding actives (2,) and (4,) gives (3,).
  SparsePoolLayerT<float> avg(SparsePoolKind::avg, 2, 2);
  SparseMap in(4, 4, 1);
  const std::vector<float> two{2.0f}, four{4.0f};
  in.push_cell(0, 0, std::span<const float>(two.data(), 1));
  in.push_cell(1, 1, std::span<const float>(four.data(), 1));
  in = coalesce(in);
  const SparseMap pooled = avg.forward(in);
  REQUIRE(pooled.n_active() == 1);
  CHECK(pooled.cell(0)[0] == 3.0f);

  // A single active cell passes through for both kinds.
  SparsePoolLayerT<float> mx(SparsePoolKind::max, 2, 2);
  const SparseMap lone = single_cell_map(6, 3, 2, -1.25f);
  CHECK(mx.forward(lone).values == std::vector<float>({-1.25f}));
  CHECK(avg.forward(lone).values == std::vector<float>({-1.25f}));

  // Windows with no active cells produce no output cells.
  const SparseMap sparse_out = mx.forward(lone);
  CHECK(sparse_out.n_active() == 1);
}

TEST_CASE("avg sparse pooling of constant embeddings is count-normalized") {
  Rng rng(8);
  SparsePoolLayerT<float> avg(SparsePoolKind::avg, 3, 2);
  SparseMap in(9, 9, 2);
  const std::vector<float> v{0.75f, -2.0f};
  for (int i = 0; i < 10; ++i) {
    in.push_cell(static_cast<int>(rng.uniform_int(0, 8)), static_cast<int>(rng.uniform_int(0, 8)),
                 std::span<const float>(v.data(), 2));
  }
  in = coalesce(in);
  // Duplicate pushes coalesce by sum, so rebuild values to the constant.
  for (int i = 0; i < in.n_active(); ++i) {
    in.cell(i)[0] = v[0];
    in.cell(i)[1] = v[1];
  }
  const SparseMap pooled = avg.forward(in);
  for (int i = 0; i < pooled.n_active(); ++i) {
    CHECK(pooled.cell(i)[0] == doctest::Approx(v[0]));
    CHECK(pooled.cell(i)[1] == doctest::Approx(v[1]));
  }
}

TEST_CASE("adaptive pooling to dense") {
  SparseMap in(8, 8, 1);
  const std::vector<float> a{1.0f}, b{3.0f};
  in.push_cell(1, 1, std::span<const float>(a.data(), 1));
  in.push_cell(6, 2, std::span<const float>(b.data(), 1));
  in = coalesce(in);

  const Tensor avg = adaptive_pool_to_dense(in, 1, 1, SparsePoolKind::avg);
  CHECK(avg.shape == std::vector<int>({1, 1, 1}));
  CHECK(avg.at(0, 0, 0) == doctest::Approx(2.0f));

  const Tensor mx = adaptive_pool_to_dense(in, 1, 1, SparsePoolKind::max);
  CHECK(mx.at(0, 0, 0) == 3.0f);

  // 2x2 partition: both actives sit in the left column, the right stays 0.
  const Tensor quad = adaptive_pool_to_dense(in, 2, 2, SparsePoolKind::avg);
  CHECK(quad.at(0, 0, 0) == 1.0f);
  CHECK(quad.at(1, 0, 0) == 3.0f);
  CHECK(quad.at(0, 1, 0) == 0.0f);
  CHECK(quad.at(1, 1, 0) == 0.0f);

  SparseMap empty(4, 4, 1);
  empty.coalesced = true;
  CHECK_THROWS_AS(adaptive_pool_to_dense(empty, 1, 1, SparsePoolKind::avg),
                  std::invalid_argument);
}

TEST_CASE("sparse backward passes finite differences") {
  Rng rng(909);
  // Conv: kernel, bias, and embeddings.
  SparseConvLayerT<double> layer(2, 2, 1, 1, true);
  for (auto& v : layer.kernel.data) v = rng.uniform(-1, 1);
  for (auto& v : layer.bias.data) v = rng.uniform(-1, 1);
  SparseMapT<double> in = random_map<double>(rng, 7, 7, 2, 5);
  SparseMapT<double> proj = layer.forward(in);
  for (auto& v : proj.values) v = rng.uniform(-1, 1);
  const auto loss = [&] {
    const auto out = layer.forward(in);
    double s = 0;
    for (std::size_t i = 0; i < out.values.size(); ++i) s += out.values[i] * proj.values[i];
    return s;
  };
  layer.zero_grad();
  SparseMapT<double> grad_in = layer.backward(in, proj);
  CHECK(finite_difference_max_err(layer.kernel.data, loss, layer.grad_kernel.data) < 1e-4);
  CHECK(finite_difference_max_err(layer.bias.data, loss, layer.grad_bias.data) < 1e-4);
  CHECK(finite_difference_max_err(in.values, loss, grad_in.values) < 1e-4);

  // Pooling, both kinds.
  for (SparsePoolKind kind : {SparsePoolKind::max, SparsePoolKind::avg}) {
    SparsePoolLayerT<double> pool(kind, 2, 2);
    SparseMapT<double> pin = random_map<double>(rng, 6, 6, 2, 6);
    SparseMapT<double> pproj = pool.forward(pin);
    for (auto& v : pproj.values) v = rng.uniform(-1, 1);
    const auto ploss = [&] {
      const auto out = pool.forward(pin);
      double s = 0;
      for (std::size_t i = 0; i < out.values.size(); ++i) s += out.values[i] * pproj.values[i];
      return s;
    };
    const SparseMapT<double> pgrad = pool.backward(pin, pproj);
    CHECK(finite_difference_max_err(pin.values, ploss, pgrad.values) < 1e-4);
  }
}
