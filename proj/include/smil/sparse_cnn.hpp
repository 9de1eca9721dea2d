#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "smil/layers.hpp"
#include "smil/sparse_map.hpp"
#include "smil/tensor.hpp"

namespace smil {

namespace detail {

inline std::int64_t coord_key(int r, int c) {
  return (static_cast<std::int64_t>(r) << 32) | static_cast<std::uint32_t>(c);
}

template <class T>
std::unordered_map<std::int64_t, int> coord_index(const SparseMapT<T>& map) {
  std::unordered_map<std::int64_t, int> index;
  index.reserve(static_cast<std::size_t>(map.n_active()) * 2);
  for (int i = 0; i < map.n_active(); ++i) {
    index.emplace(coord_key(map.rows[i], map.cols[i]), i);
  }
  return index;
}

inline int ceil_div_nonneg(int a, int b) { return a <= 0 ? 0 : (a + b - 1) / b; }

}  // namespace detail

// Convolution over active cells only. Output cell (i, j) exists iff at least
// one input cell falls in its receptive field {(s*i+m, s*j+n) : |m|,|n| <= f};
// taps outside the grid or at inactive cells contribute nothing. Output cells
// are produced in sorted order and taps are summed in a fixed order, so
// results are bit-reproducible.
template <class T>
struct SparseConvLayerT {
  TensorT<T> kernel;  // [out_c, in_c, 2f+1, 2f+1]
  TensorT<T> bias;    // [out_c]
  TensorT<T> grad_kernel, grad_bias;
  int stride = 1;
  bool use_bias = true;

  SparseConvLayerT() = default;

  SparseConvLayerT(int in_c, int out_c, int half_size, int stride_in, bool use_bias_in = true)
      : kernel({out_c, in_c, 2 * half_size + 1, 2 * half_size + 1}),
        bias({out_c}),
        grad_kernel(kernel.shape),
        grad_bias({out_c}),
        stride(stride_in),
        use_bias(use_bias_in) {
    require(half_size >= 0, "sparse conv: half size must be >= 0");
    require(stride >= 1, "sparse conv: stride must be >= 1");
  }

  int in_channels() const { return kernel.shape[1]; }
  int out_channels() const { return kernel.shape[0]; }
  int half_size() const { return (kernel.shape[2] - 1) / 2; }

  void init(Rng& rng) {
    const int k = kernel.shape[2];
    glorot_uniform(kernel, in_channels() * k * k, out_channels() * k * k, rng);
    bias.zero();
  }

  void zero_grad() {
    grad_kernel.zero();
    grad_bias.zero();
  }

  int out_extent(int in_extent) const { return (in_extent - 1) / stride + 1; }

  // Active output coordinates: the input active set dilated by the kernel
  // support, mapped through the stride and clipped to the output grid.
  std::vector<std::int64_t> active_output_keys(const SparseMapT<T>& in) const {
    const int f = half_size();
    const int oh = out_extent(in.grid_h), ow = out_extent(in.grid_w);
    std::vector<std::int64_t> keys;
    keys.reserve(static_cast<std::size_t>(in.n_active()) * (2 * f + 1) * (2 * f + 1));
    for (int idx = 0; idx < in.n_active(); ++idx) {
      const int r = in.rows[idx], c = in.cols[idx];
      const int i_lo = std::max(0, detail::ceil_div_nonneg(r - f, stride));
      const int i_hi = std::min(oh - 1, (r + f) / stride);
      const int j_lo = std::max(0, detail::ceil_div_nonneg(c - f, stride));
      const int j_hi = std::min(ow - 1, (c + f) / stride);
      for (int i = i_lo; i <= i_hi; ++i) {
        for (int j = j_lo; j <= j_hi; ++j) {
          keys.push_back(detail::coord_key(i, j));
        }
      }
    }
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    return keys;
  }

  SparseMapT<T> forward(const SparseMapT<T>& in) const {
    require(in.coalesced, "sparse conv: input must be coalesced");
    require(in.dim == in_channels(), "sparse conv: channel mismatch (map dim " +
                                         std::to_string(in.dim) + ", layer expects " +
                                         std::to_string(in_channels()) + ")");
    const int f = half_size();
    const int out_c = out_channels(), in_c = in_channels();
    const auto index = detail::coord_index(in);
    const auto keys = active_output_keys(in);

    SparseMapT<T> out(out_extent(in.grid_h), out_extent(in.grid_w), out_c);
    out.rows.reserve(keys.size());
    out.cols.reserve(keys.size());
    out.values.assign(keys.size() * static_cast<std::size_t>(out_c), T{});
    for (std::size_t cell_idx = 0; cell_idx < keys.size(); ++cell_idx) {
      const int i = static_cast<int>(keys[cell_idx] >> 32);
      const int j = static_cast<int>(static_cast<std::int32_t>(keys[cell_idx]));
      out.rows.push_back(i);
      out.cols.push_back(j);
      T* acc = out.values.data() + cell_idx * static_cast<std::size_t>(out_c);
      if (use_bias) {
        for (int o = 0; o < out_c; ++o) {
          acc[o] = bias.at(o);
        }
      }
      for (int m = -f; m <= f; ++m) {
        const int r = stride * i + m;
        if (r < 0 || r >= in.grid_h) continue;
        for (int n = -f; n <= f; ++n) {
          const int c = stride * j + n;
          if (c < 0 || c >= in.grid_w) continue;
          const auto hit = index.find(detail::coord_key(r, c));
          if (hit == index.end()) continue;
          const auto e = in.cell(hit->second);
          for (int o = 0; o < out_c; ++o) {
            const T* ko = &kernel.at(o, 0, m + f, n + f);
            const std::size_t kstride =
                static_cast<std::size_t>(kernel.shape[2]) * kernel.shape[3];
            T sum{};
            for (int ch = 0; ch < in_c; ++ch) {
              sum += ko[static_cast<std::size_t>(ch) * kstride] * e[ch];
            }
            acc[o] += sum;
          }
        }
      }
    }
    out.coalesced = true;
    return out;
  }

  // grad_out must cover exactly the forward output active set. Accumulates
  // kernel/bias gradients; returns the gradient over the input active set.
  SparseMapT<T> backward(const SparseMapT<T>& in, const SparseMapT<T>& grad_out) {
    require(in.coalesced && grad_out.coalesced, "sparse conv backward: maps must be coalesced");
    require(in.dim == in_channels(), "sparse conv backward: channel mismatch");
    require(grad_out.dim == out_channels(), "sparse conv backward: grad channel mismatch");
    const auto keys = active_output_keys(in);
    require(static_cast<int>(keys.size()) == grad_out.n_active(),
            "sparse conv backward: active-set mismatch");
    for (int i = 0; i < grad_out.n_active(); ++i) {
      require(detail::coord_key(grad_out.rows[i], grad_out.cols[i]) == keys[static_cast<std::size_t>(i)],
              "sparse conv backward: active-set mismatch");
    }

    const int f = half_size();
    const int out_c = out_channels(), in_c = in_channels();
    const auto index = detail::coord_index(in);

    SparseMapT<T> grad_in(in.grid_h, in.grid_w, in.dim);
    grad_in.rows = in.rows;
    grad_in.cols = in.cols;
    grad_in.values.assign(in.values.size(), T{});
    grad_in.coalesced = true;

    const std::size_t kstride = static_cast<std::size_t>(kernel.shape[2]) * kernel.shape[3];
    for (int cell_idx = 0; cell_idx < grad_out.n_active(); ++cell_idx) {
      const int i = grad_out.rows[cell_idx], j = grad_out.cols[cell_idx];
      const auto g = grad_out.cell(cell_idx);
      if (use_bias) {
        for (int o = 0; o < out_c; ++o) {
          grad_bias.at(o) += g[o];
        }
      }
      for (int m = -f; m <= f; ++m) {
        const int r = stride * i + m;
        if (r < 0 || r >= in.grid_h) continue;
        for (int n = -f; n <= f; ++n) {
          const int c = stride * j + n;
          if (c < 0 || c >= in.grid_w) continue;
          const auto hit = index.find(detail::coord_key(r, c));
          if (hit == index.end()) continue;
          const auto e = in.cell(hit->second);
          const auto gi = grad_in.cell(hit->second);
          for (int o = 0; o < out_c; ++o) {
            const T go = g[o];
            T* gk = &grad_kernel.at(o, 0, m + f, n + f);
            const T* ko = &kernel.at(o, 0, m + f, n + f);
            for (int ch = 0; ch < in_c; ++ch) {
              gk[static_cast<std::size_t>(ch) * kstride] += go * e[ch];
              gi[ch] += go * ko[static_cast<std::size_t>(ch) * kstride];
            }
          }
        }
      }
    }
    return grad_in;
  }

  std::vector<ParamRefT<T>> parameters(const std::string& prefix) {
    std::vector<ParamRefT<T>> out{{prefix + ".kernel", &kernel, &grad_kernel}};
    if (use_bias) {
      out.push_back({prefix + ".bias", &bias, &grad_bias});
    }
    return out;
  }
};

enum class SparsePoolKind { max, avg };

// Pooling over active cells only: the window at output (i, j) covers input
// offsets {0..window-1}^2 from (s*i, s*j); empty windows produce no output
// cell, and avg divides by the count of active cells, not the window area.
template <class T>
struct SparsePoolLayerT {
  SparsePoolKind kind = SparsePoolKind::max;
  int window = 1;
  int stride = 1;

  SparsePoolLayerT() = default;
  SparsePoolLayerT(SparsePoolKind kind_in, int window_in, int stride_in)
      : kind(kind_in), window(window_in), stride(stride_in) {
    require(window >= 1, "sparse pool: window must be >= 1");
    require(stride >= 1, "sparse pool: stride must be >= 1");
  }

  int out_extent(int in_extent) const { return (in_extent - 1) / stride + 1; }

  // For each output cell, the covering input cell indices in sorted input
  // order. Used by both passes so routing matches exactly.
  std::vector<std::pair<std::int64_t, int>> coverage(const SparseMapT<T>& in) const {
    const int oh = out_extent(in.grid_h), ow = out_extent(in.grid_w);
    std::vector<std::pair<std::int64_t, int>> cover;
    for (int idx = 0; idx < in.n_active(); ++idx) {
      const int r = in.rows[idx], c = in.cols[idx];
      const int i_lo = std::max(0, detail::ceil_div_nonneg(r - window + 1, stride));
      const int i_hi = std::min(oh - 1, r / stride);
      const int j_lo = std::max(0, detail::ceil_div_nonneg(c - window + 1, stride));
      const int j_hi = std::min(ow - 1, c / stride);
      for (int i = i_lo; i <= i_hi; ++i) {
        for (int j = j_lo; j <= j_hi; ++j) {
          cover.emplace_back(detail::coord_key(i, j), idx);
        }
      }
    }
    std::sort(cover.begin(), cover.end());
    return cover;
  }

  SparseMapT<T> forward(const SparseMapT<T>& in) const {
    require(in.coalesced, "sparse pool: input must be coalesced");
    const auto cover = coverage(in);
    SparseMapT<T> out(out_extent(in.grid_h), out_extent(in.grid_w), in.dim);
    std::size_t i = 0;
    while (i < cover.size()) {
      std::size_t j = i;
      while (j < cover.size() && cover[j].first == cover[i].first) {
        ++j;
      }
      out.rows.push_back(static_cast<int>(cover[i].first >> 32));
      out.cols.push_back(static_cast<int>(static_cast<std::int32_t>(cover[i].first)));
      const std::size_t base = out.values.size();
      out.values.resize(base + static_cast<std::size_t>(in.dim));
      T* dst = out.values.data() + base;
      const auto first = in.cell(cover[i].second);
      std::copy(first.begin(), first.end(), dst);
      for (std::size_t k = i + 1; k < j; ++k) {
        const auto e = in.cell(cover[k].second);
        for (int d = 0; d < in.dim; ++d) {
          if (kind == SparsePoolKind::max) {
            dst[d] = std::max(dst[d], e[d]);
          } else {
            dst[d] += e[d];
          }
        }
      }
      if (kind == SparsePoolKind::avg) {
        const T inv = static_cast<T>(1) / static_cast<T>(j - i);
        for (int d = 0; d < in.dim; ++d) {
          dst[d] *= inv;
        }
      }
      i = j;
    }
    out.coalesced = true;
    return out;
  }

  SparseMapT<T> backward(const SparseMapT<T>& in, const SparseMapT<T>& grad_out) const {
    require(in.coalesced && grad_out.coalesced, "sparse pool backward: maps must be coalesced");
    require(grad_out.dim == in.dim, "sparse pool backward: dim mismatch");
    const auto cover = coverage(in);
    SparseMapT<T> grad_in(in.grid_h, in.grid_w, in.dim);
    grad_in.rows = in.rows;
    grad_in.cols = in.cols;
    grad_in.values.assign(in.values.size(), T{});
    grad_in.coalesced = true;

    std::size_t i = 0;
    int out_idx = 0;
    while (i < cover.size()) {
      std::size_t j = i;
      while (j < cover.size() && cover[j].first == cover[i].first) {
        ++j;
      }
      require(out_idx < grad_out.n_active() &&
                  detail::coord_key(grad_out.rows[out_idx], grad_out.cols[out_idx]) ==
                      cover[i].first,
              "sparse pool backward: active-set mismatch");
      const auto g = grad_out.cell(out_idx);
      if (kind == SparsePoolKind::avg) {
        const T inv = static_cast<T>(1) / static_cast<T>(j - i);
        for (std::size_t k = i; k < j; ++k) {
          const auto gi = grad_in.cell(cover[k].second);
          for (int d = 0; d < in.dim; ++d) {
            gi[d] += g[d] * inv;
          }
        }
      } else {
        // Per-dimension argmax; first covering cell in sorted order wins ties.
        for (int d = 0; d < in.dim; ++d) {
          std::size_t best = i;
          for (std::size_t k = i + 1; k < j; ++k) {
            if (in.cell(cover[k].second)[d] > in.cell(cover[best].second)[d]) {
              best = k;
            }
          }
          grad_in.cell(cover[best].second)[d] += g[d];
        }
      }
      i = j;
      ++out_idx;
    }
    require(out_idx == grad_out.n_active(), "sparse pool backward: active-set mismatch");
    return grad_in;
  }
};

// Pools the grid into an out_h x out_w dense tensor [out_h, out_w, dim];
// region i spans rows floor(grid_h*i/out_h) .. floor(grid_h*(i+1)/out_h).
// Regions with no active cells emit zeros. This is the boundary where the
// sparse pipeline hands a fixed-size bag embedding to the classifier.
namespace detail {

inline int region_of(int coord, int grid, int out) {
  int i = static_cast<int>((static_cast<std::int64_t>(coord) * out) / grid);
  while ((static_cast<std::int64_t>(grid) * (i + 1)) / out <= coord) ++i;
  while ((static_cast<std::int64_t>(grid) * i) / out > coord) --i;
  return i;
}

}  // namespace detail

template <class T>
TensorT<T> adaptive_pool_to_dense(const SparseMapT<T>& in, int out_h, int out_w,
                                  SparsePoolKind kind) {
  require(in.coalesced, "adaptive pool: map must be coalesced");
  require(in.n_active() >= 1, "adaptive pool: map has no active cells");
  require(out_h >= 1 && out_w >= 1 && out_h <= in.grid_h && out_w <= in.grid_w,
          "adaptive pool: output extents must be in [1, grid extents]");
  TensorT<T> out({out_h, out_w, in.dim});
  TensorT<int> count({out_h, out_w});
  for (int idx = 0; idx < in.n_active(); ++idx) {
    const int i = detail::region_of(in.rows[idx], in.grid_h, out_h);
    const int j = detail::region_of(in.cols[idx], in.grid_w, out_w);
    const auto e = in.cell(idx);
    T* dst = &out.at(i, j, 0);
    if (count.at(i, j) == 0) {
      std::copy(e.begin(), e.end(), dst);
    } else {
      for (int d = 0; d < in.dim; ++d) {
        dst[d] = kind == SparsePoolKind::max ? std::max(dst[d], e[d]) : dst[d] + e[d];
      }
    }
    count.at(i, j) += 1;
  }
  if (kind == SparsePoolKind::avg) {
    for (int i = 0; i < out_h; ++i) {
      for (int j = 0; j < out_w; ++j) {
        if (count.at(i, j) > 1) {
          const T inv = static_cast<T>(1) / static_cast<T>(count.at(i, j));
          T* dst = &out.at(i, j, 0);
          for (int d = 0; d < in.dim; ++d) {
            dst[d] *= inv;
          }
        }
      }
    }
  }
  return out;
}

template <class T>
SparseMapT<T> adaptive_pool_backward(const SparseMapT<T>& in, int out_h, int out_w,
                                     SparsePoolKind kind, const TensorT<T>& grad_out) {
  require(grad_out.shape == std::vector<int>({out_h, out_w, in.dim}),
          "adaptive pool backward: bad grad shape");
  SparseMapT<T> grad_in(in.grid_h, in.grid_w, in.dim);
  grad_in.rows = in.rows;
  grad_in.cols = in.cols;
  grad_in.values.assign(in.values.size(), T{});
  grad_in.coalesced = true;

  TensorT<int> count({out_h, out_w});
  for (int idx = 0; idx < in.n_active(); ++idx) {
    const int i = detail::region_of(in.rows[idx], in.grid_h, out_h);
    const int j = detail::region_of(in.cols[idx], in.grid_w, out_w);
    count.at(i, j) += 1;
  }
  if (kind == SparsePoolKind::avg) {
    for (int idx = 0; idx < in.n_active(); ++idx) {
      const int i = detail::region_of(in.rows[idx], in.grid_h, out_h);
      const int j = detail::region_of(in.cols[idx], in.grid_w, out_w);
      const T inv = static_cast<T>(1) / static_cast<T>(count.at(i, j));
      const auto gi = grad_in.cell(idx);
      const T* g = &grad_out.at(i, j, 0);
      for (int d = 0; d < in.dim; ++d) {
        gi[d] += g[d] * inv;
      }
    }
  } else {
    // Recompute the per-region, per-dimension argmax; earliest active cell in
    // sorted order wins ties, matching forward's scan.
    std::unordered_map<std::int64_t, std::vector<int>> members;
    for (int idx = 0; idx < in.n_active(); ++idx) {
      const int i = detail::region_of(in.rows[idx], in.grid_h, out_h);
      const int j = detail::region_of(in.cols[idx], in.grid_w, out_w);
      members[detail::coord_key(i, j)].push_back(idx);
    }
    for (auto& [key, cells] : members) {
      const int i = static_cast<int>(key >> 32);
      const int j = static_cast<int>(static_cast<std::int32_t>(key));
      const T* g = &grad_out.at(i, j, 0);
      for (int d = 0; d < in.dim; ++d) {
        int best = cells.front();
        for (int idx : cells) {
          if (in.cell(idx)[d] > in.cell(best)[d]) {
            best = idx;
          }
        }
        grad_in.cell(best)[d] += g[d];
      }
    }
  }
  return grad_in;
}

// Elementwise rectification on active cells; activity is presence, so a cell
// whose values rectify to zero stays active.
template <class T>
SparseMapT<T> relu_map(const SparseMapT<T>& in) {
  SparseMapT<T> out = in;
  for (T& v : out.values) {
    v = v > T{} ? v : T{};
  }
  return out;
}

template <class T>
SparseMapT<T> relu_map_backward(const SparseMapT<T>& preact, const SparseMapT<T>& grad_out) {
  require(preact.values.size() == grad_out.values.size(), "relu map backward: shape mismatch");
  SparseMapT<T> gx = grad_out;
  for (std::size_t i = 0; i < gx.values.size(); ++i) {
    if (!(preact.values[i] > T{})) {
      gx.values[i] = T{};
    }
  }
  return gx;
}

}  // namespace smil
