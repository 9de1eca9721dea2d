#include <algorithm>
#include <cmath>

#include "smil/data.hpp"
#include "smil/rng.hpp"

namespace smil {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

// Fixed per-(type, channel) sinusoidal grating; all texture parameters derive
// from the dataset seed, so a type looks the same in every bag.
struct Texture {
  double freq_r, freq_c, phase;
};

std::vector<Texture> type_textures(const SynthSpec& spec, int type) {
  Rng rng(mix_seed(spec.seed, 0x7e00u + static_cast<std::uint64_t>(type)));
  std::vector<Texture> out(static_cast<std::size_t>(spec.patch_channels));
  for (auto& tex : out) {
    tex.freq_r = static_cast<double>(rng.uniform_int(1, 3));
    tex.freq_c = static_cast<double>(rng.uniform_int(1, 3));
    tex.phase = rng.uniform(0.0, kTwoPi);
  }
  return out;
}

void render_patch(const std::vector<Texture>& textures, const SynthSpec& spec, Rng& rng,
                  float* dst) {
  for (int c = 0; c < spec.patch_channels; ++c) {
    const Texture& tex = textures[static_cast<std::size_t>(c)];
    for (int y = 0; y < spec.patch_h; ++y) {
      for (int x = 0; x < spec.patch_w; ++x) {
        const double base =
            0.5 + 0.4 * std::sin(kTwoPi * (tex.freq_r * y / spec.patch_h +
                                           tex.freq_c * x / spec.patch_w) +
                                 tex.phase);
        const double v = base + spec.noise_sigma * rng.normal();
        *dst++ = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
}

int cell_of(int coord, int ref_downsampling) { return coord / ref_downsampling; }

int chebyshev_cells(const GridLoc& a, const GridLoc& b, int ref) {
  return std::max(std::abs(cell_of(a.row, ref) - cell_of(b.row, ref)),
                  std::abs(cell_of(a.col, ref) - cell_of(b.col, ref)));
}

GridLoc uniform_loc(int full, Rng& rng) {
  return {static_cast<int>(rng.uniform_int(0, full - 1)),
          static_cast<int>(rng.uniform_int(0, full - 1))};
}

// A uniform position inside the given cell, clipped to the slide extent.
int uniform_in_cell(int cell, int ref, int full, Rng& rng) {
  const int lo = cell * ref;
  const int hi = std::min(full, lo + ref) - 1;
  return static_cast<int>(rng.uniform_int(lo, hi));
}

}  // namespace

SynthResult generate_synthetic(const SynthSpec& spec) {
  require(spec.task == "presence" || spec.task == "adjacency",
          "generate_synthetic: task must be 'presence' or 'adjacency'");
  require(spec.n_bags >= 1, "generate_synthetic: need at least one bag");
  require(spec.n_types >= 2, "generate_synthetic: need at least two instance types");
  require(spec.tiles_per_bag >= 1, "generate_synthetic: need at least one tile per bag");
  require(spec.patch_channels >= 1 && spec.patch_h >= 8 && spec.patch_w >= 8,
          "generate_synthetic: patch extents must be >= 8");
  require(spec.full_extent >= 1 && spec.ref_downsampling >= 1,
          "generate_synthetic: extents must be positive");
  require(spec.noise_sigma >= 0.0, "generate_synthetic: noise sigma must be >= 0");
  const double frac_sum =
      spec.split_fractions[0] + spec.split_fractions[1] + spec.split_fractions[2];
  require(std::abs(frac_sum - 1.0) < 1e-9, "generate_synthetic: split fractions must sum to 1");

  const int grid_cells = (spec.full_extent + spec.ref_downsampling - 1) / spec.ref_downsampling;
  if (spec.task == "adjacency") {
    require(spec.tiles_per_bag >= 2, "generate_synthetic: adjacency task needs >= 2 tiles");
    require(spec.adjacency_d >= 0, "generate_synthetic: adjacency threshold must be >= 0");
    require(2 * spec.adjacency_d < grid_cells - 1,
            "generate_synthetic: adjacency threshold d=" + std::to_string(spec.adjacency_d) +
                " infeasible for a " + std::to_string(grid_cells) + "-cell grid");
  }

  std::vector<std::vector<Texture>> textures;
  for (int t = 0; t < spec.n_types; ++t) {
    textures.push_back(type_textures(spec, t));
  }

  const int n_train = static_cast<int>(std::floor(spec.split_fractions[0] * spec.n_bags + 0.5));
  const int n_val = static_cast<int>(std::floor(spec.split_fractions[1] * spec.n_bags + 0.5));

  SynthResult result;
  result.dataset.class_names = {"negative", "positive"};
  result.dataset.seed = spec.seed;
  result.dataset.task = spec.task;

  std::array<int, 3> split_seen{0, 0, 0};
  for (int b = 0; b < spec.n_bags; ++b) {
    Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(b)));
    const Split split =
        b < n_train ? Split::train : (b < n_train + n_val ? Split::validation : Split::test);
    // Alternate labels within each split so every split is class-balanced.
    const int label = split_seen[static_cast<std::size_t>(split)]++ % 2;

    const int k = spec.tiles_per_bag;
    std::vector<int> types(static_cast<std::size_t>(k));
    std::vector<GridLoc> locations(static_cast<std::size_t>(k));

    if (spec.task == "presence") {
      // Positive bags carry a substantial type-0 fraction so that every
      // pooling family (including the mean) can pick the signal up; the
      // label rule itself stays "at least one type-0 instance".
      int n_zero = 0;
      if (label == 1) {
        const int lo = std::max(1, k / 8);
        const int hi = std::max(lo, k / 2);
        n_zero = static_cast<int>(rng.uniform_int(lo, hi));
      }
      for (int i = 0; i < k; ++i) {
        types[static_cast<std::size_t>(i)] =
            i < n_zero ? 0 : static_cast<int>(rng.uniform_int(1, spec.n_types - 1));
      }
      // Shuffle so the type-0 tiles do not sit at fixed indices.
      for (int i = k - 1; i > 0; --i) {
        std::swap(types[static_cast<std::size_t>(i)],
                  types[static_cast<std::size_t>(rng.uniform_int(0, i))]);
      }
      for (int i = 0; i < k; ++i) {
        locations[static_cast<std::size_t>(i)] = uniform_loc(spec.full_extent, rng);
      }
    } else {
      // Exactly two type-0 instances in every bag, for both labels.
      types[0] = 0;
      types[1] = 0;
      for (int i = 2; i < k; ++i) {
        types[static_cast<std::size_t>(i)] =
            static_cast<int>(rng.uniform_int(1, spec.n_types - 1));
      }
      GridLoc first = uniform_loc(spec.full_extent, rng);
      GridLoc second;
      if (label == 1) {
        // Place the partner within d cells: pick a nearby cell, then a
        // uniform position inside it.
        const int cr = cell_of(first.row, spec.ref_downsampling);
        const int cc = cell_of(first.col, spec.ref_downsampling);
        const int d = spec.adjacency_d;
        const int nr = std::clamp(cr + static_cast<int>(rng.uniform_int(-d, d)), 0, grid_cells - 1);
        const int nc = std::clamp(cc + static_cast<int>(rng.uniform_int(-d, d)), 0, grid_cells - 1);
        second.row = uniform_in_cell(nr, spec.ref_downsampling, spec.full_extent, rng);
        second.col = uniform_in_cell(nc, spec.ref_downsampling, spec.full_extent, rng);
      } else {
        // Margin-enforced negatives: strictly farther than 2d cells.
        do {
          second = uniform_loc(spec.full_extent, rng);
        } while (chebyshev_cells(first, second, spec.ref_downsampling) <= 2 * spec.adjacency_d);
      }
      locations[0] = first;
      locations[1] = second;
      for (int i = 2; i < k; ++i) {
        locations[static_cast<std::size_t>(i)] = uniform_loc(spec.full_extent, rng);
      }
    }

    BagRecord bag;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "bag_%06d", b);
    bag.id = idbuf;
    bag.label = label;
    bag.split = split;
    bag.full_h = spec.full_extent;
    bag.full_w = spec.full_extent;
    bag.locations = locations;
    bag.patches = Tensor({k, spec.patch_channels, spec.patch_h, spec.patch_w});
    for (int i = 0; i < k; ++i) {
      render_patch(textures[static_cast<std::size_t>(types[static_cast<std::size_t>(i)])], spec,
                   rng, &bag.patches.at(i, 0, 0, 0));
    }
    result.dataset.bags.push_back(std::move(bag));
    result.instance_types.push_back(std::move(types));
  }
  return result;
}

}  // namespace smil
