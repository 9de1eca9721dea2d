#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "smil/sparse_map.hpp"
#include "smil/tensor.hpp"

namespace smil {

enum class Split { train, validation, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& name);

// One labelled bag: K patches with their full-resolution locations on a
// slide-scale grid. Patches are float32 [k, c, ph, pw].
struct BagRecord {
  std::string id;
  int label = 0;
  Split split = Split::train;
  Tensor patches;
  std::vector<GridLoc> locations;
  int full_h = 0;
  int full_w = 0;

  int n_instances() const { return patches.shape.empty() ? 0 : patches.shape[0]; }
};

struct BagDataset {
  std::vector<std::string> class_names;
  std::uint64_t seed = 0;  // generator seed, echoed for reproducibility
  std::string task;
  std::vector<BagRecord> bags;

  int n_classes() const { return static_cast<int>(class_names.size()); }
  std::vector<std::size_t> split_indices(Split s) const;
  std::vector<std::int64_t> class_counts(Split s) const;
};

// On-disk layout: `manifest.json` plus one binary file per bag. Bag files are
// little-endian: magic "SMIL", then u32 version=1, k, c, ph, pw, full_h,
// full_w, then k pairs of u32 (row, col), then k*c*ph*pw float32 patch
// values. Reads and writes round-trip bit-exactly.
void write_dataset(const std::filesystem::path& dir, const BagDataset& dataset);
BagDataset read_dataset(const std::filesystem::path& dir);

std::vector<std::uint8_t> serialize_bag(const BagRecord& bag);
BagRecord parse_bag(const std::vector<std::uint8_t>& bytes, const std::string& id, int label,
                    Split split);

// Synthetic benchmark. Instance types get fixed procedural textures plus
// Gaussian pixel noise. `presence` labels a bag 1 iff it holds at least one
// type-0 instance. `adjacency` gives every bag exactly two type-0 instances
// and labels it 1 iff they fall within Chebyshev distance d of each other in
// cells of size ref_downsampling; label-0 bags keep them farther than 2*d
// (enforced by rejection), so the type multiset carries no label signal.
struct SynthSpec {
  std::string task = "adjacency";  // "presence" | "adjacency"
  int n_bags = 100;
  int tiles_per_bag = 32;
  int n_types = 4;
  int patch_channels = 3;
  int patch_h = 16;
  int patch_w = 16;
  int full_extent = 4096;  // square slide-scale grid
  int adjacency_d = 2;     // Chebyshev threshold, in downsampled cells
  int ref_downsampling = 128;
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;
  std::array<double, 3> split_fractions{0.6, 0.2, 0.2};
};

struct SynthResult {
  BagDataset dataset;
  // Per bag, the instance type of each tile; in-memory metadata for tests,
  // never serialized.
  std::vector<std::vector<int>> instance_types;
};

SynthResult generate_synthetic(const SynthSpec& spec);

}  // namespace smil
