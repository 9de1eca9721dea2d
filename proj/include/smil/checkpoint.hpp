#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "smil/config.hpp"
#include "smil/model.hpp"

namespace smil {

// Checkpoint container, little-endian throughout: magic "SMCK", u32
// version=1, u64 training step, u32 config length + config JSON (the full run
// config plus the model's runtime shape), u32 parameter count, then per
// parameter: u32 name length + name, u32 ndim + u32 extents, float32 data.
struct Checkpoint {
  std::uint32_t version = 1;
  std::uint64_t step = 0;
  std::string config_json;
  std::vector<std::pair<std::string, Tensor>> params;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, MilModel& model, const RunConfig& config,
                     std::uint64_t step);

struct LoadedModel {
  MilModel model;
  RunConfig config;
  std::uint64_t step = 0;
};

LoadedModel load_checkpoint(const std::filesystem::path& path);

}  // namespace smil
