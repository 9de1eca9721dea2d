#pragma once

#include <filesystem>
#include <string>

#include "smil/model.hpp"
#include "smil/train.hpp"
#include "smil/training.hpp"

namespace smil {

// Everything a training run needs, loadable from a JSON file. Unknown keys
// are rejected by name so typos fail loudly.
struct RunConfig {
  ModelConfig model;
  AdamConfig optimizer;
  int epochs = 20;
  int batch_size = 10;
  std::uint64_t seed = 42;
};

RunConfig default_run_config();
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_to_json(const RunConfig& config);

}  // namespace smil
