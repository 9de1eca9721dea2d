#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "smil/data.hpp"
#include "smil/metrics.hpp"
#include "smil/model.hpp"
#include "smil/training.hpp"

namespace smil {

struct TrainOptions {
  int epochs = 20;
  int batch_size = 10;
  std::uint64_t seed = 42;
  bool verbose = false;
};

struct EpochRow {
  int epoch = 0;
  std::string split;
  MetricsReport metrics;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochRow> log;
  int best_epoch = -1;
  double best_validation_ce = 0.0;
  std::int64_t best_step = 0;
  // Parameter snapshot (in parameters() order) at the best-validation epoch.
  std::vector<Tensor> best_params;
};

struct EvalResult {
  Tensor probs;  // [n, c]
  std::vector<int> labels;
  MetricsReport metrics;
};

// Forward every bag of a split with all of its instances, no augmentation.
EvalResult evaluate(MilModel& model, const BagDataset& dataset, Split split);

// Oversampled mini-batch training with Adam; evaluates on the validation
// split each epoch and snapshots the parameters with the least validation
// cross-entropy. Everything is driven by the seed: two runs with the same
// inputs produce bit-identical parameters and metric logs.
TrainResult train(MilModel& model, const BagDataset& dataset, const AdamConfig& adam_config,
                  const TrainOptions& options);

void restore_params(MilModel& model, const std::vector<Tensor>& params);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochRow>& log);

}  // namespace smil
