#include "smil/train.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>

#include "smil/rng.hpp"

namespace smil {

std::vector<double> oversampling_weights(const std::vector<std::int64_t>& class_counts) {
  require(!class_counts.empty(), "oversampling_weights: no classes");
  double total = 0.0;
  for (std::int64_t count : class_counts) {
    require(count >= 1, "oversampling_weights: zero class count");
    total += 1.0 / static_cast<double>(count);
  }
  std::vector<double> weights(class_counts.size());
  for (std::size_t c = 0; c < class_counts.size(); ++c) {
    weights[c] = (1.0 / static_cast<double>(class_counts[c])) / total;
  }
  return weights;
}

namespace {

// Draws a class with probability proportional to count * weight (uniform over
// classes when the weights are inverse counts), then a bag uniformly within
// the class. Equivalent to weighting each bag by its inverse class count.
class BagSampler {
 public:
  BagSampler(const BagDataset& dataset, Split split) {
    const auto indices = dataset.split_indices(split);
    require(!indices.empty(), "train: empty split");
    by_class_.resize(dataset.class_names.size());
    for (std::size_t idx : indices) {
      by_class_[static_cast<std::size_t>(dataset.bags[idx].label)].push_back(idx);
    }
    std::vector<std::int64_t> counts;
    std::vector<std::size_t> live;
    for (std::size_t c = 0; c < by_class_.size(); ++c) {
      if (!by_class_[c].empty()) {
        counts.push_back(static_cast<std::int64_t>(by_class_[c].size()));
        live.push_back(c);
      }
    }
    const auto weights = oversampling_weights(counts);
    double total = 0.0;
    for (std::size_t i = 0; i < live.size(); ++i) {
      total += weights[i] * static_cast<double>(counts[i]);
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < live.size(); ++i) {
      acc += weights[i] * static_cast<double>(counts[i]) / total;
      cdf_.emplace_back(acc, live[i]);
    }
  }

  std::size_t draw(Rng& rng) const {
    const double u = rng.uniform();
    std::size_t cls = cdf_.back().second;
    for (const auto& [edge, c] : cdf_) {
      if (u < edge) {
        cls = c;
        break;
      }
    }
    const auto& bags = by_class_[cls];
    return bags[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(bags.size()) - 1))];
  }

 private:
  std::vector<std::vector<std::size_t>> by_class_;
  std::vector<std::pair<double, std::size_t>> cdf_;
};

// Training view of a bag: up to n_tiles instances sampled without
// replacement (all of them when the bag is small enough).
BagView sample_bag_view(const BagRecord& bag, int n_tiles, Rng& rng, Tensor& patch_storage) {
  const int k = bag.n_instances();
  const int take = std::min(n_tiles, k);
  std::vector<int> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < take; ++i) {
    const int j = static_cast<int>(rng.uniform_int(i, k - 1));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }

  const int c = bag.patches.shape[1], ph = bag.patches.shape[2], pw = bag.patches.shape[3];
  patch_storage = Tensor({take, c, ph, pw});
  BagView view;
  view.full_h = bag.full_h;
  view.full_w = bag.full_w;
  const std::size_t patch_len = static_cast<std::size_t>(c) * ph * pw;
  for (int i = 0; i < take; ++i) {
    const int src = order[static_cast<std::size_t>(i)];
    std::copy_n(bag.patches.data.data() + static_cast<std::size_t>(src) * patch_len, patch_len,
                patch_storage.data.data() + static_cast<std::size_t>(i) * patch_len);
    view.locations.push_back(bag.locations[static_cast<std::size_t>(src)]);
  }
  view.patches = &patch_storage;
  return view;
}

BagView full_bag_view(const BagRecord& bag) {
  BagView view;
  view.patches = &bag.patches;
  view.locations = bag.locations;
  view.full_h = bag.full_h;
  view.full_w = bag.full_w;
  return view;
}

}  // namespace

EvalResult evaluate(MilModel& model, const BagDataset& dataset, Split split) {
  const auto indices = dataset.split_indices(split);
  require(!indices.empty(), std::string("evaluate: split '") + split_name(split) + "' is empty");
  EvalResult out;
  out.probs = Tensor({static_cast<int>(indices.size()), model.config.n_classes});
  ModelCache cache;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const BagRecord& bag = dataset.bags[indices[i]];
    const BagView view = full_bag_view(bag);
    const Tensor probs = model.forward(view, ForwardMode::eval, nullptr, cache);
    for (int c = 0; c < model.config.n_classes; ++c) {
      out.probs.at(static_cast<int>(i), c) = probs.at(0, c);
    }
    out.labels.push_back(bag.label);
  }
  out.metrics = compute_metrics(out.probs, out.labels);
  return out;
}

void restore_params(MilModel& model, const std::vector<Tensor>& params) {
  auto refs = model.parameters();
  require(refs.size() == params.size(), "restore_params: parameter count mismatch");
  for (std::size_t i = 0; i < refs.size(); ++i) {
    require(refs[i].value->shape == params[i].shape, "restore_params: shape mismatch");
    refs[i].value->data = params[i].data;
  }
}

TrainResult train(MilModel& model, const BagDataset& dataset, const AdamConfig& adam_config,
                  const TrainOptions& options) {
  require(options.epochs >= 1, "train: epochs must be >= 1");
  require(options.batch_size >= 1, "train: batch size must be >= 1");

  const auto train_indices = dataset.split_indices(Split::train);
  require(!train_indices.empty(), "train: empty training split");
  require(!dataset.split_indices(Split::validation).empty(), "train: empty validation split");

  Rng init_rng(mix_seed(options.seed, 1));
  Rng sample_rng(mix_seed(options.seed, 2));
  Rng tile_rng(mix_seed(options.seed, 3));
  Rng aug_rng(mix_seed(options.seed, 4));
  model.init(init_rng);

  BagSampler sampler(dataset, Split::train);
  AdamState adam(adam_config);
  auto params = model.parameters();

  const int steps_per_epoch =
      static_cast<int>((train_indices.size() + options.batch_size - 1) / options.batch_size);

  TrainResult result;
  ModelCache cache;
  Tensor patch_storage;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<float> probs_seen;
    std::vector<int> labels_seen;
    for (int s = 0; s < steps_per_epoch; ++s) {
      model.zero_grad();
      for (int b = 0; b < options.batch_size; ++b) {
        const BagRecord& bag = dataset.bags[sampler.draw(sample_rng)];
        const BagView view = sample_bag_view(bag, model.config.n_tiles, tile_rng, patch_storage);
        const Tensor probs = model.forward(view, ForwardMode::train, &aug_rng, cache);
        const int rows = probs.shape[0];
        Tensor grad(probs.shape);
        const float scale = 1.0f / static_cast<float>(options.batch_size * rows);
        for (int r = 0; r < rows; ++r) {
          Tensor row({1, probs.shape[1]});
          for (int c = 0; c < probs.shape[1]; ++c) {
            row.at(0, c) = probs.at(r, c);
          }
          const auto loss = cross_entropy_loss(row, bag.label);
          for (int c = 0; c < probs.shape[1]; ++c) {
            grad.at(r, c) = loss.grad.at(0, c) * scale;
          }
        }
        model.backward(cache, grad);
        for (int c = 0; c < probs.shape[1]; ++c) {
          probs_seen.push_back(probs.at(0, c));
        }
        labels_seen.push_back(bag.label);
      }
      adam.step(params);
      ++step;
    }

    // Metrics over the bags touched this epoch (first augmented sample each).
    Tensor train_probs = Tensor::from(
        {static_cast<int>(labels_seen.size()), model.config.n_classes}, probs_seen);
    const MetricsReport train_metrics = compute_metrics(train_probs, labels_seen);
    const EvalResult val = evaluate(model, dataset, Split::validation);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back({epoch, "train", train_metrics, seconds});
    result.log.push_back({epoch, "validation", val.metrics, seconds});

    if (result.best_epoch < 0 || val.metrics.cross_entropy < result.best_validation_ce) {
      result.best_epoch = epoch;
      result.best_validation_ce = val.metrics.cross_entropy;
      result.best_step = step;
      result.best_params.clear();
      for (const auto& p : params) {
        result.best_params.push_back(*p.value);
      }
    }
    if (options.verbose) {
      std::cerr << "epoch " << epoch << " train ce " << train_metrics.cross_entropy << " val ce "
                << val.metrics.cross_entropy << " val auc " << val.metrics.macro_auc << " ("
                << seconds << "s)\n";
    }
  }
  return result;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochRow>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot write metrics csv " + path.string());
  }
  out << "epoch,split,balanced_accuracy,macro_precision,macro_recall,macro_f1,macro_auc,"
         "cross_entropy,seconds\n";
  char line[256];
  for (const auto& row : log) {
    std::snprintf(line, sizeof(line), "%d,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.3f\n", row.epoch,
                  row.split.c_str(), row.metrics.balanced_accuracy, row.metrics.macro_precision,
                  row.metrics.macro_recall, row.metrics.macro_f1, row.metrics.macro_auc,
                  row.metrics.cross_entropy, row.seconds);
    out << line;
  }
}

}  // namespace smil
