#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "smil/checkpoint.hpp"
#include "smil/config.hpp"
#include "smil/data.hpp"
#include "smil/gradcheck.hpp"
#include "smil/metrics.hpp"
#include "smil/model.hpp"
#include "smil/train.hpp"

namespace {

namespace fs = std::filesystem;
using namespace smil;

// ModelConfig is shape-agnostic until it meets a dataset; fill in what the
// data dictates and sanity-check the rest.
void bind_config_to_dataset(RunConfig& config, const BagDataset& dataset) {
  if (config.model.n_classes <= 0) {
    config.model.n_classes = dataset.n_classes();
  } else if (config.model.n_classes != dataset.n_classes()) {
    throw std::invalid_argument("config n_classes " + std::to_string(config.model.n_classes) +
                                " does not match dataset (" +
                                std::to_string(dataset.n_classes()) + ")");
  }
  require(!dataset.bags.empty(), "dataset holds no bags");
  const auto& patches = dataset.bags.front().patches;
  config.model.embedder.patch_channels = patches.shape[1];
  config.model.embedder.patch_h = patches.shape[2];
  config.model.embedder.patch_w = patches.shape[3];
}

RunConfig load_config_arg(const std::string& config_path) {
  RunConfig config = default_run_config();
  if (!config_path.empty()) {
    config = load_run_config(config_path);
  }
  return config;
}

void write_report_json(const fs::path& path, const std::string& split, std::size_t n_bags,
                       const MetricsReport& m) {
  nlohmann::json report;
  report["split"] = split;
  report["n_bags"] = n_bags;
  report["balanced_accuracy"] = m.balanced_accuracy;
  report["macro_precision"] = m.macro_precision;
  report["macro_recall"] = m.macro_recall;
  report["macro_f1"] = m.macro_f1;
  report["macro_auc"] = m.macro_auc;
  report["cross_entropy"] = m.cross_entropy;
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot write report " + path.string());
  }
  out << report.dump(2) << "\n";
}

int cmd_gen(const std::string& task, int bags, int tiles, int grid, std::uint64_t seed,
            const std::string& out_dir, int types, const std::vector<int>& patch,
            double noise, int adjacency_d, int ref_downsampling,
            const std::vector<double>& split) {
  SynthSpec spec;
  spec.task = task;
  spec.n_bags = bags;
  spec.tiles_per_bag = tiles;
  spec.full_extent = grid;
  spec.seed = seed;
  spec.n_types = types;
  if (!patch.empty()) {
    require(patch.size() == 3, "--patch expects c,h,w");
    spec.patch_channels = patch[0];
    spec.patch_h = patch[1];
    spec.patch_w = patch[2];
  }
  spec.noise_sigma = noise;
  spec.adjacency_d = adjacency_d;
  spec.ref_downsampling = ref_downsampling;
  if (!split.empty()) {
    require(split.size() == 3, "--split expects train,validation,test fractions");
    spec.split_fractions = {split[0], split[1], split[2]};
  }
  const SynthResult result = generate_synthetic(spec);
  write_dataset(out_dir, result.dataset);
  std::cout << "wrote " << result.dataset.bags.size() << " bags to " << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& config_path,
              const std::string& out_dir, bool verbose) {
  const BagDataset dataset = read_dataset(data_dir);
  RunConfig config = load_config_arg(config_path);
  bind_config_to_dataset(config, dataset);

  MilModel model(config.model);
  TrainOptions options;
  options.epochs = config.epochs;
  options.batch_size = config.batch_size;
  options.seed = config.seed;
  options.verbose = verbose;
  const TrainResult result = train(model, dataset, config.optimizer, options);
  restore_params(model, result.best_params);

  fs::create_directories(out_dir);
  save_checkpoint(fs::path(out_dir) / "checkpoint.smck", model, config,
                  static_cast<std::uint64_t>(result.best_step));
  write_metrics_csv(fs::path(out_dir) / "metrics.csv", result.log);
  std::cout << "best validation cross-entropy " << result.best_validation_ce << " at epoch "
            << result.best_epoch << "\n";
  return 0;
}

int cmd_eval(const std::string& data_dir, const std::string& model_path, const std::string& split,
             const std::string& out_path) {
  const BagDataset dataset = read_dataset(data_dir);
  LoadedModel loaded = load_checkpoint(model_path);
  require(loaded.config.model.n_classes == dataset.n_classes(),
          "checkpoint classes do not match dataset");
  const EvalResult result = evaluate(loaded.model, dataset, split_from_name(split));
  write_report_json(out_path, split, result.labels.size(), result.metrics);
  std::printf("%s: balanced_accuracy %.4f macro_auc %.4f cross_entropy %.4f (%zu bags)\n",
              split.c_str(), result.metrics.balanced_accuracy, result.metrics.macro_auc,
              result.metrics.cross_entropy, result.labels.size());
  return 0;
}

int cmd_bench(const std::string& data_dir, const std::string& methods_csv,
              const std::string& config_path, const std::string& out_path, bool verbose) {
  const BagDataset dataset = read_dataset(data_dir);

  std::vector<std::string> methods;
  std::string token;
  for (char c : methods_csv + ",") {
    if (c == ',') {
      if (!token.empty()) {
        methods.push_back(token);
        token.clear();
      }
    } else {
      token += c;
    }
  }
  require(!methods.empty(), "--methods needs at least one method");

  std::ofstream out(out_path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot write bench csv " + out_path);
  }
  out << "method,params,balanced_accuracy,macro_precision,macro_recall,macro_f1,macro_auc,"
         "cross_entropy\n";
  for (const std::string& name : methods) {
    RunConfig config = load_config_arg(config_path);
    config.model.method = method_from_name(name);
    bind_config_to_dataset(config, dataset);

    MilModel model(config.model);
    TrainOptions options;
    options.epochs = config.epochs;
    options.batch_size = config.batch_size;
    options.seed = config.seed;  // same seeds for every method
    options.verbose = verbose;
    const TrainResult trained = train(model, dataset, config.optimizer, options);
    restore_params(model, trained.best_params);
    const EvalResult result = evaluate(model, dataset, Split::test);

    char line[256];
    std::snprintf(line, sizeof(line), "%s,%lld,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", name.c_str(),
                  static_cast<long long>(model.pooling_parameter_count()),
                  result.metrics.balanced_accuracy, result.metrics.macro_precision,
                  result.metrics.macro_recall, result.metrics.macro_f1, result.metrics.macro_auc,
                  result.metrics.cross_entropy);
    out << line;
    std::cout << line;
  }
  return 0;
}

int cmd_gradcheck() {
  const auto results = run_gradcheck_suite();
  for (const auto& r : results) {
    std::printf("%-28s max rel err %.3e (tol %.0e)  %s\n", r.name.c_str(), r.max_rel_err,
                r.tolerance, r.pass ? "ok" : "FAIL");
  }
  return gradcheck_all_pass(results) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"smil: spatial multiple-instance learning over sparse embedding maps"};
  app.require_subcommand(1);

  // gen
  std::string gen_task = "adjacency", gen_out;
  int gen_bags = 100, gen_tiles = 32, gen_grid = 4096, gen_types = 4;
  int gen_d = 2, gen_ref = 128;
  double gen_noise = 0.05;
  std::uint64_t gen_seed = 0;
  std::vector<int> gen_patch;
  std::vector<double> gen_split;
  auto* gen = app.add_subcommand("gen", "generate a synthetic bag dataset");
  gen->add_option("--task", gen_task, "presence | adjacency")->capture_default_str();
  gen->add_option("--bags", gen_bags, "number of bags")->capture_default_str();
  gen->add_option("--tiles-per-bag", gen_tiles, "instances per bag")->capture_default_str();
  gen->add_option("--grid", gen_grid, "slide-scale grid extent")->capture_default_str();
  gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--types", gen_types, "number of instance types")->capture_default_str();
  gen->add_option("--patch", gen_patch, "patch shape c,h,w")->delimiter(',');
  gen->add_option("--noise", gen_noise, "pixel noise sigma")->capture_default_str();
  gen->add_option("--adjacency-d", gen_d, "adjacency threshold in cells")->capture_default_str();
  gen->add_option("--ref-downsampling", gen_ref, "cell size defining adjacency")
      ->capture_default_str();
  gen->add_option("--split", gen_split, "train,validation,test fractions")->delimiter(',');

  // train
  std::string train_data, train_config, train_out;
  bool train_verbose = false;
  auto* tr = app.add_subcommand("train", "train a model and write checkpoint + metrics CSV");
  tr->add_option("--data", train_data, "dataset directory")->required();
  tr->add_option("--config", train_config, "JSON config file");
  tr->add_option("--out", train_out, "output directory")->required();
  tr->add_flag("--verbose", train_verbose, "log per-epoch progress to stderr");

  // eval
  std::string eval_data, eval_model, eval_split = "test", eval_out;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  ev->add_option("--data", eval_data, "dataset directory")->required();
  ev->add_option("--model", eval_model, "checkpoint file")->required();
  ev->add_option("--split", eval_split, "train | validation | test")->capture_default_str();
  ev->add_option("--out", eval_out, "output JSON report")->required();

  // bench
  std::string bench_data, bench_methods, bench_config, bench_out;
  bool bench_verbose = false;
  auto* be = app.add_subcommand("bench", "train and compare methods with shared seeds");
  be->add_option("--data", bench_data, "dataset directory")->required();
  be->add_option("--methods", bench_methods, "comma-separated method list")->required();
  be->add_option("--config", bench_config, "JSON config file");
  be->add_option("--out", bench_out, "output CSV")->required();
  be->add_flag("--verbose", bench_verbose, "log per-epoch progress to stderr");

  auto* gc = app.add_subcommand("gradcheck", "run every finite-difference suite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      return cmd_gen(gen_task, gen_bags, gen_tiles, gen_grid, gen_seed, gen_out, gen_types,
                     gen_patch, gen_noise, gen_d, gen_ref, gen_split);
    }
    if (tr->parsed()) {
      return cmd_train(train_data, train_config, train_out, train_verbose);
    }
    if (ev->parsed()) {
      return cmd_eval(eval_data, eval_model, eval_split, eval_out);
    }
    if (be->parsed()) {
      return cmd_bench(bench_data, bench_methods, bench_config, bench_out, bench_verbose);
    }
    if (gc->parsed()) {
      return cmd_gradcheck();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
