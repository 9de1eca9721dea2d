#include "smil/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

namespace smil {

namespace {

using nlohmann::json;

void reject_unknown_keys(const json& obj, const std::set<std::string>& known,
                         const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    if (!known.count(key)) {
      throw std::invalid_argument("unknown config key '" + (where.empty() ? key : where + "." + key) +
                                  "'");
    }
  }
}

CoalesceRule coalesce_from_name(const std::string& name) {
  if (name == "sum") return CoalesceRule::sum;
  if (name == "mean") return CoalesceRule::mean;
  throw std::invalid_argument("config key 'coalesce' must be 'sum' or 'mean', got '" + name + "'");
}

SparsePoolKind pool_from_name(const std::string& name) {
  if (name == "avg") return SparsePoolKind::avg;
  if (name == "max") return SparsePoolKind::max;
  throw std::invalid_argument("config key 'adaptive_pool' must be 'avg' or 'max', got '" + name +
                              "'");
}

}  // namespace

RunConfig default_run_config() { return RunConfig{}; }

RunConfig parse_run_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed config JSON: ") + e.what());
  }
  reject_unknown_keys(root,
                      {"method", "n_classes", "n_tiles", "downsampling", "sparse_conv_channels",
                       "sparse_conv_bias", "lse_M", "attention_L", "n_aug", "coalesce",
                       "adaptive_pool", "augment", "embedder", "optimizer", "epochs", "batch_size",
                       "seed"},
                      "");

  RunConfig cfg;
  if (root.contains("method")) cfg.model.method = method_from_name(root["method"].get<std::string>());
  if (root.contains("n_classes")) cfg.model.n_classes = root["n_classes"].get<int>();
  if (root.contains("n_tiles")) cfg.model.n_tiles = root["n_tiles"].get<int>();
  if (root.contains("downsampling")) cfg.model.downsampling = root["downsampling"].get<int>();
  if (root.contains("sparse_conv_channels")) {
    cfg.model.sparse_conv_channels = root["sparse_conv_channels"].get<std::vector<int>>();
  }
  if (root.contains("sparse_conv_bias")) cfg.model.sparse_conv_bias = root["sparse_conv_bias"].get<bool>();
  if (root.contains("lse_M")) cfg.model.lse_m = root["lse_M"].get<double>();
  if (root.contains("attention_L")) cfg.model.attention_hidden = root["attention_L"].get<int>();
  if (root.contains("n_aug")) cfg.model.n_aug = root["n_aug"].get<int>();
  if (root.contains("coalesce")) cfg.model.coalesce = coalesce_from_name(root["coalesce"].get<std::string>());
  if (root.contains("adaptive_pool")) {
    cfg.model.adaptive_pool = pool_from_name(root["adaptive_pool"].get<std::string>());
  }
  if (root.contains("augment")) {
    const json& aug = root["augment"];
    reject_unknown_keys(aug, {"flip", "rot90", "jitter_radius"}, "augment");
    if (aug.contains("flip")) cfg.model.augment.flip = aug["flip"].get<bool>();
    if (aug.contains("rot90")) cfg.model.augment.rot90 = aug["rot90"].get<bool>();
    if (aug.contains("jitter_radius")) cfg.model.augment.jitter_radius = aug["jitter_radius"].get<int>();
  }
  if (root.contains("embedder")) {
    const json& emb = root["embedder"];
    reject_unknown_keys(emb, {"conv_channels", "embedding_dim"}, "embedder");
    if (emb.contains("conv_channels")) {
      cfg.model.embedder.conv_channels = emb["conv_channels"].get<std::vector<int>>();
    }
    if (emb.contains("embedding_dim")) cfg.model.embedder.embedding_dim = emb["embedding_dim"].get<int>();
  }
  if (root.contains("optimizer")) {
    const json& opt = root["optimizer"];
    reject_unknown_keys(opt, {"lr", "beta1", "beta2", "eps", "weight_decay"}, "optimizer");
    if (opt.contains("lr")) cfg.optimizer.lr = opt["lr"].get<double>();
    if (opt.contains("beta1")) cfg.optimizer.beta1 = opt["beta1"].get<double>();
    if (opt.contains("beta2")) cfg.optimizer.beta2 = opt["beta2"].get<double>();
    if (opt.contains("eps")) cfg.optimizer.eps = opt["eps"].get<double>();
    if (opt.contains("weight_decay")) cfg.optimizer.weight_decay = opt["weight_decay"].get<double>();
  }
  if (root.contains("epochs")) cfg.epochs = root["epochs"].get<int>();
  if (root.contains("batch_size")) cfg.batch_size = root["batch_size"].get<int>();
  if (root.contains("seed")) cfg.seed = root["seed"].get<std::uint64_t>();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::invalid_argument("cannot open config file " + path.string());
  }
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

std::string run_config_to_json(const RunConfig& cfg) {
  json root;
  root["method"] = method_name(cfg.model.method);
  root["n_classes"] = cfg.model.n_classes;
  root["n_tiles"] = cfg.model.n_tiles;
  root["downsampling"] = cfg.model.downsampling;
  root["sparse_conv_channels"] = cfg.model.sparse_conv_channels;
  root["sparse_conv_bias"] = cfg.model.sparse_conv_bias;
  root["lse_M"] = cfg.model.lse_m;
  root["attention_L"] = cfg.model.attention_hidden;
  root["n_aug"] = cfg.model.n_aug;
  root["coalesce"] = cfg.model.coalesce == CoalesceRule::sum ? "sum" : "mean";
  root["adaptive_pool"] = cfg.model.adaptive_pool == SparsePoolKind::avg ? "avg" : "max";
  root["augment"] = {{"flip", cfg.model.augment.flip},
                     {"rot90", cfg.model.augment.rot90},
                     {"jitter_radius", cfg.model.augment.jitter_radius}};
  root["embedder"] = {{"conv_channels", cfg.model.embedder.conv_channels},
                      {"embedding_dim", cfg.model.embedder.embedding_dim}};
  root["optimizer"] = {{"lr", cfg.optimizer.lr},
                       {"beta1", cfg.optimizer.beta1},
                       {"beta2", cfg.optimizer.beta2},
                       {"eps", cfg.optimizer.eps},
                       {"weight_decay", cfg.optimizer.weight_decay}};
  root["epochs"] = cfg.epochs;
  root["batch_size"] = cfg.batch_size;
  root["seed"] = cfg.seed;
  return root.dump(2);
}

}  // namespace smil
