#pragma once

#include <optional>
#include <string>
#include <vector>

#include "smil/layers.hpp"
#include "smil/mil_pooling.hpp"
#include "smil/rng.hpp"
#include "smil/sparse_cnn.hpp"
#include "smil/sparse_map.hpp"
#include "smil/tensor.hpp"

namespace smil {

// Small trainable patch embedder: a stack of 3x3 same-padding convolutions,
// each rectified and 2x2 max-pooled, then global average pooling and a linear
// projection to the embedding dim. Patch extents must survive the poolings
// (divisible by 2 per stage).
struct EmbedderConfig {
  int patch_channels = 3;
  int patch_h = 16;
  int patch_w = 16;
  std::vector<int> conv_channels{8, 16};
  int embedding_dim = 64;
};

template <class T>
struct EmbedderCache {
  TensorT<T> input;
  std::vector<TensorT<T>> preact;  // conv output per stage
  std::vector<TensorT<T>> act;     // rectified per stage
  std::vector<TensorT<T>> pooled;  // max-pooled per stage
  TensorT<T> gap;                  // [k, c_last]
};

template <class T>
struct PatchEmbedderT {
  EmbedderConfig config;
  std::vector<DenseConv2dLayerT<T>> convs;
  LinearLayerT<T> proj;

  PatchEmbedderT() = default;

  explicit PatchEmbedderT(const EmbedderConfig& cfg) : config(cfg) {
    require(cfg.embedding_dim >= 1, "embedder: embedding dim must be >= 1");
    require(cfg.patch_h >= 8 && cfg.patch_w >= 8, "embedder: patch extents must be >= 8");
    require(!cfg.conv_channels.empty(), "embedder: need at least one conv stage");
    int c = cfg.patch_channels, h = cfg.patch_h, w = cfg.patch_w;
    for (int width : cfg.conv_channels) {
      convs.emplace_back(c, width, 3, 1, 1);
      require(h % 2 == 0 && w % 2 == 0,
              "embedder: patch extents must be divisible by 2 at every pooling stage (got " +
                  std::to_string(cfg.patch_h) + "x" + std::to_string(cfg.patch_w) + " with " +
                  std::to_string(cfg.conv_channels.size()) + " stages)");
      h /= 2;
      w /= 2;
      c = width;
    }
    proj = LinearLayerT<T>(c, cfg.embedding_dim);
  }

  void init(Rng& rng) {
    for (auto& conv : convs) {
      conv.init(rng);
    }
    proj.init(rng);
  }

  void zero_grad() {
    for (auto& conv : convs) {
      conv.zero_grad();
    }
    proj.zero_grad();
  }

  // patches [k, c, h, w] -> embeddings [k, d]; rows depend only on their own
  // patch, so batching is just a loop flattened into the tensors.
  TensorT<T> forward(const TensorT<T>& patches, EmbedderCache<T>* cache = nullptr) const {
    require(patches.ndim() == 4, "embedder: patches must be [k, c, h, w]");
    require(patches.shape[1] == config.patch_channels && patches.shape[2] == config.patch_h &&
                patches.shape[3] == config.patch_w,
            "embedder: patch shape " + shape_str(patches.shape) + " does not match config");
    TensorT<T> x = patches;
    if (cache) {
      cache->input = patches;
      cache->preact.clear();
      cache->act.clear();
      cache->pooled.clear();
    }
    for (const auto& conv : convs) {
      TensorT<T> pre = conv.forward(x);
      TensorT<T> act = activation_forward(Activation::relu, pre);
      TensorT<T> pooled = maxpool2d_forward(act, 2);
      if (cache) {
        cache->preact.push_back(pre);
        cache->act.push_back(act);
        cache->pooled.push_back(pooled);
      }
      x = std::move(pooled);
    }
    TensorT<T> gap = global_avg_pool_forward(x);
    if (cache) {
      cache->gap = gap;
    }
    return proj.forward(gap);
  }

  void backward(const EmbedderCache<T>& cache, const TensorT<T>& grad_emb) {
    TensorT<T> g = proj.backward(cache.gap, grad_emb);
    const TensorT<T>& last = cache.pooled.back();
    TensorT<T> gmap = global_avg_pool_backward(last, g);
    for (int s = static_cast<int>(convs.size()) - 1; s >= 0; --s) {
      TensorT<T> gact = maxpool2d_backward(cache.act[static_cast<std::size_t>(s)], 2, gmap);
      TensorT<T> gpre =
          activation_backward(Activation::relu, cache.preact[static_cast<std::size_t>(s)], gact);
      const TensorT<T>& stage_in =
          s == 0 ? cache.input : cache.pooled[static_cast<std::size_t>(s - 1)];
      gmap = convs[static_cast<std::size_t>(s)].backward(stage_in, gpre);
    }
  }

  std::vector<ParamRefT<T>> parameters(const std::string& prefix) {
    std::vector<ParamRefT<T>> out;
    for (std::size_t i = 0; i < convs.size(); ++i) {
      for (auto& p : convs[i].parameters(prefix + ".conv" + std::to_string(i))) {
        out.push_back(p);
      }
    }
    for (auto& p : proj.parameters(prefix + ".proj")) {
      out.push_back(p);
    }
    return out;
  }
};

enum class Method {
  sparseconvmil,
  emb_mean,
  emb_max,
  attention,
  gated_attention,
  inst_mean,
  inst_max,
  inst_lse,
};

inline const char* method_name(Method m) {
  switch (m) {
    case Method::sparseconvmil: return "sparseconvmil";
    case Method::emb_mean: return "emb_mean";
    case Method::emb_max: return "emb_max";
    case Method::attention: return "attention";
    case Method::gated_attention: return "gated_attention";
    case Method::inst_mean: return "inst_mean";
    case Method::inst_max: return "inst_max";
    case Method::inst_lse: return "inst_lse";
  }
  return "?";
}

inline Method method_from_name(const std::string& name) {
  for (Method m : {Method::sparseconvmil, Method::emb_mean, Method::emb_max, Method::attention,
                   Method::gated_attention, Method::inst_mean, Method::inst_max,
                   Method::inst_lse}) {
    if (name == method_name(m)) {
      return m;
    }
  }
  throw std::invalid_argument("unknown method '" + name + "'");
}

inline bool is_instance_level(Method m) {
  return m == Method::inst_mean || m == Method::inst_max || m == Method::inst_lse;
}

// Which spatial augmentations training may draw; the drawn AugmentSpec picks
// flips with probability 1/2 and a uniform quarter-turn count when enabled.
struct AugmentTemplate {
  bool flip = true;
  bool rot90 = true;
  int jitter_radius = 0;
};

inline AugmentSpec draw_augment(const AugmentTemplate& tmpl, Rng& rng) {
  AugmentSpec spec;
  if (tmpl.flip) {
    spec.flip_h = rng.uniform() < 0.5;
    spec.flip_v = rng.uniform() < 0.5;
  }
  if (tmpl.rot90) {
    spec.rot90_quarter_turns = static_cast<int>(rng.uniform_int(0, 3));
  }
  spec.jitter_radius = tmpl.jitter_radius;
  if (tmpl.jitter_radius > 0) {
    spec.prng_seed = rng.next_u64();
  }
  return spec;
}

struct ModelConfig {
  Method method = Method::sparseconvmil;
  int n_classes = 2;
  int n_tiles = 200;
  int downsampling = 128;
  std::vector<int> sparse_conv_channels{32, 32};
  bool sparse_conv_bias = true;
  double lse_m = 1.0;
  int attention_hidden = 128;
  int n_aug = 1;
  AugmentTemplate augment;
  CoalesceRule coalesce = CoalesceRule::sum;
  SparsePoolKind adaptive_pool = SparsePoolKind::avg;
  EmbedderConfig embedder;
};

// One bag as the model consumes it: pre-sampled patches plus their
// full-resolution locations. Location-unaware methods ignore everything but
// the patches.
template <class T>
struct BagViewT {
  const TensorT<T>* patches = nullptr;  // [k, c, h, w]
  std::vector<GridLoc> locations;
  int full_h = 0;
  int full_w = 0;
};

using BagView = BagViewT<float>;

template <class T>
struct SparseBranchCache {
  AugmentTrace<T> aug;
  std::vector<SparseMapT<T>> layer_in;  // input map per conv layer
  std::vector<SparseMapT<T>> preact;    // conv output per layer, pre-rectification
  SparseMapT<T> pooled_input;           // rectified output of the last layer
  TensorT<T> bag_embedding;             // [1, c_last]
};

template <class T>
struct ModelCacheT {
  EmbedderCache<T> embedder;
  TensorT<T> embeddings;  // [k, d]
  BuildTrace<T> build;
  std::vector<SparseBranchCache<T>> branches;  // one per augmented sample
  TensorT<T> pooled;        // [1, d] embedding-level pooled bag embedding
  TensorT<T> att_weights;   // [k] attention only
  TensorT<T> inst_logits;   // [k, c] instance-level
  TensorT<T> inst_scores;   // [k, c] per-tile probabilities
  TensorT<T> probs;         // [n_samples, c]
};

using ModelCache = ModelCacheT<float>;

enum class ForwardMode { train, eval };

// Full pipeline: shared patch embedder, one pooling stage selected by
// config.method, and a linear classifier with softmax. forward() returns one
// probability row per sample (n_aug rows for sparseconvmil in train mode,
// one row otherwise); backward() takes matching gradient rows.
template <class T>
struct MilModelT {
  ModelConfig config;
  PatchEmbedderT<T> embedder;
  std::vector<SparseConvLayerT<T>> sparse_layers;
  AttentionParamsT<T> attention;
  LinearLayerT<T> classifier;

  MilModelT() = default;

  explicit MilModelT(const ModelConfig& cfg) : config(cfg), embedder(cfg.embedder) {
    require(cfg.n_classes >= 2, "model: need at least 2 classes");
    const int d = cfg.embedder.embedding_dim;
    int classifier_in = d;
    if (cfg.method == Method::sparseconvmil) {
      require(!cfg.sparse_conv_channels.empty(), "model: sparse conv stack is empty");
      require(cfg.downsampling >= 1, "model: downsampling must be >= 1");
      int c = d;
      for (int width : cfg.sparse_conv_channels) {
        sparse_layers.emplace_back(c, width, 1, 1, cfg.sparse_conv_bias);
        c = width;
      }
      classifier_in = c;
    } else if (cfg.method == Method::attention || cfg.method == Method::gated_attention) {
      attention = AttentionParamsT<T>(cfg.attention_hidden, d,
                                      cfg.method == Method::gated_attention);
    } else if (is_instance_level(cfg.method)) {
      require(cfg.lse_m > 0, "model: lse M must be positive");
    }
    classifier = LinearLayerT<T>(classifier_in, cfg.n_classes);
  }

  void init(Rng& rng) {
    embedder.init(rng);
    for (auto& layer : sparse_layers) {
      layer.init(rng);
    }
    if (config.method == Method::attention || config.method == Method::gated_attention) {
      attention.init(rng);
    }
    classifier.init(rng);
  }

  void zero_grad() {
    embedder.zero_grad();
    for (auto& layer : sparse_layers) {
      layer.zero_grad();
    }
    attention.zero_grad();
    classifier.zero_grad();
  }

  std::vector<ParamRefT<T>> parameters() {
    std::vector<ParamRefT<T>> out = embedder.parameters("embedder");
    for (std::size_t i = 0; i < sparse_layers.size(); ++i) {
      for (auto& p : sparse_layers[i].parameters("sparse" + std::to_string(i))) {
        out.push_back(p);
      }
    }
    if (config.method == Method::attention || config.method == Method::gated_attention) {
      for (auto& p : attention.parameters("attention")) {
        out.push_back(p);
      }
    }
    for (auto& p : classifier.parameters("classifier")) {
      out.push_back(p);
    }
    return out;
  }

  // Parameters of the pooling stage plus classifier, i.e. everything after
  // the shared embedder. This is the count reported by bench.
  std::int64_t pooling_parameter_count() {
    std::int64_t n = 0;
    for (auto& p : parameters()) {
      if (p.name.rfind("embedder", 0) != 0) {
        n += p.value->numel();
      }
    }
    return n;
  }

  TensorT<T> forward(const BagViewT<T>& bag, ForwardMode mode, Rng* aug_rng,
                     ModelCacheT<T>& cache) const {
    require(bag.patches != nullptr && bag.patches->shape[0] >= 1, "model: empty bag");
    cache = ModelCacheT<T>{};
    cache.embeddings = embedder.forward(*bag.patches, &cache.embedder);

    switch (config.method) {
      case Method::sparseconvmil:
        return forward_sparse(bag, mode, aug_rng, cache);
      case Method::emb_mean:
      case Method::emb_max:
      case Method::attention:
      case Method::gated_attention:
        return forward_embedding_level(cache);
      case Method::inst_mean:
      case Method::inst_max:
      case Method::inst_lse:
        return forward_instance_level(cache);
    }
    throw std::logic_error("model: unhandled method");
  }

  void backward(const ModelCacheT<T>& cache, const TensorT<T>& grad_probs) {
    require(same_shape(grad_probs, cache.probs), "model backward: grad shape mismatch");
    switch (config.method) {
      case Method::sparseconvmil:
        backward_sparse(cache, grad_probs);
        return;
      case Method::emb_mean:
      case Method::emb_max:
      case Method::attention:
      case Method::gated_attention:
        backward_embedding_level(cache, grad_probs);
        return;
      case Method::inst_mean:
      case Method::inst_max:
      case Method::inst_lse:
        backward_instance_level(cache, grad_probs);
        return;
    }
  }

 private:
  InstancePoolKind instance_kind() const {
    switch (config.method) {
      case Method::inst_mean: return InstancePoolKind::mean;
      case Method::inst_max: return InstancePoolKind::max;
      default: return InstancePoolKind::lse;
    }
  }

  TensorT<T> forward_sparse(const BagViewT<T>& bag, ForwardMode mode, Rng* aug_rng,
                            ModelCacheT<T>& cache) const {
    require(static_cast<int>(bag.locations.size()) == bag.patches->shape[0],
            "model: bag locations and patches disagree");
    cache.build = build_map_traced(std::span<const GridLoc>(bag.locations), cache.embeddings,
                                   config.downsampling, bag.full_h, bag.full_w, config.coalesce);
    const int n_samples = mode == ForwardMode::train ? std::max(1, config.n_aug) : 1;
    cache.probs = TensorT<T>({n_samples, config.n_classes});
    for (int s = 0; s < n_samples; ++s) {
      SparseBranchCache<T> branch;
      AugmentSpec spec;  // identity at eval
      if (mode == ForwardMode::train && aug_rng != nullptr) {
        spec = draw_augment(config.augment, *aug_rng);
      }
      branch.aug = augment_traced(cache.build.map, spec, config.coalesce);

      SparseMapT<T> current = branch.aug.map;
      for (const auto& layer : sparse_layers) {
        branch.layer_in.push_back(current);
        SparseMapT<T> pre = layer.forward(current);
        branch.preact.push_back(pre);
        current = relu_map(pre);
      }
      branch.pooled_input = current;
      TensorT<T> dense = adaptive_pool_to_dense(current, 1, 1, config.adaptive_pool);
      branch.bag_embedding = TensorT<T>::from({1, dense.shape[2]}, dense.data);
      TensorT<T> logits = classifier.forward(branch.bag_embedding);
      TensorT<T> probs = softmax_forward(logits);
      for (int c = 0; c < config.n_classes; ++c) {
        cache.probs.at(s, c) = probs.at(0, c);
      }
      cache.branches.push_back(std::move(branch));
    }
    return cache.probs;
  }

  void backward_sparse(const ModelCacheT<T>& cache, const TensorT<T>& grad_probs) {
    const int k = cache.embeddings.shape[0];
    const int d = cache.embeddings.shape[1];
    TensorT<T> grad_emb({k, d});
    for (std::size_t s = 0; s < cache.branches.size(); ++s) {
      const auto& branch = cache.branches[s];
      const int c_last = branch.bag_embedding.shape[1];
      TensorT<T> probs_row({1, config.n_classes});
      TensorT<T> grad_row({1, config.n_classes});
      for (int c = 0; c < config.n_classes; ++c) {
        probs_row.at(0, c) = cache.probs.at(static_cast<int>(s), c);
        grad_row.at(0, c) = grad_probs.at(static_cast<int>(s), c);
      }
      TensorT<T> grad_logits = softmax_backward(probs_row, grad_row);
      TensorT<T> grad_bag = classifier.backward(branch.bag_embedding, grad_logits);
      TensorT<T> grad_dense = TensorT<T>::from({1, 1, c_last}, grad_bag.data);
      SparseMapT<T> gmap = adaptive_pool_backward(branch.pooled_input, 1, 1,
                                                  config.adaptive_pool, grad_dense);
      for (int layer = static_cast<int>(sparse_layers.size()) - 1; layer >= 0; --layer) {
        SparseMapT<T> gpre =
            relu_map_backward(branch.preact[static_cast<std::size_t>(layer)], gmap);
        gmap = sparse_layers[static_cast<std::size_t>(layer)].backward(
            branch.layer_in[static_cast<std::size_t>(layer)], gpre);
      }
      // Through the augment and build traces back to per-instance embeddings.
      for (int i = 0; i < k; ++i) {
        const int built = cache.build.cell_of_instance[static_cast<std::size_t>(i)];
        const T w_build = cache.build.weight_of_instance[static_cast<std::size_t>(i)];
        const int moved = branch.aug.cell_map[static_cast<std::size_t>(built)];
        const T w_aug = branch.aug.cell_weight[static_cast<std::size_t>(built)];
        const auto g = gmap.cell(moved);
        for (int j = 0; j < d; ++j) {
          grad_emb.at(i, j) += w_build * w_aug * g[j];
        }
      }
    }
    embedder.backward(cache.embedder, grad_emb);
  }

  TensorT<T> forward_embedding_level(ModelCacheT<T>& cache) const {
    const int d = cache.embeddings.shape[1];
    TensorT<T> pooled({d});
    switch (config.method) {
      case Method::emb_mean:
        pooled = pool_mean(cache.embeddings);
        break;
      case Method::emb_max:
        pooled = pool_max(cache.embeddings);
        break;
      default: {
        auto att = pool_attention(cache.embeddings, attention);
        pooled = std::move(att.pooled);
        cache.att_weights = std::move(att.weights);
        break;
      }
    }
    cache.pooled = TensorT<T>::from({1, d}, pooled.data);
    TensorT<T> logits = classifier.forward(cache.pooled);
    cache.probs = softmax_forward(logits);
    return cache.probs;
  }

  void backward_embedding_level(const ModelCacheT<T>& cache, const TensorT<T>& grad_probs) {
    const int d = cache.embeddings.shape[1];
    TensorT<T> grad_logits = softmax_backward(cache.probs, grad_probs);
    TensorT<T> grad_pooled_row = classifier.backward(cache.pooled, grad_logits);
    TensorT<T> grad_pooled = TensorT<T>::from({d}, grad_pooled_row.data);
    TensorT<T> grad_emb(cache.embeddings.shape);
    switch (config.method) {
      case Method::emb_mean:
        grad_emb = pool_mean_backward(cache.embeddings, grad_pooled);
        break;
      case Method::emb_max:
        grad_emb = pool_max_backward(cache.embeddings, grad_pooled);
        break;
      default:
        grad_emb = pool_attention_backward(cache.embeddings, attention, grad_pooled);
        break;
    }
    embedder.backward(cache.embedder, grad_emb);
  }

  TensorT<T> forward_instance_level(ModelCacheT<T>& cache) const {
    cache.inst_logits = classifier.forward(cache.embeddings);
    cache.inst_scores = softmax_forward(cache.inst_logits);
    TensorT<T> pooled = pool_instance_level(cache.inst_scores, instance_kind(),
                                            static_cast<T>(config.lse_m));
    cache.probs = TensorT<T>::from({1, config.n_classes}, pooled.data);
    return cache.probs;
  }

  void backward_instance_level(const ModelCacheT<T>& cache, const TensorT<T>& grad_probs) {
    TensorT<T> grad_pooled =
        TensorT<T>::from({config.n_classes}, grad_probs.data);
    TensorT<T> grad_scores = pool_instance_level_backward(
        cache.inst_scores, instance_kind(), static_cast<T>(config.lse_m), grad_pooled);
    TensorT<T> grad_logits = softmax_backward(cache.inst_scores, grad_scores);
    TensorT<T> grad_emb = classifier.backward(cache.embeddings, grad_logits);
    embedder.backward(cache.embedder, grad_emb);
  }
};

using MilModel = MilModelT<float>;

}  // namespace smil
