#include "smil/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "smil/layers.hpp"
#include "smil/mil_pooling.hpp"
#include "smil/model.hpp"
#include "smil/rng.hpp"
#include "smil/sparse_cnn.hpp"
#include "smil/sparse_map.hpp"
#include "smil/training.hpp"

namespace smil {

namespace {

using DTensor = TensorT<double>;

DTensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  DTensor t(std::move(shape));
  for (double& v : t.data) {
    v = rng.uniform(lo, hi);
  }
  return t;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1e-3, std::abs(a), std::abs(b)});
}

double projected(const DTensor& out, const DTensor& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    s += out.data[i] * weights.data[i];
  }
  return s;
}

}  // namespace

double finite_difference_max_err(std::vector<double>& values,
                                 const std::function<double()>& loss,
                                 const std::vector<double>& analytic, double step) {
  double worst = 0.0;
  std::size_t skipped = 0;
  const auto central = [&](std::size_t i, double h) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = loss();
    values[i] = saved - h;
    const double down = loss();
    values[i] = saved;
    return (up - down) / (2.0 * h);
  };
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double fd = central(i, step);
    // Two-step agreement: if halving the step moves the estimate, the loss
    // has a kink (argmax flip, rectifier boundary) inside the stencil and no
    // derivative exists there to compare against. Such points are skipped;
    // they must stay rare.
    const double fd_half = central(i, step / 2.0);
    if (rel_err(fd, fd_half) > 1e-5) {
      ++skipped;
      continue;
    }
    worst = std::max(worst, rel_err(fd, analytic[i]));
  }
  if (skipped * 20 > values.size()) {
    throw std::runtime_error("finite differences: too many non-smooth points (" +
                             std::to_string(skipped) + " of " + std::to_string(values.size()) +
                             ")");
  }
  return worst;
}

namespace {

GradCheckResult check_linear(Rng& rng) {
  GradCheckResult result{"linear", 0.0, 1e-4, false};
  for (int rep = 0; rep < 20; ++rep) {
    LinearLayerT<double> layer(3, 4);
    layer.weight = random_tensor({4, 3}, rng);
    layer.bias = random_tensor({4}, rng);
    DTensor x = random_tensor({2, 3}, rng);
    const DTensor proj = random_tensor({2, 4}, rng);
    const auto loss = [&] { return projected(layer.forward(x), proj); };

    layer.zero_grad();
    DTensor grad_x = layer.backward(x, proj);
    result.max_rel_err = std::max(
        result.max_rel_err,
        finite_difference_max_err(layer.weight.data, loss, layer.grad_weight.data));
    result.max_rel_err = std::max(
        result.max_rel_err, finite_difference_max_err(layer.bias.data, loss, layer.grad_bias.data));
    result.max_rel_err =
        std::max(result.max_rel_err, finite_difference_max_err(x.data, loss, grad_x.data));
  }
  result.pass = result.max_rel_err < result.tolerance;
  return result;
}

GradCheckResult check_dense_conv(Rng& rng) {
  GradCheckResult result{"dense_conv2d", 0.0, 1e-4, false};
  for (int rep = 0; rep < 20; ++rep) {
    const int stride = rep % 2 == 0 ? 1 : 2;
    const int padding = rep % 3 == 0 ? 0 : 1;
    DenseConv2dLayerT<double> layer(2, 3, 3, stride, padding);
    layer.kernel = random_tensor(layer.kernel.shape, rng);
    layer.bias = random_tensor({3}, rng);
    DTensor x = random_tensor({2, 2, 6, 6}, rng);
    const DTensor proj = random_tensor(layer.forward(x).shape, rng);
    const auto loss = [&] { return projected(layer.forward(x), proj); };

    layer.zero_grad();
    DTensor grad_x = layer.backward(x, proj);
    result.max_rel_err = std::max(
        result.max_rel_err,
        finite_difference_max_err(layer.kernel.data, loss, layer.grad_kernel.data));
    result.max_rel_err = std::max(
        result.max_rel_err, finite_difference_max_err(layer.bias.data, loss, layer.grad_bias.data));
    result.max_rel_err =
        std::max(result.max_rel_err, finite_difference_max_err(x.data, loss, grad_x.data));
  }
  result.pass = result.max_rel_err < result.tolerance;
  return result;
}

GradCheckResult check_activations(Rng& rng) {
  GradCheckResult result{"activations", 0.0, 1e-4, false};
  for (int rep = 0; rep < 20; ++rep) {
    for (Activation kind : {Activation::relu, Activation::tanh, Activation::sigmoid}) {
      DTensor x = random_tensor({2, 5}, rng);
      if (kind == Activation::relu) {
        // Keep inputs away from the kink.
        for (double& v : x.data) {
          v += v >= 0.0 ? 0.1 : -0.1;
        }
      }
      const DTensor proj = random_tensor(x.shape, rng);
      const auto loss = [&] { return projected(activation_forward(kind, x), proj); };
      const DTensor grad_x = activation_backward(kind, x, proj);
      result.max_rel_err =
          std::max(result.max_rel_err, finite_difference_max_err(x.data, loss, grad_x.data));
    }
  }
  result.pass = result.max_rel_err < result.tolerance;
  return result;
}

GradCheckResult check_dense_pools(Rng& rng) {
  GradCheckResult result{"dense_pools", 0.0, 1e-4, false};
  for (int rep = 0; rep < 20; ++rep) {
    DTensor x = random_tensor({2, 3, 4, 4}, rng);
    {
      const DTensor proj = random_tensor({2, 3, 2, 2}, rng);
      const auto loss = [&] { return projected(maxpool2d_forward(x, 2), proj); };
      const DTensor grad_x = maxpool2d_backward(x, 2, proj);
      result.max_rel_err =
          std::max(result.max_rel_err, finite_difference_max_err(x.data, loss, grad_x.data));
    }
    {
      const DTensor proj = random_tensor({2, 3}, rng);
      const auto loss = [&] { return projected(global_avg_pool_forward(x), proj); };
      const DTensor grad_x = global_avg_pool_backward(x, proj);
      result.max_rel_err =
          std::max(result.max_rel_err, finite_difference_max_err(x.data, loss, grad_x.data));
    }
  }
  result.pass = result.max_rel_err < result.tolerance;
  return result;
}

GradCheckResult check_softmax_cross_entropy(Rng& rng) {
  GradCheckResult result{"softmax_cross_entropy", 0.0, 1e-4, false};
  for (int rep = 0; rep < 20; ++rep) {
    DTensor logits = random_tensor({1, 5}, rng, -2.0, 2.0);
    const int label = rep % 5;
    const auto loss = [&] {
      return static_cast<double>(cross_entropy_loss(softmax_forward(logits), label).loss);
    };
    const DTensor probs = softmax_forward(logits);
    const auto ce = cross_entropy_loss(probs, label);
    const DTensor grad_logits = softmax_backward(probs, ce.grad);
    result.max_rel_err = std::max(
        result.max_rel_err, finite_difference_max_err(logits.data, loss, grad_logits.data));
  }
  result.pass = result.max_rel_err < result.tolerance;
  return result;
}

SparseMapT<double> random_map(Rng& rng, int grid_h, int grid_w, int dim, int n_cells) {
  SparseMapT<double> raw(grid_h, grid_w, dim);
  for (int i = 0; i < n_cells; ++i) {
    std::vector<double> e(static_cast<std::size_t>(dim));
    for (double& v : e) {
      v = rng.uniform(-1.0, 1.0);
    }
    raw.push_cell(static_cast<int>(rng.uniform_int(0, grid_h - 1)),
                  static_cast<int>(rng.uniform_int(0, grid_w - 1)),
                  std::span<const double>(e.data(), e.size()));
  }
  return coalesce(raw);
}

GradCheckResult check_sparse_conv(Rng& rng) {
  GradCheckResult result{"sparse_conv", 0.0, 1e-4, false};
  for (int rep = 0; rep < 20; ++rep) {
    const int stride = rep % 2 == 0 ? 1 : 2;
    SparseConvLayerT<double> layer(2, 3, 1, stride, true);
    layer.kernel = random_tensor(layer.kernel.shape, rng);
    layer.bias = random_tensor({3}, rng);
    SparseMapT<double> in = random_map(rng, 8, 8, 2, 5);

    const SparseMapT<double> out0 = layer.forward(in);
    SparseMapT<double> proj = out0;
    for (double& v : proj.values) {
      v = rng.uniform(-1.0, 1.0);
    }
    const auto loss = [&] {
      const SparseMapT<double> out = layer.forward(in);
      double s = 0.0;
      for (std::size_t i = 0; i < out.values.size(); ++i) {
        s += out.values[i] * proj.values[i];
      }
      return s;
    };

    layer.zero_grad();
    SparseMapT<double> grad_in = layer.backward(in, proj);
    result.max_rel_err = std::max(
        result.max_rel_err,
        finite_difference_max_err(layer.kernel.data, loss, layer.grad_kernel.data));
    result.max_rel_err = std::max(
        result.max_rel_err, finite_difference_max_err(layer.bias.data, loss, layer.grad_bias.data));
    result.max_rel_err =
        std::max(result.max_rel_err, finite_difference_max_err(in.values, loss, grad_in.values));
  }
  result.pass = result.max_rel_err < result.tolerance;
  return result;
}

GradCheckResult check_sparse_pools(Rng& rng) {
  GradCheckResult result{"sparse_pools", 0.0, 1e-4, false};
  for (int rep = 0; rep < 20; ++rep) {
    for (SparsePoolKind kind : {SparsePoolKind::max, SparsePoolKind::avg}) {
      SparsePoolLayerT<double> layer(kind, rep % 2 == 0 ? 2 : 3, rep % 2 == 0 ? 2 : 1);
      SparseMapT<double> in = random_map(rng, 6, 6, 3, 6);
      const SparseMapT<double> out0 = layer.forward(in);
      SparseMapT<double> proj = out0;
      for (double& v : proj.values) {
        v = rng.uniform(-1.0, 1.0);
      }
      const auto loss = [&] {
        const SparseMapT<double> out = layer.forward(in);
        double s = 0.0;
        for (std::size_t i = 0; i < out.values.size(); ++i) {
          s += out.values[i] * proj.values[i];
        }
        return s;
      };
      const SparseMapT<double> grad_in = layer.backward(in, proj);
      result.max_rel_err =
          std::max(result.max_rel_err, finite_difference_max_err(in.values, loss, grad_in.values));
    }

    // Adaptive pooling to a dense grid, both kinds.
    for (SparsePoolKind kind : {SparsePoolKind::avg, SparsePoolKind::max}) {
      SparseMapT<double> in = random_map(rng, 6, 6, 2, 5);
      const DTensor proj = random_tensor({2, 2, 2}, rng);
      const auto loss = [&] { return projected(adaptive_pool_to_dense(in, 2, 2, kind), proj); };
      const SparseMapT<double> grad_in = adaptive_pool_backward(in, 2, 2, kind, proj);
      result.max_rel_err =
          std::max(result.max_rel_err, finite_difference_max_err(in.values, loss, grad_in.values));
    }
  }
  result.pass = result.max_rel_err < result.tolerance;
  return result;
}

GradCheckResult check_mil_poolings(Rng& rng) {
  GradCheckResult result{"mil_poolings", 0.0, 1e-4, false};
  for (int rep = 0; rep < 20; ++rep) {
    DTensor emb = random_tensor({5, 4}, rng);
    const DTensor proj = random_tensor({4}, rng);
    {
      const auto loss = [&] { return projected(pool_mean(emb), proj); };
      const DTensor g = pool_mean_backward(emb, proj);
      result.max_rel_err =
          std::max(result.max_rel_err, finite_difference_max_err(emb.data, loss, g.data));
    }
    {
      const auto loss = [&] { return projected(pool_max(emb), proj); };
      const DTensor g = pool_max_backward(emb, proj);
      result.max_rel_err =
          std::max(result.max_rel_err, finite_difference_max_err(emb.data, loss, g.data));
    }
    {
      const double m = 3.0;
      const auto loss = [&] { return projected(pool_lse(emb, m), proj); };
      const DTensor g = pool_lse_backward(emb, m, proj);
      result.max_rel_err =
          std::max(result.max_rel_err, finite_difference_max_err(emb.data, loss, g.data));
    }
    for (bool gated : {false, true}) {
      AttentionParamsT<double> params(3, 4, gated);
      params.v = random_tensor({3, 4}, rng);
      params.u_gate = random_tensor({3, 4}, rng);
      params.w_att = random_tensor({3, 1}, rng);
      const auto loss = [&] { return projected(pool_attention(emb, params).pooled, proj); };
      params.zero_grad();
      const DTensor grad_emb = pool_attention_backward(emb, params, proj);
      result.max_rel_err =
          std::max(result.max_rel_err, finite_difference_max_err(emb.data, loss, grad_emb.data));
      result.max_rel_err = std::max(
          result.max_rel_err, finite_difference_max_err(params.v.data, loss, params.grad_v.data));
      result.max_rel_err =
          std::max(result.max_rel_err,
                   finite_difference_max_err(params.w_att.data, loss, params.grad_w_att.data));
      if (gated) {
        result.max_rel_err =
            std::max(result.max_rel_err, finite_difference_max_err(params.u_gate.data, loss,
                                                                   params.grad_u_gate.data));
      }
    }
  }
  result.pass = result.max_rel_err < result.tolerance;
  return result;
}

// Whole pipeline on a toy setup: 3 instances, patch 1x8x8, embedding dim 4,
// 2 classes; the loss is the bag-level cross-entropy.
GradCheckResult check_end_to_end(Method method, Rng& rng) {
  GradCheckResult result{std::string("end_to_end_") + method_name(method), 0.0, 1e-3, false};

  ModelConfig cfg;
  cfg.method = method;
  cfg.n_classes = 2;
  cfg.downsampling = 8;
  cfg.sparse_conv_channels = {3, 2};
  cfg.lse_m = 2.0;
  cfg.attention_hidden = 3;
  cfg.n_aug = 1;
  cfg.augment = {false, false, 0};
  cfg.embedder.patch_channels = 1;
  cfg.embedder.patch_h = 8;
  cfg.embedder.patch_w = 8;
  cfg.embedder.conv_channels = {2, 3};
  cfg.embedder.embedding_dim = 4;

  for (int rep = 0; rep < 3; ++rep) {
    MilModelT<double> model(cfg);
    Rng init(rng.next_u64());
    model.init(init);
    // Zero-initialized biases put rectifier kinks exactly on the evaluation
    // point (an all-clipped receptive field sums to exactly 0, where central
    // differences see the average of two one-sided slopes). Randomizing every
    // parameter moves the network to a generic position.
    for (auto& p : model.parameters()) {
      for (double& v : p.value->data) {
        v = rng.uniform(-0.6, 0.6);
      }
    }

    DTensor patches = random_tensor({3, 1, 8, 8}, rng, 0.0, 1.0);
    BagViewT<double> bag;
    bag.patches = &patches;
    bag.locations = {{3, 5}, {17, 9}, {26, 30}};
    bag.full_h = 32;
    bag.full_w = 32;
    const int label = rep % 2;

    ModelCacheT<double> cache;
    const auto loss = [&] {
      const DTensor probs = model.forward(bag, ForwardMode::eval, nullptr, cache);
      DTensor row({1, 2});
      row.at(0, 0) = probs.at(0, 0);
      row.at(0, 1) = probs.at(0, 1);
      return static_cast<double>(cross_entropy_loss(row, label).loss);
    };

    model.zero_grad();
    const DTensor probs = model.forward(bag, ForwardMode::eval, nullptr, cache);
    DTensor row({1, 2});
    row.at(0, 0) = probs.at(0, 0);
    row.at(0, 1) = probs.at(0, 1);
    const auto ce = cross_entropy_loss(row, label);
    DTensor grad_probs({1, 2});
    grad_probs.at(0, 0) = ce.grad.at(0, 0);
    grad_probs.at(0, 1) = ce.grad.at(0, 1);
    model.backward(cache, grad_probs);

    for (auto& p : model.parameters()) {
      result.max_rel_err = std::max(
          result.max_rel_err, finite_difference_max_err(p.value->data, loss, p.grad->data));
    }
  }
  result.pass = result.max_rel_err < result.tolerance;
  return result;
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x9c));
  std::vector<GradCheckResult> results;
  results.push_back(check_linear(rng));
  results.push_back(check_dense_conv(rng));
  results.push_back(check_activations(rng));
  results.push_back(check_dense_pools(rng));
  results.push_back(check_softmax_cross_entropy(rng));
  results.push_back(check_sparse_conv(rng));
  results.push_back(check_sparse_pools(rng));
  results.push_back(check_mil_poolings(rng));
  results.push_back(check_end_to_end(Method::sparseconvmil, rng));
  results.push_back(check_end_to_end(Method::attention, rng));
  results.push_back(check_end_to_end(Method::gated_attention, rng));
  results.push_back(check_end_to_end(Method::inst_lse, rng));
  return results;
}

bool gradcheck_all_pass(const std::vector<GradCheckResult>& results) {
  for (const auto& r : results) {
    if (!r.pass) {
      return false;
    }
  }
  return true;
}

}  // namespace smil
