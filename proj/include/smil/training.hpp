#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "smil/tensor.hpp"

namespace smil {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;  // L2 term folded into the gradient
};

// Bias-corrected Adam over a fixed parameter list. Moment buffers are
// allocated lazily on the first step and must then always see the same
// parameter order.
template <class T>
struct AdamStateT {
  AdamConfig config;
  std::int64_t t = 0;
  std::vector<std::vector<T>> m, v;

  explicit AdamStateT(const AdamConfig& cfg = {}) : config(cfg) {}

  void step(const std::vector<ParamRefT<T>>& params) {
    if (m.empty()) {
      m.resize(params.size());
      v.resize(params.size());
      for (std::size_t p = 0; p < params.size(); ++p) {
        m[p].assign(params[p].value->data.size(), T{});
        v[p].assign(params[p].value->data.size(), T{});
      }
    }
    require(m.size() == params.size(), "adam: parameter list changed size");
    ++t;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& value = params[p].value->data;
      const auto& grad = params[p].grad->data;
      require(m[p].size() == value.size() && grad.size() == value.size(),
              "adam: shape mismatch for " + params[p].name);
      for (std::size_t i = 0; i < value.size(); ++i) {
        const T g = grad[i] + static_cast<T>(config.weight_decay) * value[i];
        m[p][i] = static_cast<T>(config.beta1) * m[p][i] +
                  (static_cast<T>(1) - static_cast<T>(config.beta1)) * g;
        v[p][i] = static_cast<T>(config.beta2) * v[p][i] +
                  (static_cast<T>(1) - static_cast<T>(config.beta2)) * g * g;
        const T m_hat = m[p][i] / static_cast<T>(bc1);
        const T v_hat = v[p][i] / static_cast<T>(bc2);
        value[i] -= static_cast<T>(config.lr) * m_hat /
                    (std::sqrt(v_hat) + static_cast<T>(config.eps));
        if (!std::isfinite(static_cast<double>(value[i]))) {
          throw std::runtime_error("adam: non-finite parameter in " + params[p].name);
        }
      }
    }
  }
};

using AdamState = AdamStateT<float>;

template <class T>
struct LossResult {
  T loss;
  TensorT<T> grad;  // same shape as the probability row
};

// Negative log-likelihood of the labelled class, probability floored at
// 1e-12 before the log. probs is one distribution (shape [c] or [1, c]).
template <class T>
LossResult<T> cross_entropy_loss(const TensorT<T>& probs, int label) {
  const int c = probs.shape.back();
  require(probs.numel() == c, "cross_entropy: expected a single probability row");
  require(label >= 0 && label < c,
          "cross_entropy: label " + std::to_string(label) + " out of range [0," +
              std::to_string(c) + ")");
  require(all_finite(probs), "cross_entropy: non-finite probabilities");
  constexpr double floor = 1e-12;
  const double p = std::max(static_cast<double>(probs.data[static_cast<std::size_t>(label)]), floor);
  LossResult<T> out{static_cast<T>(-std::log(p)), TensorT<T>(probs.shape)};
  out.grad.data[static_cast<std::size_t>(label)] = static_cast<T>(-1.0 / p);
  return out;
}

// Per-class sampling weights proportional to inverse class counts,
// normalized to sum 1.
std::vector<double> oversampling_weights(const std::vector<std::int64_t>& class_counts);

}  // namespace smil
