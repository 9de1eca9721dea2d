#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "smil/layers.hpp"
#include "smil/tensor.hpp"

namespace smil {

// Permutation-invariant pooling over a bag of K embeddings, given as rows of
// a [K, D] tensor. Each operator returns one D-vector (shape [D]) and has an
// explicit backward returning the [K, D] embedding gradient.

template <class T>
TensorT<T> pool_mean(const TensorT<T>& emb) {
  require(emb.ndim() == 2 && emb.shape[0] >= 1, "pool_mean: need a non-empty [k, d] bag");
  const int k = emb.shape[0], d = emb.shape[1];
  TensorT<T> out({d});
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < d; ++j) {
      out.at(j) += emb.at(i, j);
    }
  }
  const T inv = static_cast<T>(1) / static_cast<T>(k);
  for (int j = 0; j < d; ++j) {
    out.at(j) *= inv;
  }
  return out;
}

template <class T>
TensorT<T> pool_mean_backward(const TensorT<T>& emb, const TensorT<T>& grad_out) {
  const int k = emb.shape[0], d = emb.shape[1];
  require(grad_out.shape == std::vector<int>({d}), "pool_mean backward: bad grad shape");
  TensorT<T> gx(emb.shape);
  const T inv = static_cast<T>(1) / static_cast<T>(k);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < d; ++j) {
      gx.at(i, j) = grad_out.at(j) * inv;
    }
  }
  return gx;
}

// Elementwise max over the bag; backward routes each dimension's gradient to
// the lowest-index instance attaining the max.
template <class T>
TensorT<T> pool_max(const TensorT<T>& emb) {
  require(emb.ndim() == 2 && emb.shape[0] >= 1, "pool_max: need a non-empty [k, d] bag");
  const int k = emb.shape[0], d = emb.shape[1];
  TensorT<T> out({d});
  for (int j = 0; j < d; ++j) {
    out.at(j) = emb.at(0, j);
  }
  for (int i = 1; i < k; ++i) {
    for (int j = 0; j < d; ++j) {
      out.at(j) = std::max(out.at(j), emb.at(i, j));
    }
  }
  return out;
}

template <class T>
TensorT<T> pool_max_backward(const TensorT<T>& emb, const TensorT<T>& grad_out) {
  const int k = emb.shape[0], d = emb.shape[1];
  require(grad_out.shape == std::vector<int>({d}), "pool_max backward: bad grad shape");
  TensorT<T> gx(emb.shape);
  for (int j = 0; j < d; ++j) {
    int best = 0;
    for (int i = 1; i < k; ++i) {
      if (emb.at(i, j) > emb.at(best, j)) {
        best = i;
      }
    }
    gx.at(best, j) = grad_out.at(j);
  }
  return gx;
}

// Per dimension: (1/M) * log sum_k exp(M * x_k), max-subtracted for
// stability. Approaches pool_max as M grows.
template <class T>
TensorT<T> pool_lse(const TensorT<T>& emb, T m_param) {
  require(emb.ndim() == 2 && emb.shape[0] >= 1, "pool_lse: need a non-empty [k, d] bag");
  require(m_param > T{}, "pool_lse: M must be positive");
  const int k = emb.shape[0], d = emb.shape[1];
  TensorT<T> out({d});
  for (int j = 0; j < d; ++j) {
    T mx = emb.at(0, j);
    for (int i = 1; i < k; ++i) {
      mx = std::max(mx, emb.at(i, j));
    }
    T sum{};
    for (int i = 0; i < k; ++i) {
      sum += std::exp(m_param * (emb.at(i, j) - mx));
    }
    out.at(j) = mx + std::log(sum) / m_param;
  }
  return out;
}

template <class T>
TensorT<T> pool_lse_backward(const TensorT<T>& emb, T m_param, const TensorT<T>& grad_out) {
  const int k = emb.shape[0], d = emb.shape[1];
  require(grad_out.shape == std::vector<int>({d}), "pool_lse backward: bad grad shape");
  TensorT<T> gx(emb.shape);
  for (int j = 0; j < d; ++j) {
    T mx = emb.at(0, j);
    for (int i = 1; i < k; ++i) {
      mx = std::max(mx, emb.at(i, j));
    }
    T sum{};
    for (int i = 0; i < k; ++i) {
      sum += std::exp(m_param * (emb.at(i, j) - mx));
    }
    for (int i = 0; i < k; ++i) {
      gx.at(i, j) = grad_out.at(j) * std::exp(m_param * (emb.at(i, j) - mx)) / sum;
    }
  }
  return gx;
}

// Attention pooling: logit_k = w' tanh(V x_k), gated variant multiplies in
// sigmoid(U x_k) elementwise; weights are the softmax over instances and the
// output is the weighted sum of embeddings.
template <class T>
struct AttentionParamsT {
  TensorT<T> v;       // [l, d]
  TensorT<T> u_gate;  // [l, d], gated variant only
  TensorT<T> w_att;   // [l, 1]
  TensorT<T> grad_v, grad_u_gate, grad_w_att;
  bool gated = false;

  AttentionParamsT() = default;

  AttentionParamsT(int hidden, int dim, bool gated_in)
      : v({hidden, dim}),
        u_gate({hidden, dim}),
        w_att({hidden, 1}),
        grad_v({hidden, dim}),
        grad_u_gate({hidden, dim}),
        grad_w_att({hidden, 1}),
        gated(gated_in) {}

  int hidden() const { return v.shape[0]; }
  int dim() const { return v.shape[1]; }

  void init(Rng& rng) {
    glorot_uniform(v, dim(), hidden(), rng);
    if (gated) {
      glorot_uniform(u_gate, dim(), hidden(), rng);
    } else {
      u_gate.zero();
    }
    glorot_uniform(w_att, hidden(), 1, rng);
  }

  void zero_grad() {
    grad_v.zero();
    grad_u_gate.zero();
    grad_w_att.zero();
  }

  std::vector<ParamRefT<T>> parameters(const std::string& prefix) {
    std::vector<ParamRefT<T>> out{{prefix + ".v", &v, &grad_v},
                                  {prefix + ".w", &w_att, &grad_w_att}};
    if (gated) {
      out.push_back({prefix + ".u", &u_gate, &grad_u_gate});
    }
    return out;
  }
};

template <class T>
struct AttentionOutput {
  TensorT<T> pooled;   // [d]
  TensorT<T> weights;  // [k], softmax over instances
};

template <class T>
AttentionOutput<T> pool_attention(const TensorT<T>& emb, const AttentionParamsT<T>& params) {
  require(emb.ndim() == 2 && emb.shape[0] >= 1, "pool_attention: need a non-empty [k, d] bag");
  require(emb.shape[1] == params.dim(), "pool_attention: embedding dim mismatch");
  const int k = emb.shape[0], d = emb.shape[1], l = params.hidden();

  TensorT<T> logits({k});
  for (int i = 0; i < k; ++i) {
    T logit{};
    for (int a = 0; a < l; ++a) {
      T pre{};
      for (int j = 0; j < d; ++j) {
        pre += params.v.at(a, j) * emb.at(i, j);
      }
      T h = std::tanh(pre);
      if (params.gated) {
        T gpre{};
        for (int j = 0; j < d; ++j) {
          gpre += params.u_gate.at(a, j) * emb.at(i, j);
        }
        h *= static_cast<T>(1) / (static_cast<T>(1) + std::exp(-gpre));
      }
      logit += params.w_att.at(a, 0) * h;
    }
    logits.at(i) = logit;
  }

  TensorT<T> weights = softmax_forward(logits);
  TensorT<T> pooled({d});
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < d; ++j) {
      pooled.at(j) += weights.at(i) * emb.at(i, j);
    }
  }
  return {std::move(pooled), std::move(weights)};
}

// Accumulates parameter gradients, returns the embedding gradient. Embeddings
// receive contributions from both the weighted sum and the logits.
template <class T>
TensorT<T> pool_attention_backward(const TensorT<T>& emb, AttentionParamsT<T>& params,
                                   const TensorT<T>& grad_pooled) {
  const int k = emb.shape[0], d = emb.shape[1], l = params.hidden();
  require(grad_pooled.shape == std::vector<int>({d}), "pool_attention backward: bad grad shape");

  // Recompute forward intermediates.
  TensorT<T> pre({k, l}), gate_pre({k, l}), logits({k});
  for (int i = 0; i < k; ++i) {
    T logit{};
    for (int a = 0; a < l; ++a) {
      T p{};
      for (int j = 0; j < d; ++j) {
        p += params.v.at(a, j) * emb.at(i, j);
      }
      pre.at(i, a) = p;
      T h = std::tanh(p);
      if (params.gated) {
        T gp{};
        for (int j = 0; j < d; ++j) {
          gp += params.u_gate.at(a, j) * emb.at(i, j);
        }
        gate_pre.at(i, a) = gp;
        h *= static_cast<T>(1) / (static_cast<T>(1) + std::exp(-gp));
      }
      logit += params.w_att.at(a, 0) * h;
    }
    logits.at(i) = logit;
  }
  TensorT<T> weights = softmax_forward(logits);

  // d(pooled)/d(weights) and the direct embedding term.
  TensorT<T> grad_weights({k});
  TensorT<T> grad_emb(emb.shape);
  for (int i = 0; i < k; ++i) {
    T gw{};
    for (int j = 0; j < d; ++j) {
      gw += grad_pooled.at(j) * emb.at(i, j);
      grad_emb.at(i, j) = weights.at(i) * grad_pooled.at(j);
    }
    grad_weights.at(i) = gw;
  }
  TensorT<T> grad_logits = softmax_backward(weights, grad_weights);

  for (int i = 0; i < k; ++i) {
    const T gl = grad_logits.at(i);
    for (int a = 0; a < l; ++a) {
      const T t = std::tanh(pre.at(i, a));
      T s = static_cast<T>(1);
      if (params.gated) {
        s = static_cast<T>(1) / (static_cast<T>(1) + std::exp(-gate_pre.at(i, a)));
      }
      const T h = params.gated ? t * s : t;
      params.grad_w_att.at(a, 0) += gl * h;
      const T gh = gl * params.w_att.at(a, 0);
      const T gt = params.gated ? gh * s : gh;
      const T gpre = gt * (static_cast<T>(1) - t * t);
      for (int j = 0; j < d; ++j) {
        params.grad_v.at(a, j) += gpre * emb.at(i, j);
        grad_emb.at(i, j) += gpre * params.v.at(a, j);
      }
      if (params.gated) {
        const T gs = gh * t;
        const T ggate = gs * s * (static_cast<T>(1) - s);
        for (int j = 0; j < d; ++j) {
          params.grad_u_gate.at(a, j) += ggate * emb.at(i, j);
          grad_emb.at(i, j) += ggate * params.u_gate.at(a, j);
        }
      }
    }
  }
  return grad_emb;
}

enum class InstancePoolKind { mean, max, lse };

// Instance-level MIL: pools per-tile class probabilities (rows of a [K, C]
// tensor summing to 1) column-by-column, then renormalizes to a distribution.
template <class T>
TensorT<T> pool_instance_level(const TensorT<T>& scores, InstancePoolKind kind, T m_param) {
  require(scores.ndim() == 2 && scores.shape[0] >= 1,
          "pool_instance_level: need a non-empty [k, c] score matrix");
  const int k = scores.shape[0], c = scores.shape[1];
  for (int i = 0; i < k; ++i) {
    T row_sum{};
    for (int j = 0; j < c; ++j) {
      row_sum += scores.at(i, j);
    }
    require(std::abs(static_cast<double>(row_sum) - 1.0) < 1e-3,
            "pool_instance_level: row " + std::to_string(i) + " does not sum to 1");
  }
  TensorT<T> pooled({c});
  switch (kind) {
    case InstancePoolKind::mean:
      pooled = pool_mean(scores);
      break;
    case InstancePoolKind::max:
      pooled = pool_max(scores);
      break;
    case InstancePoolKind::lse:
      pooled = pool_lse(scores, m_param);
      break;
  }
  T total{};
  for (int j = 0; j < c; ++j) {
    total += pooled.at(j);
  }
  for (int j = 0; j < c; ++j) {
    pooled.at(j) /= total;
  }
  return pooled;
}

template <class T>
TensorT<T> pool_instance_level_backward(const TensorT<T>& scores, InstancePoolKind kind,
                                        T m_param, const TensorT<T>& grad_out) {
  const int c = scores.shape[1];
  require(grad_out.shape == std::vector<int>({c}), "pool_instance_level backward: bad grad");

  TensorT<T> pooled({c});
  switch (kind) {
    case InstancePoolKind::mean:
      pooled = pool_mean(scores);
      break;
    case InstancePoolKind::max:
      pooled = pool_max(scores);
      break;
    case InstancePoolKind::lse:
      pooled = pool_lse(scores, m_param);
      break;
  }
  T total{};
  for (int j = 0; j < c; ++j) {
    total += pooled.at(j);
  }
  // y = z / sum(z):  dz_j = (g_j - sum_i g_i y_i) / sum(z)
  T dot{};
  for (int j = 0; j < c; ++j) {
    dot += grad_out.at(j) * pooled.at(j) / total;
  }
  TensorT<T> grad_pooled({c});
  for (int j = 0; j < c; ++j) {
    grad_pooled.at(j) = (grad_out.at(j) - dot) / total;
  }

  switch (kind) {
    case InstancePoolKind::mean:
      return pool_mean_backward(scores, grad_pooled);
    case InstancePoolKind::max:
      return pool_max_backward(scores, grad_pooled);
    case InstancePoolKind::lse:
      return pool_lse_backward(scores, m_param, grad_pooled);
  }
  return TensorT<T>(scores.shape);
}

}  // namespace smil
