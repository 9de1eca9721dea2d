#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "smil/rng.hpp"
#include "smil/tensor.hpp"

namespace smil {

// Uniform Glorot-style init: weights in +-sqrt(6/(fan_in+fan_out)). Values
// are drawn in storage order in double and narrowed, so the same seed gives
// bit-identical parameters at either precision scale.
template <class T>
void glorot_uniform(TensorT<T>& w, int fan_in, int fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / (static_cast<double>(fan_in) + fan_out));
  for (T& v : w.data) {
    v = static_cast<T>(rng.uniform(-bound, bound));
  }
}

// Fully connected layer: weight [out, in], bias [out]. backward() accumulates
// into the grad buffers and returns the input gradient; callers zero the
// buffers at step start.
template <class T>
struct LinearLayerT {
  TensorT<T> weight, bias;
  TensorT<T> grad_weight, grad_bias;

  LinearLayerT() = default;

  LinearLayerT(int in_features, int out_features)
      : weight({out_features, in_features}),
        bias({out_features}),
        grad_weight({out_features, in_features}),
        grad_bias({out_features}) {}

  int in_features() const { return weight.shape[1]; }
  int out_features() const { return weight.shape[0]; }

  void init(Rng& rng) {
    glorot_uniform(weight, in_features(), out_features(), rng);
    bias.zero();
  }

  void zero_grad() {
    grad_weight.zero();
    grad_bias.zero();
  }

  TensorT<T> forward(const TensorT<T>& x) const {
    require(x.ndim() == 2, "linear: input must be 2-d, got " + shape_str(x.shape));
    require(x.shape[1] == in_features(),
            "linear: input width " + std::to_string(x.shape[1]) + " != in features " +
                std::to_string(in_features()));
    const int batch = x.shape[0];
    const int in = in_features();
    const int out = out_features();
    TensorT<T> y({batch, out});
    for (int b = 0; b < batch; ++b) {
      const T* xb = &x.at(b, 0);
      for (int o = 0; o < out; ++o) {
        const T* wo = &weight.at(o, 0);
        T acc = bias.at(o);
        for (int i = 0; i < in; ++i) {
          acc += wo[i] * xb[i];
        }
        y.at(b, o) = acc;
      }
    }
    return y;
  }

  TensorT<T> backward(const TensorT<T>& x, const TensorT<T>& grad_out) {
    require(x.ndim() == 2 && x.shape[1] == in_features(), "linear backward: bad input shape");
    require(grad_out.ndim() == 2 && grad_out.shape[0] == x.shape[0] &&
                grad_out.shape[1] == out_features(),
            "linear backward: bad grad shape " + shape_str(grad_out.shape));
    const int batch = x.shape[0];
    const int in = in_features();
    const int out = out_features();
    TensorT<T> grad_x({batch, in});
    for (int b = 0; b < batch; ++b) {
      const T* xb = &x.at(b, 0);
      T* gx = &grad_x.at(b, 0);
      for (int o = 0; o < out; ++o) {
        const T g = grad_out.at(b, o);
        grad_bias.at(o) += g;
        T* gw = &grad_weight.at(o, 0);
        const T* wo = &weight.at(o, 0);
        for (int i = 0; i < in; ++i) {
          gw[i] += g * xb[i];
          gx[i] += g * wo[i];
        }
      }
    }
    return grad_x;
  }

  std::vector<ParamRefT<T>> parameters(const std::string& prefix) {
    return {{prefix + ".weight", &weight, &grad_weight}, {prefix + ".bias", &bias, &grad_bias}};
  }
};

// Dense 2-d cross-correlation with zero padding. kernel [out_c, in_c, k, k],
// k odd. Doubles as the reference for the sparse convolution: densifying a
// sparse map and running this with padding = half-size must reproduce the
// sparse output at every active cell.
template <class T>
struct DenseConv2dLayerT {
  TensorT<T> kernel, bias;
  TensorT<T> grad_kernel, grad_bias;
  int stride = 1;
  int padding = 0;

  DenseConv2dLayerT() = default;

  DenseConv2dLayerT(int in_c, int out_c, int ksize, int stride_in, int padding_in)
      : kernel({out_c, in_c, ksize, ksize}),
        bias({out_c}),
        grad_kernel({out_c, in_c, ksize, ksize}),
        grad_bias({out_c}),
        stride(stride_in),
        padding(padding_in) {
    require(ksize % 2 == 1, "conv2d: kernel size must be odd");
    require(stride >= 1 && padding >= 0, "conv2d: bad stride/padding");
  }

  int in_channels() const { return kernel.shape[1]; }
  int out_channels() const { return kernel.shape[0]; }
  int ksize() const { return kernel.shape[2]; }

  void init(Rng& rng) {
    const int k = ksize();
    glorot_uniform(kernel, in_channels() * k * k, out_channels() * k * k, rng);
    bias.zero();
  }

  void zero_grad() {
    grad_kernel.zero();
    grad_bias.zero();
  }

  void check_input(const TensorT<T>& x) const {
    require(x.ndim() == 4, "conv2d: input must be [batch, c, h, w]");
    require(x.shape[1] == in_channels(), "conv2d: channel mismatch");
    require(x.shape[2] >= ksize() - 2 * padding && x.shape[3] >= ksize() - 2 * padding,
            "conv2d: spatial extent too small for kernel");
  }

  int out_extent(int in_extent) const {
    return (in_extent + 2 * padding - ksize()) / stride + 1;
  }

  TensorT<T> forward(const TensorT<T>& x) const {
    check_input(x);
    const int batch = x.shape[0], in_c = x.shape[1], h = x.shape[2], w = x.shape[3];
    const int out_c = out_channels(), k = ksize();
    const int oh = out_extent(h), ow = out_extent(w);
    require(oh > 0 && ow > 0, "conv2d: empty output");
    TensorT<T> y({batch, out_c, oh, ow});
    for (int b = 0; b < batch; ++b) {
      for (int o = 0; o < out_c; ++o) {
        for (int i = 0; i < oh; ++i) {
          for (int j = 0; j < ow; ++j) {
            T acc = bias.at(o);
            for (int c = 0; c < in_c; ++c) {
              for (int kh = 0; kh < k; ++kh) {
                const int r = i * stride - padding + kh;
                if (r < 0 || r >= h) continue;
                for (int kw = 0; kw < k; ++kw) {
                  const int s = j * stride - padding + kw;
                  if (s < 0 || s >= w) continue;
                  acc += kernel.at(o, c, kh, kw) * x.at(b, c, r, s);
                }
              }
            }
            y.at(b, o, i, j) = acc;
          }
        }
      }
    }
    return y;
  }

  TensorT<T> backward(const TensorT<T>& x, const TensorT<T>& grad_out) {
    check_input(x);
    const int batch = x.shape[0], in_c = x.shape[1], h = x.shape[2], w = x.shape[3];
    const int out_c = out_channels(), k = ksize();
    const int oh = out_extent(h), ow = out_extent(w);
    require(grad_out.shape == std::vector<int>({batch, out_c, oh, ow}),
            "conv2d backward: bad grad shape " + shape_str(grad_out.shape));
    TensorT<T> grad_x(x.shape);
    for (int b = 0; b < batch; ++b) {
      for (int o = 0; o < out_c; ++o) {
        for (int i = 0; i < oh; ++i) {
          for (int j = 0; j < ow; ++j) {
            const T g = grad_out.at(b, o, i, j);
            grad_bias.at(o) += g;
            for (int c = 0; c < in_c; ++c) {
              for (int kh = 0; kh < k; ++kh) {
                const int r = i * stride - padding + kh;
                if (r < 0 || r >= h) continue;
                for (int kw = 0; kw < k; ++kw) {
                  const int s = j * stride - padding + kw;
                  if (s < 0 || s >= w) continue;
                  grad_kernel.at(o, c, kh, kw) += g * x.at(b, c, r, s);
                  grad_x.at(b, c, r, s) += g * kernel.at(o, c, kh, kw);
                }
              }
            }
          }
        }
      }
    }
    return grad_x;
  }

  std::vector<ParamRefT<T>> parameters(const std::string& prefix) {
    return {{prefix + ".kernel", &kernel, &grad_kernel}, {prefix + ".bias", &bias, &grad_bias}};
  }
};

enum class Activation { relu, tanh, sigmoid };

template <class T>
TensorT<T> activation_forward(Activation kind, const TensorT<T>& x) {
  TensorT<T> y(x.shape);
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < x.data.size(); ++i) {
        y.data[i] = x.data[i] > T{} ? x.data[i] : T{};
      }
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < x.data.size(); ++i) {
        y.data[i] = std::tanh(x.data[i]);
      }
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < x.data.size(); ++i) {
        y.data[i] = static_cast<T>(1) / (static_cast<T>(1) + std::exp(-x.data[i]));
      }
      break;
  }
  return y;
}

// Derivative is evaluated at the stored forward input.
template <class T>
TensorT<T> activation_backward(Activation kind, const TensorT<T>& x, const TensorT<T>& grad_out) {
  require(same_shape(x, grad_out), "activation backward: shape mismatch");
  TensorT<T> gx(x.shape);
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < x.data.size(); ++i) {
        gx.data[i] = x.data[i] > T{} ? grad_out.data[i] : T{};
      }
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < x.data.size(); ++i) {
        const T t = std::tanh(x.data[i]);
        gx.data[i] = grad_out.data[i] * (static_cast<T>(1) - t * t);
      }
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < x.data.size(); ++i) {
        const T s = static_cast<T>(1) / (static_cast<T>(1) + std::exp(-x.data[i]));
        gx.data[i] = grad_out.data[i] * s * (static_cast<T>(1) - s);
      }
      break;
  }
  return gx;
}

// Non-overlapping window max over [batch, c, h, w]; h and w must divide by
// the window. Backward routes each gradient to the first max cell in scan
// order.
template <class T>
TensorT<T> maxpool2d_forward(const TensorT<T>& x, int window) {
  require(x.ndim() == 4, "maxpool2d: input must be [batch, c, h, w]");
  require(window >= 1, "maxpool2d: window must be >= 1");
  require(x.shape[2] % window == 0 && x.shape[3] % window == 0,
          "maxpool2d: spatial dims " + shape_str(x.shape) + " not divisible by window " +
              std::to_string(window));
  const int batch = x.shape[0], c = x.shape[1];
  const int oh = x.shape[2] / window, ow = x.shape[3] / window;
  TensorT<T> y({batch, c, oh, ow});
  for (int b = 0; b < batch; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
          T best = x.at(b, ch, i * window, j * window);
          for (int m = 0; m < window; ++m) {
            for (int n = 0; n < window; ++n) {
              best = std::max(best, x.at(b, ch, i * window + m, j * window + n));
            }
          }
          y.at(b, ch, i, j) = best;
        }
      }
    }
  }
  return y;
}

template <class T>
TensorT<T> maxpool2d_backward(const TensorT<T>& x, int window, const TensorT<T>& grad_out) {
  const int batch = x.shape[0], c = x.shape[1];
  const int oh = x.shape[2] / window, ow = x.shape[3] / window;
  require(grad_out.shape == std::vector<int>({batch, c, oh, ow}),
          "maxpool2d backward: bad grad shape");
  TensorT<T> gx(x.shape);
  for (int b = 0; b < batch; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
          int br = i * window, bs = j * window;
          for (int m = 0; m < window; ++m) {
            for (int n = 0; n < window; ++n) {
              if (x.at(b, ch, i * window + m, j * window + n) > x.at(b, ch, br, bs)) {
                br = i * window + m;
                bs = j * window + n;
              }
            }
          }
          gx.at(b, ch, br, bs) += grad_out.at(b, ch, i, j);
        }
      }
    }
  }
  return gx;
}

template <class T>
TensorT<T> global_avg_pool_forward(const TensorT<T>& x) {
  require(x.ndim() == 4, "global_avg_pool: input must be [batch, c, h, w]");
  const int batch = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  TensorT<T> y({batch, c});
  const T inv = static_cast<T>(1) / static_cast<T>(h * w);
  for (int b = 0; b < batch; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      T acc{};
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          acc += x.at(b, ch, i, j);
        }
      }
      y.at(b, ch) = acc * inv;
    }
  }
  return y;
}

template <class T>
TensorT<T> global_avg_pool_backward(const TensorT<T>& x, const TensorT<T>& grad_out) {
  const int batch = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  require(grad_out.shape == std::vector<int>({batch, c}), "global_avg_pool backward: bad grad");
  TensorT<T> gx(x.shape);
  const T inv = static_cast<T>(1) / static_cast<T>(h * w);
  for (int b = 0; b < batch; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const T g = grad_out.at(b, ch) * inv;
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          gx.at(b, ch, i, j) = g;
        }
      }
    }
  }
  return gx;
}

// Softmax over the last axis with max-subtraction for stability.
template <class T>
TensorT<T> softmax_forward(const TensorT<T>& x) {
  require(x.ndim() >= 1, "softmax: need at least one axis");
  const int c = x.shape.back();
  const std::int64_t rows = x.numel() / c;
  TensorT<T> y(x.shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xi = x.data.data() + r * c;
    T* yi = y.data.data() + r * c;
    T mx = xi[0];
    for (int i = 1; i < c; ++i) {
      mx = std::max(mx, xi[i]);
    }
    T sum{};
    for (int i = 0; i < c; ++i) {
      yi[i] = std::exp(xi[i] - mx);
      sum += yi[i];
    }
    const T inv = static_cast<T>(1) / sum;
    for (int i = 0; i < c; ++i) {
      yi[i] *= inv;
    }
  }
  return y;
}

// Takes the forward OUTPUT y: dx_i = y_i * (g_i - sum_j g_j y_j) per row.
template <class T>
TensorT<T> softmax_backward(const TensorT<T>& y, const TensorT<T>& grad_out) {
  require(same_shape(y, grad_out), "softmax backward: shape mismatch");
  const int c = y.shape.back();
  const std::int64_t rows = y.numel() / c;
  TensorT<T> gx(y.shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* yi = y.data.data() + r * c;
    const T* gi = grad_out.data.data() + r * c;
    T dot{};
    for (int i = 0; i < c; ++i) {
      dot += gi[i] * yi[i];
    }
    T* out = gx.data.data() + r * c;
    for (int i = 0; i < c; ++i) {
      out[i] = yi[i] * (gi[i] - dot);
    }
  }
  return gx;
}

}  // namespace smil
