#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace smil {

inline void require(bool cond, const std::string& msg) {
  if (!cond) {
    throw std::invalid_argument(msg);
  }
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "," : "") << shape[i];
  }
  os << "]";
  return os.str();
}

// Dense n-dimensional array, row-major. Float for training, double for the
// finite-difference suites; everything numeric is templated on the scalar.
template <class T>
struct TensorT {
  std::vector<int> shape;
  std::vector<T> data;

  TensorT() = default;

  explicit TensorT(std::vector<int> shape_in, T fill_value = T{}) : shape(std::move(shape_in)) {
    std::int64_t n = 1;
    for (int e : shape) {
      require(e > 0, "tensor extents must be positive, got " + shape_str(shape));
      n *= e;
    }
    data.assign(static_cast<std::size_t>(n), fill_value);
  }

  static TensorT from(std::vector<int> shape_in, std::vector<T> data_in) {
    TensorT t(std::move(shape_in));
    require(t.data.size() == data_in.size(), "tensor data length does not match shape");
    t.data = std::move(data_in);
    return t;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  bool empty() const { return data.empty(); }

  int extent(int axis) const { return shape[static_cast<std::size_t>(axis)]; }

  T& at(int i) { return data[static_cast<std::size_t>(i)]; }
  const T& at(int i) const { return data[static_cast<std::size_t>(i)]; }

  T& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  const T& at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }

  T& at(int i, int j, int k) {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  const T& at(int i, int j, int k) const {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }

  T& at(int i, int j, int k, int l) {
    return data[((static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  const T& at(int i, int j, int k, int l) const {
    return data[((static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
  void zero() { fill(T{}); }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

template <class T>
bool same_shape(const TensorT<T>& a, const TensorT<T>& b) {
  return a.shape == b.shape;
}

template <class U, class T>
TensorT<U> tensor_cast(const TensorT<T>& t) {
  TensorT<U> out(t.shape);
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    out.data[i] = static_cast<U>(t.data[i]);
  }
  return out;
}

template <class T>
bool all_finite(const TensorT<T>& t) {
  for (T v : t.data) {
    if (!std::isfinite(static_cast<double>(v))) {
      return false;
    }
  }
  return true;
}

// A named view of one parameter tensor paired with its gradient buffer.
// Layers hand these out so the optimizer and checkpoint writer can walk a
// model without knowing its structure.
template <class T>
struct ParamRefT {
  std::string name;
  TensorT<T>* value = nullptr;
  TensorT<T>* grad = nullptr;
};

using ParamRef = ParamRefT<float>;

}  // namespace smil
