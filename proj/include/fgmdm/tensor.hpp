#pragma once

// Dense row-major tensors. Rank 1 and 2 are what the rest of the library
// uses; shape is kept as a vector so flattened motion blocks can carry
// their logical (frames x features) layout around.

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "fgmdm/common.hpp"

namespace fgmdm {

template <typename T>
struct TensorT {
  std::vector<int> shape;
  std::vector<T> data;

  TensorT() = default;

  static TensorT zeros(std::vector<int> shape) {
    TensorT t;
    t.shape = std::move(shape);
    t.data.assign(numel_of(t.shape), T(0));
    return t;
  }

  static TensorT full(std::vector<int> shape, T value) {
    TensorT t;
    t.shape = std::move(shape);
    t.data.assign(numel_of(t.shape), value);
    return t;
  }

  static TensorT from(std::vector<int> shape, std::vector<T> values) {
    if (numel_of(shape) != values.size())
      throw ContractError("tensor: data size does not match shape");
    TensorT t;
    t.shape = std::move(shape);
    t.data = std::move(values);
    return t;
  }

  static std::size_t numel_of(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d < 0) throw ContractError("tensor: negative dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }

  int rows() const {
    if (shape.empty()) throw ContractError("tensor: rank 0 has no rows");
    return shape[0];
  }

  int cols() const {
    if (shape.size() == 1) return 1;
    if (shape.size() == 2) return shape[1];
    throw ContractError("tensor: cols() needs rank <= 2");
  }

  T& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  const T& at(int r, int c) const {
    return data[static_cast<std::size_t>(r) * cols() + c];
  }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
      out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  bool same_shape(const TensorT& other) const { return shape == other.shape; }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

}  // namespace fgmdm
