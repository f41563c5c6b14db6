#pragma once

#include <span>
#include <vector>

#include "sfiqa/error.hpp"

namespace sfiqa::nn {

/// Dense batch x channels x height x width buffer, row-major (NCHW).
template <typename T>
struct Tensor {
  int batch = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> values;

  Tensor() = default;
  Tensor(int b, int c, int h, int w)
      : batch(b), channels(c), height(h), width(w), values(static_cast<std::size_t>(b) * c * h * w, T(0)) {
    require(b >= 1 && c >= 1 && h >= 1 && w >= 1, ErrorKind::kShape, "tensor dims must be >= 1");
  }

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t sample_size() const { return plane() * channels; }
  std::size_t size() const { return values.size(); }

  T& at(int b, int c, int y, int x) {
    return values[((static_cast<std::size_t>(b) * channels + c) * height + y) * width + x];
  }
  T at(int b, int c, int y, int x) const {
    return values[((static_cast<std::size_t>(b) * channels + c) * height + y) * width + x];
  }
  std::span<T> sample(int b) { return {values.data() + b * sample_size(), sample_size()}; }
  std::span<const T> sample(int b) const { return {values.data() + b * sample_size(), sample_size()}; }
  std::span<T> channel(int b, int c) { return {values.data() + (b * channels + c) * plane(), plane()}; }
  std::span<const T> channel(int b, int c) const { return {values.data() + (b * channels + c) * plane(), plane()}; }
};

/// Row-major rows x cols matrix (one row per batch sample).
template <typename T>
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<T> values;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), values(static_cast<std::size_t>(r) * c, T(0)) {}

  T& operator()(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
  T operator()(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
  std::span<T> row(int r) { return {values.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }
  std::span<const T> row(int r) const {
    return {values.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }
};

template <typename To, typename From>
Matrix<To> cast(const Matrix<From>& m) {
  Matrix<To> out(m.rows, m.cols);
  for (std::size_t i = 0; i < m.values.size(); ++i) out.values[i] = static_cast<To>(m.values[i]);
  return out;
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  Tensor<To> out(t.batch, t.channels, t.height, t.width);
  for (std::size_t i = 0; i < t.values.size(); ++i) out.values[i] = static_cast<To>(t.values[i]);
  return out;
}

}  // namespace sfiqa::nn
