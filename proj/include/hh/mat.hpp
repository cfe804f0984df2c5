#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace hh {

// Row-major dense matrix. Small helper, not a linear algebra library; the
// attention code only ever needs row views and dot products.
template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T(0)) {}

  T* row(std::size_t r) { return data.data() + r * cols; }
  const T* row(std::size_t r) const { return data.data() + r * cols; }

  std::span<T> row_span(std::size_t r) { return {row(r), cols}; }
  std::span<const T> row_span(std::size_t r) const { return {row(r), cols}; }

  T& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

// Non-owning view of consecutive rows of a row-major buffer.
template <typename T>
struct MatView {
  const T* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;

  MatView() = default;
  MatView(const T* d, std::size_t r, std::size_t c) : data(d), rows(r), cols(c) {}
  MatView(const Matrix<T>& m) : data(m.data.data()), rows(m.rows), cols(m.cols) {}

  const T* row(std::size_t r) const { return data + r * cols; }

  MatView<T> top_rows(std::size_t r) const { return {data, r, cols}; }
};

template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

// y += x * W for row-major W (in x out); y has length W.cols.
template <typename T>
inline void matvec_acc(std::span<const T> x, const Matrix<T>& w, std::span<T> y) {
  if (x.size() != w.rows || y.size() != w.cols)
    throw std::invalid_argument("matvec_acc: shape mismatch");
  for (std::size_t i = 0; i < w.rows; ++i) {
    const T xi = x[i];
    const T* wr = w.row(i);
    for (std::size_t j = 0; j < w.cols; ++j) y[j] += xi * wr[j];
  }
}

template <typename T>
inline std::vector<T> matvec(std::span<const T> x, const Matrix<T>& w) {
  std::vector<T> y(w.cols, T(0));
  matvec_acc(x, w, std::span<T>(y));
  return y;
}

}  // namespace hh
