#pragma once

#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

namespace probdet {

// Dense row-major matrix of doubles. Every learnable block is one of these; the
// last column of a weight block holds the bias.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) {
    assert(r < rows && c < cols);
    return data[r * cols + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    assert(r < rows && c < cols);
    return data[r * cols + c];
  }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

// Affine response of row r to input x, using the trailing bias column.
inline double affine(const Matrix& w, std::size_t r, std::span<const double> x) {
  assert(x.size() + 1 == w.cols);
  const double* p = w.data.data() + r * w.cols;
  double acc = p[x.size()];
  for (std::size_t i = 0; i < x.size(); ++i) acc += p[i] * x[i];
  return acc;
}

// grad(r, :) += scale * [x, 1]
inline void accumulate_outer(Matrix& grad, std::size_t r, double scale, std::span<const double> x) {
  assert(x.size() + 1 == grad.cols);
  if (scale == 0.0) return;
  double* p = grad.data.data() + r * grad.cols;
  for (std::size_t i = 0; i < x.size(); ++i) p[i] += scale * x[i];
  p[x.size()] += scale;
}

}  // namespace probdet
