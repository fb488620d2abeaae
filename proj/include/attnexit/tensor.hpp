#pragma once

// Dense row-major matrices and the small set of reductions every other
// module leans on. Storage is whatever scalar the caller picks (float for
// model tensors); every reduction accumulates in double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "attnexit/error.hpp"

namespace attnexit {

template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(checked_size(rows, cols), fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != checked_size(rows, cols)) {
      fail(ErrorKind::invalid_argument, "matrix data length ", data_.size(),
           " does not match shape ", rows, "x", cols);
    }
  }

  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(checked_size(rows_, cols_));
    for (const auto& r : rows) {
      if (r.size() != cols_) fail(ErrorKind::invalid_argument, "ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Matrix transposed() const {
    Matrix out(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
    return out;
  }

  template <typename U>
  Matrix<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Matrix<U>(rows_, cols_, std::move(out));
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  static std::size_t checked_size(std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) {
      fail(ErrorKind::invalid_argument, "matrix extents must be >= 1, got ", rows, "x", cols);
    }
    return rows * cols;
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using DenseMatrix = Matrix<float>;

inline std::string shape_str(std::size_t r, std::size_t c) {
  return detail::concat(r, "x", c);
}

template <typename T>
std::string shape_str(const Matrix<T>& m) {
  return shape_str(m.rows(), m.cols());
}

// C = A * B
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    fail(ErrorKind::invalid_argument, "matmul shape mismatch: ", shape_str(a), " * ", shape_str(b));
  }
  const std::size_t n = b.cols();
  Matrix<T> c(a.rows(), n);
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const T* brow = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += aik * static_cast<double>(brow[j]);
    }
    T* crow = c.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<T>(acc[j]);
  }
  return c;
}

// C = A * B^T
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) {
    fail(ErrorKind::invalid_argument, "matmul_nt shape mismatch: ", shape_str(a), " * ",
         shape_str(b), "^T");
  }
  Matrix<T> c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* arow = a.data() + i * a.cols();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const T* brow = b.data() + j * b.cols();
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<double>(arow[k]) * brow[k];
      c(i, j) = static_cast<T>(s);
    }
  }
  return c;
}

// C = A^T * B
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows()) {
    fail(ErrorKind::invalid_argument, "matmul_tn shape mismatch: ", shape_str(a), "^T * ",
         shape_str(b));
  }
  const std::size_t m = a.cols();
  const std::size_t n = b.cols();
  std::vector<double> acc(m * n, 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const T* arow = a.data() + r * m;
    const T* brow = b.data() + r * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double ari = arow[i];
      if (ari == 0.0) continue;
      double* out = acc.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += ari * static_cast<double>(brow[j]);
    }
  }
  Matrix<T> c(m, n);
  for (std::size_t i = 0; i < m * n; ++i) c.data()[i] = static_cast<T>(acc[i]);
  return c;
}

template <typename T>
double dot(std::span<const T> x, std::span<const T> y) {
  if (x.size() != y.size()) {
    fail(ErrorKind::invalid_argument, "dot length mismatch: ", x.size(), " vs ", y.size());
  }
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += static_cast<double>(x[i]) * y[i];
  return s;
}

template <typename T>
double mean(std::span<const T> x) {
  if (x.empty()) fail(ErrorKind::invalid_argument, "mean of empty vector");
  // accumulated relative to the first element, so constant input is exact
  const double x0 = static_cast<double>(x[0]);
  double s = 0.0;
  for (T v : x) s += static_cast<double>(v) - x0;
  return x0 + s / static_cast<double>(x.size());
}

template <typename T>
double mean(const std::vector<T>& x) {
  return mean(std::span<const T>(x));
}

// Population variance (divisor n), two-pass.
template <typename T>
double variance(std::span<const T> x) {
  const double m = mean(x);
  double s = 0.0;
  for (T v : x) {
    const double d = static_cast<double>(v) - m;
    s += d * d;
  }
  return s / static_cast<double>(x.size());
}

template <typename T>
double variance(const std::vector<T>& x) {
  return variance(std::span<const T>(x));
}

// Pearson product-moment correlation. Throws ErrorKind::undefined when either
// series is constant.
template <typename T, typename U>
double pearson(std::span<const T> x, std::span<const U> y) {
  if (x.size() != y.size()) {
    fail(ErrorKind::invalid_argument, "pearson length mismatch: ", x.size(), " vs ", y.size());
  }
  if (x.size() < 2) fail(ErrorKind::invalid_argument, "pearson needs at least 2 points");
  const double mx = mean(x);
  const double my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = static_cast<double>(x[i]) - mx;
    const double dy = static_cast<double>(y[i]) - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    fail(ErrorKind::undefined, "correlation undefined: ", sxx == 0.0 ? "x" : "y", " is constant");
  }
  const double r = sxy / std::sqrt(sxx * syy);
  return std::clamp(r, -1.0, 1.0);
}

template <typename T, typename U>
double pearson(const std::vector<T>& x, const std::vector<U>& y) {
  return pearson(std::span<const T>(x), std::span<const U>(y));
}

// Least-squares coefficients minimizing |design * x - target|. Rank-deficient
// systems get the minimum-norm solution (column-pivoted QR followed by a
// complete orthogonal decomposition).
template <typename T, typename U>
std::vector<double> lstsq(const Matrix<T>& design, std::span<const U> target) {
  if (design.rows() != target.size()) {
    fail(ErrorKind::invalid_argument, "lstsq shape mismatch: design ", shape_str(design),
         ", target ", target.size());
  }
  Eigen::MatrixXd a(design.rows(), design.cols());
  for (std::size_t r = 0; r < design.rows(); ++r)
    for (std::size_t c = 0; c < design.cols(); ++c) a(r, c) = design(r, c);
  Eigen::VectorXd b(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) b(i) = target[i];

  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(a);
  cod.setThreshold(1e-10);
  const Eigen::VectorXd x = cod.solve(b);
  return {x.data(), x.data() + x.size()};
}

template <typename T, typename U>
std::vector<double> lstsq(const Matrix<T>& design, const std::vector<U>& target) {
  return lstsq(design, std::span<const U>(target));
}

}  // namespace attnexit
