#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace psec {

// Dense row-major matrix of doubles. Vectors are n x 1 matrices where a
// shape matters; free-standing std::vector<double> is used for activations.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::size_t size() const { return data.size(); }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  void fill(double v) { data.assign(data.size(), v); }

  bool all_finite() const {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

inline void check_shape(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("shape mismatch: " + what);
}

// y = M x
inline std::vector<double> matvec(const Matrix& m, const std::vector<double>& x) {
  check_shape(m.cols == x.size(), "matvec " + std::to_string(m.rows) + "x" +
                                      std::to_string(m.cols) + " * vec" +
                                      std::to_string(x.size()));
  std::vector<double> y(m.rows, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    double acc = 0.0;
    const double* row = m.data.data() + i * m.cols;
    for (std::size_t j = 0; j < m.cols; ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
  return y;
}

// y = M^T x
inline std::vector<double> matvec_t(const Matrix& m, const std::vector<double>& x) {
  check_shape(m.rows == x.size(), "matvec_t");
  std::vector<double> y(m.cols, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double* row = m.data.data() + i * m.cols;
    for (std::size_t j = 0; j < m.cols; ++j) y[j] += row[j] * x[i];
  }
  return y;
}

// out += scale * a b^T
inline void add_outer(Matrix& out, const std::vector<double>& a,
                      const std::vector<double>& b, double scale = 1.0) {
  check_shape(out.rows == a.size() && out.cols == b.size(), "add_outer");
  for (std::size_t i = 0; i < out.rows; ++i) {
    double* row = out.data.data() + i * out.cols;
    const double ai = scale * a[i];
    for (std::size_t j = 0; j < out.cols; ++j) row[j] += ai * b[j];
  }
}

// C = A B
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  check_shape(a.cols == b.rows, "matmul");
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.data.data() + k * b.cols;
      double* crow = c.data.data() + i * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  check_shape(a.size() == b.size(), "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline void axpy(std::vector<double>& y, double alpha, const std::vector<double>& x) {
  check_shape(y.size() == x.size(), "axpy");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

}  // namespace psec
