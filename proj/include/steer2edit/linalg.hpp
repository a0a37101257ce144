#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace s2e {

using Vec = std::vector<double>;

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

inline Vec matvec(const Matrix& m, const Vec& x) {
  if (m.cols != x.size()) {
    throw std::invalid_argument("matvec dimension mismatch: matrix " + shape_str(m) +
                                " vs vector of length " + std::to_string(x.size()));
  }
  Vec out(m.rows, 0.0);
  for (std::size_t r = 0; r < m.rows; ++r) {
    double acc = 0.0;
    const double* row = m.data.data() + r * m.cols;
    for (std::size_t c = 0; c < m.cols; ++c) acc += row[c] * x[c];
    out[r] = acc;
  }
  return out;
}

// m^T x, without materializing the transpose.
inline Vec matvec_t(const Matrix& m, const Vec& x) {
  if (m.rows != x.size()) {
    throw std::invalid_argument("matvec_t dimension mismatch: matrix " + shape_str(m) +
                                " vs vector of length " + std::to_string(x.size()));
  }
  Vec out(m.cols, 0.0);
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double* row = m.data.data() + r * m.cols;
    const double xr = x[r];
    for (std::size_t c = 0; c < m.cols; ++c) out[c] += row[c] * xr;
  }
  return out;
}

inline Matrix outer(const Vec& u, const Vec& k, double scale) {
  Matrix m(u.size(), k.size());
  for (std::size_t r = 0; r < u.size(); ++r)
    for (std::size_t c = 0; c < k.size(); ++c) m.at(r, c) = scale * u[r] * k[c];
  return m;
}

inline double dot(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("dot dimension mismatch: " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm2(const Vec& a) { return std::sqrt(dot(a, a)); }

inline double frobenius_norm(const Matrix& m) {
  double acc = 0.0;
  for (double x : m.data) acc += x * x;
  return std::sqrt(acc);
}

// Degenerate inputs (either norm zero) return 0 by convention.
inline double cosine(const Vec& a, const Vec& b) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("pearson requires equal-length samples of size >= 2");
  }
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("pearson: degenerate sample");
  return sxy / std::sqrt(sxx * syy);
}

inline Vec rms_norm(const Vec& x, const Vec& gain, double eps) {
  if (x.size() != gain.size()) {
    throw std::invalid_argument("rms_norm length mismatch");
  }
  double ms = 0.0;
  for (double v : x) ms += v * v;
  ms /= static_cast<double>(x.size());
  const double inv = 1.0 / std::sqrt(ms + eps);
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
  return out;
}

inline Vec layer_norm(const Vec& x, const Vec& gain, double eps) {
  if (x.size() != gain.size()) {
    throw std::invalid_argument("layer_norm length mismatch");
  }
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * inv * gain[i];
  return out;
}

inline Vec normalized(const Vec& v) {
  const double n = norm2(v);
  if (n == 0.0) throw std::invalid_argument("cannot normalize zero vector");
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

inline Vec scaled(const Vec& v, double c) {
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * c;
  return out;
}

inline void add_inplace(Vec& a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

inline void add_scaled_inplace(Vec& a, const Vec& b, double c) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += c * b[i];
}

inline Vec sub(const Vec& a, const Vec& b) {
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

}  // namespace s2e
