#pragma once

// Dense row-major matrices plus the kernel set everything else is built on.
// All kernels are single-threaded and accumulate strictly left to right, so
// identical inputs give bitwise-identical outputs within one precision mode.
// The build keeps -ffp-contract=off for the same reason.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "retainkv/common.hpp"

namespace retainkv {

template <typename T>
struct Mat {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<T> data;

  Mat() = default;
  Mat(size_t r, size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}

  T* row(size_t r) { return data.data() + r * cols; }
  const T* row(size_t r) const { return data.data() + r * cols; }

  T& operator()(size_t r, size_t c) { return data[r * cols + c]; }
  T operator()(size_t r, size_t c) const { return data[r * cols + c]; }

  bool finite() const {
    for (T v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

template <typename T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
  if (a.cols != b.rows) throw ShapeError("matmul: inner dimensions disagree");
  Mat<T> out(a.rows, b.cols, T(0));
  // i,k,j order: cache friendly, and per output element still a plain
  // ascending-k accumulation.
  for (size_t i = 0; i < a.rows; ++i) {
    const T* arow = a.row(i);
    T* orow = out.row(i);
    for (size_t k = 0; k < a.cols; ++k) {
      const T aik = arow[k];
      const T* brow = b.row(k);
      for (size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

template <typename T>
Mat<T> transpose(const Mat<T>& a) {
  Mat<T> out(a.cols, a.rows);
  for (size_t i = 0; i < a.rows; ++i)
    for (size_t j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
void add_inplace(Mat<T>& a, const Mat<T>& b) {
  if (a.rows != b.rows || a.cols != b.cols)
    throw ShapeError("add_inplace: shape mismatch");
  for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

template <typename T>
T dot(const T* a, const T* b, size_t n) {
  T s = T(0);
  for (size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// In-place row-wise softmax with max subtraction. Entries may be -inf (they
// get weight zero); a row whose every entry is -inf has no support and throws.
template <typename T>
void softmax_rows(Mat<T>& x) {
  for (size_t i = 0; i < x.rows; ++i) {
    T* r = x.row(i);
    T m = -std::numeric_limits<T>::infinity();
    for (size_t j = 0; j < x.cols; ++j) m = std::max(m, r[j]);
    if (!(m > -std::numeric_limits<T>::infinity()))
      throw ShapeError("softmax_rows: row has empty support");
    T sum = T(0);
    for (size_t j = 0; j < x.cols; ++j) {
      r[j] = std::exp(r[j] - m);
      sum += r[j];
    }
    for (size_t j = 0; j < x.cols; ++j) r[j] /= sum;
  }
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
T silu(T x) {
  return x * sigmoid(x);
}

// d/dx silu(x) = s(x) + x s(x) (1 - s(x))
template <typename T>
T silu_grad(T x) {
  T s = sigmoid(x);
  return s + x * s * (T(1) - s);
}

// y_i = x_i * gain_i / sqrt(mean(x^2) + eps), applied per row
template <typename T>
void rmsnorm_rows(Mat<T>& x, const std::vector<T>& gain, T eps) {
  if (gain.size() != x.cols) throw ShapeError("rmsnorm_rows: gain size");
  for (size_t i = 0; i < x.rows; ++i) {
    T* r = x.row(i);
    T ms = T(0);
    for (size_t j = 0; j < x.cols; ++j) ms += r[j] * r[j];
    ms /= T(x.cols);
    T inv = T(1) / std::sqrt(ms + eps);
    for (size_t j = 0; j < x.cols; ++j) r[j] *= inv * gain[j];
  }
}

// Rotary embedding: pair (x_{2i}, x_{2i+1}) of row r is rotated by angle
// pos[r] * theta_base^(-2i/d). Angles are evaluated in double in both
// precision modes; the rotation itself runs in T.
template <typename T>
void rope_apply(Mat<T>& x, const std::vector<size_t>& pos, double theta_base) {
  if (x.cols % 2 != 0) throw ShapeError("rope_apply: odd width");
  if (pos.size() != x.rows) throw ShapeError("rope_apply: position count");
  const size_t half = x.cols / 2;
  for (size_t r = 0; r < x.rows; ++r) {
    T* row = x.row(r);
    const double p = static_cast<double>(pos[r]);
    for (size_t i = 0; i < half; ++i) {
      const double freq =
          std::pow(theta_base, -2.0 * static_cast<double>(i) /
                                   static_cast<double>(x.cols));
      const double ang = p * freq;
      const T c = static_cast<T>(std::cos(ang));
      const T s = static_cast<T>(std::sin(ang));
      const T x0 = row[2 * i];
      const T x1 = row[2 * i + 1];
      row[2 * i] = x0 * c - x1 * s;
      row[2 * i + 1] = x0 * s + x1 * c;
    }
  }
}

template <typename T>
void rope_apply(Mat<T>& x, size_t start_pos, double theta_base) {
  std::vector<size_t> pos(x.rows);
  std::iota(pos.begin(), pos.end(), start_pos);
  rope_apply(x, pos, theta_base);
}

// Indices of the b largest scores, ascending. Ties keep the larger index
// (the more recent unit): scores [7,7,7] with b=2 select {1,2}. Scores may
// be +inf; NaN is a precondition violation.
template <typename T>
std::vector<size_t> top_b_indices(const std::vector<T>& scores, size_t b) {
  std::vector<size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  if (b < idx.size()) {
    auto better = [&](size_t x, size_t y) {
      if (scores[x] != scores[y]) return scores[x] > scores[y];
      return x > y;
    };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(b),
                     idx.end(), better);
    idx.resize(b);
  }
  std::sort(idx.begin(), idx.end());
  return idx;
}

// First index of the row maximum.
template <typename T>
size_t argmax(const T* v, size_t n) {
  size_t best = 0;
  for (size_t i = 1; i < n; ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// Central finite differences; reference oracle for the analytic gradients.
template <typename F>
std::vector<double> finite_diff_grad(F&& f, std::vector<double> x, double eps) {
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double fp = f(x);
    x[i] = keep - eps;
    const double fm = f(x);
    x[i] = keep;
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

}  // namespace retainkv
