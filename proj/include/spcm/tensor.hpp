#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "spcm/common.hpp"

namespace spcm {

constexpr std::size_t kMaxRank = 5;

// Dense row-major f64 tensor. Compute precision is always f64; the container
// layer narrows to f32 on disk.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    validate_shape(shape);
    data.assign(count(shape), 0.0);
  }
  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    validate_shape(shape);
    if (data.size() != count(shape))
      throw ShapeError(strf("tensor data size %zu does not match shape count %zu",
                            data.size(), count(shape)));
  }

  static std::size_t count(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
  }

  static void validate_shape(const std::vector<std::size_t>& s) {
    if (s.empty() || s.size() > kMaxRank)
      throw ShapeError(strf("rank %zu outside supported range 1..%zu", s.size(), kMaxRank));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] == 0) throw ShapeError(strf("axis %zu has zero extent", i));
  }

  static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<std::size_t> s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  // Row-major index helpers for the common ranks.
  double& at2(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at2(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
  double& at3(std::size_t c, std::size_t y, std::size_t x) {
    return data[(c * shape[1] + y) * shape[2] + x];
  }
  double at3(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * shape[1] + y) * shape[2] + x];
  }
  double& at4(std::size_t a, std::size_t b, std::size_t y, std::size_t x) {
    return data[((a * shape[1] + b) * shape[2] + y) * shape[3] + x];
  }
  double at4(std::size_t a, std::size_t b, std::size_t y, std::size_t x) const {
    return data[((a * shape[1] + b) * shape[2] + y) * shape[3] + x];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  double sum() const { return std::accumulate(data.begin(), data.end(), 0.0); }
  double max() const { return *std::max_element(data.begin(), data.end()); }
  double min() const { return *std::min_element(data.begin(), data.end()); }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
  void check_finite(const char* what) const {
    for (std::size_t i = 0; i < data.size(); ++i)
      if (!std::isfinite(data[i]))
        throw Error(strf("%s: non-finite value at flat index %zu", what, i));
  }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape.size() != b.shape.size())
    throw ShapeError(strf("%s: rank mismatch %zu vs %zu", op, a.shape.size(), b.shape.size()));
  for (std::size_t i = 0; i < a.shape.size(); ++i)
    if (a.shape[i] != b.shape[i])
      throw ShapeError(strf("%s: axis %zu mismatch %zu vs %zu", op, i, a.shape[i], b.shape[i]));
}

// Box-filter resample on the trailing two axes of a [1,H,W] map. Each output
// cell averages the exact fractional overlap with input cells, so a constant
// map stays constant for any size pair.
inline Tensor area_resample(const Tensor& src, std::size_t oh, std::size_t ow) {
  if (src.rank() != 3 || src.shape[0] != 1)
    throw ShapeError(strf("area_resample: want [1,H,W], got rank %zu", src.rank()));
  const std::size_t ih = src.shape[1], iw = src.shape[2];
  if (oh == 0 || ow == 0) throw ShapeError("area_resample: zero output extent");
  if (ih == oh && iw == ow) return src;
  Tensor out({1, oh, ow});
  const double sy = double(ih) / double(oh), sx = double(iw) / double(ow);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    const double y0 = oy * sy, y1 = (oy + 1) * sy;
    const std::size_t iy0 = std::size_t(y0);
    const std::size_t iy1 = std::min(ih, std::size_t(std::ceil(y1)));
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const double x0 = ox * sx, x1 = (ox + 1) * sx;
      const std::size_t ix0 = std::size_t(x0);
      const std::size_t ix1 = std::min(iw, std::size_t(std::ceil(x1)));
      double acc = 0.0;
      for (std::size_t iy = iy0; iy < iy1; ++iy) {
        const double wy = std::min(y1, double(iy + 1)) - std::max(y0, double(iy));
        for (std::size_t ix = ix0; ix < ix1; ++ix) {
          const double wx = std::min(x1, double(ix + 1)) - std::max(x0, double(ix));
          acc += wy * wx * src.at3(0, iy, ix);
        }
      }
      out.at3(0, oy, ox) = acc / (sy * sx);
    }
  }
  return out;
}

// 2x2 average pool on [1,H,W]; H and W must be even.
inline Tensor avgpool2(const Tensor& src) {
  if (src.rank() != 3 || src.shape[0] != 1)
    throw ShapeError("avgpool2: want [1,H,W]");
  if (src.shape[1] % 2 || src.shape[2] % 2)
    throw ShapeError(strf("avgpool2: odd extents %zux%zu", src.shape[1], src.shape[2]));
  return area_resample(src, src.shape[1] / 2, src.shape[2] / 2);
}

inline Tensor normalize_sum(const Tensor& t) {
  double s = t.sum();
  if (!(s > 0.0)) throw Error("normalize_sum: non-positive mass");
  Tensor out = t;
  for (double& v : out.data) v /= s;
  return out;
}

inline Tensor normalize_peak(const Tensor& t) {
  double m = t.max();
  if (!(m > 0.0)) return t;  // all-zero maps stay zero
  Tensor out = t;
  for (double& v : out.data) v /= m;
  return out;
}

}  // namespace spcm
