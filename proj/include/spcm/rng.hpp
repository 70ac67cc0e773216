#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "spcm/common.hpp"

namespace spcm {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_str(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Stream key for per-entity substreams: hash(seed, id...) with order sensitivity.
inline std::uint64_t stream_key(std::uint64_t seed, const std::string& a) {
  return splitmix64(seed ^ splitmix64(hash_str(a)));
}
inline std::uint64_t stream_key(std::uint64_t seed, const std::string& a, const std::string& b) {
  return splitmix64(stream_key(seed, a) ^ splitmix64(hash_str(b) + 0x9e3779b97f4a7c15ULL));
}

// mt19937_64 with hand-rolled transforms; std::*_distribution sequences are
// implementation-defined, these are not.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : g_(seed) {}

  std::uint64_t bits() { return g_(); }

  // [0,1)
  double uniform() { return double(g_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0,n)
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw Error("uniform_int: empty range");
    const std::uint64_t limit = ~std::uint64_t(0) - (~std::uint64_t(0) % n);
    std::uint64_t v;
    do {
      v = g_();
    } while (v >= limit);
    return v % n;
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = uniform(-1.0, 1.0);
      v = uniform(-1.0, 1.0);
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double k = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * k;
    have_spare_ = true;
    return u * k;
  }

  std::size_t categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) {
      if (w < 0.0 || !std::isfinite(w)) throw Error("categorical: bad weight");
      total += w;
    }
    if (!(total > 0.0)) throw Error("categorical: zero mass");
    double r = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      r -= weights[i];
      if (r < 0.0) return i;
    }
    return weights.size() - 1;
  }

 private:
  std::mt19937_64 g_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace spcm
