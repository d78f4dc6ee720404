#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pullback/errors.hpp"

namespace pullback {

/// Fixed-length vector of doubles used for parameters, gradients and
/// momentum buffers.
///
/// The length is fixed at construction and every entry is finite on
/// construction. Element access is mutable so optimizers can update in
/// place; arithmetic helpers below never change lengths.
class ParamVector {
 public:
  ParamVector() = default;

  /// Zero vector of length n.
  explicit ParamVector(std::size_t n) : values_(n, 0.0) {}

  ParamVector(std::size_t n, double fill) : values_(n, fill) { check_finite(); }

  ParamVector(std::initializer_list<double> init) : values_(init) { check_finite(); }

  explicit ParamVector(std::vector<double> values) : values_(std::move(values)) {
    check_finite();
  }

  static ParamVector zeros(std::size_t n) { return ParamVector(n); }

  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double& operator[](std::size_t i) noexcept { return values_[i]; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }

  std::span<double> span() noexcept { return values_; }
  std::span<const double> span() const noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }

  auto begin() noexcept { return values_.begin(); }
  auto end() noexcept { return values_.end(); }
  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }

  bool all_finite() const noexcept {
    for (double v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  void check_finite() const {
    if (!all_finite()) throw NumericError("ParamVector: non-finite entry");
  }

  std::vector<double> values_;
};

inline void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": length mismatch (" + std::to_string(a) +
                         " vs " + std::to_string(b) + ")");
  }
}

/// Inner product, accumulated sequentially from index 0 upward so the
/// result is bit-reproducible for a given input.
inline double dot(const ParamVector& a, const ParamVector& b) {
  require_same_length(a.size(), b.size(), "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

/// Returns y + alpha * x.
inline ParamVector axpy(double alpha, const ParamVector& x, const ParamVector& y) {
  require_same_length(x.size(), y.size(), "axpy");
  ParamVector out = y;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] += alpha * x[i];
  return out;
}

inline ParamVector scaled(double alpha, const ParamVector& x) {
  ParamVector out = x;
  for (double& v : out) v *= alpha;
  return out;
}

inline ParamVector hadamard(const ParamVector& a, const ParamVector& b) {
  require_same_length(a.size(), b.size(), "hadamard");
  ParamVector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

inline double norm2(const ParamVector& a) { return std::sqrt(dot(a, a)); }

inline double max_abs_diff(const ParamVector& a, const ParamVector& b) {
  require_same_length(a.size(), b.size(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Seeded pseudo-random stream (64-bit Mersenne Twister).
///
/// std::mt19937_64 output is fixed by the standard, but the standard
/// distributions are not; uniform and normal draws are therefore derived
/// here with fixed formulas so sequences match across standard libraries.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  static constexpr const char* algorithm() noexcept { return "mt19937_64"; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (one draw per call, no caching).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform integer in [0, n) by rejection; n > 0.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// Derives an independent child seed (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace pullback
