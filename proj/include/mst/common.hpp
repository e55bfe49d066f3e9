/// @file common.hpp
/// @brief Shared primitives: the MISSING marker, planar points and seed derivation.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>
#include <string_view>

namespace mst {

  /// Sentinel stored in dense series for "no vehicle contributed".
  inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

  [[nodiscard]] inline bool isMissing(double v) noexcept { return std::isnan(v); }
  [[nodiscard]] inline bool isMissing(float v) noexcept { return std::isnan(v); }

  [[nodiscard]] inline double orMissing(std::optional<double> v) noexcept {
    return v ? *v : kMissing;
  }

  struct Point2 {
    double x{0.0};
    double y{0.0};
    friend bool operator==(Point2 const&, Point2 const&) = default;
  };

  [[nodiscard]] inline double squaredDistance(Point2 a, Point2 b) noexcept {
    auto const dx{a.x - b.x};
    auto const dy{a.y - b.y};
    return dx * dx + dy * dy;
  }

  using Rng = std::mt19937_64;

  /// SplitMix64 finalizer; used to derive independent child seeds.
  [[nodiscard]] constexpr std::uint64_t mixSeed(std::uint64_t z) noexcept {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  [[nodiscard]] constexpr std::uint64_t deriveSeed(std::uint64_t parent,
                                                   std::uint64_t stream) noexcept {
    return mixSeed(mixSeed(parent) ^ (stream * 0xd1342543de82ef95ULL + 1));
  }

  /// FNV-1a, for deriving seeds from names.
  [[nodiscard]] constexpr std::uint64_t hashName(std::string_view s) noexcept {
    std::uint64_t h{0xcbf29ce484222325ULL};
    for (char c : s) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  /// Uniform double in [0, 1) built from the raw 64-bit stream; identical on every platform,
  /// unlike std::uniform_real_distribution.
  [[nodiscard]] inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
  }

  [[nodiscard]] inline double uniform(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform01(rng);
  }

  /// Uniform integer in [0, n).
  [[nodiscard]] inline std::size_t uniformIndex(Rng& rng, std::size_t n) {
    return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
  }

  /// Standard normal by Box-Muller (portable, unlike std::normal_distribution).
  [[nodiscard]] inline double standardNormal(Rng& rng) {
    double u1{uniform01(rng)};
    while (u1 <= 0.0) {
      u1 = uniform01(rng);
    }
    auto const u2{uniform01(rng)};
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// Row-major [rows x cols] block of values, MISSING allowed.
  struct SeriesMatrix {
    std::size_t rows{0};
    std::size_t cols{0};
    std::vector<double> values;

    SeriesMatrix() = default;
    SeriesMatrix(std::size_t r, std::size_t c, double fill = kMissing)
        : rows{r}, cols{c}, values(r * c, fill) {}

    [[nodiscard]] double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    [[nodiscard]] double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    [[nodiscard]] std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }
    [[nodiscard]] std::span<double const> row(std::size_t r) const {
      return {values.data() + r * cols, cols};
    }
    /// Columns [c0, c0 + n) of every row.
    [[nodiscard]] SeriesMatrix columns(std::size_t c0, std::size_t n) const {
      if (c0 + n > cols) {
        throw std::out_of_range("column window exceeds the series");
      }
      SeriesMatrix out{rows, n};
      for (std::size_t r{0}; r < rows; ++r) {
        for (std::size_t c{0}; c < n; ++c) {
          out(r, c) = (*this)(r, c0 + c);
        }
      }
      return out;
    }
  };

}  // namespace mst
