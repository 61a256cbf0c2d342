#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "saq/autodiff.hpp"

namespace saq {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Counter-based sub-seed: depends only on (seed, stream name, counter), so
/// adding new streams never shifts existing ones.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream,
                                    std::uint64_t counter = 0) {
  return mix64(mix64(seed ^ fnv1a(stream)) + counter);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  Scalar uniform(Scalar lo = 0.0, Scalar hi = 1.0) {
    return std::uniform_real_distribution<Scalar>(lo, hi)(engine_);
  }
  Scalar normal(Scalar mean = 0.0, Scalar stddev = 1.0) {
    return std::normal_distribution<Scalar>(mean, stddev)(engine_);
  }
  Index uniform_index(Index n) {
    return std::uniform_int_distribution<Index>(0, n - 1)(engine_);
  }
  bool bernoulli(Scalar p) { return std::bernoulli_distribution(p)(engine_); }

  /// Draw from a probability vector by inverse CDF.
  template <typename Derived>
  Index categorical(const Eigen::MatrixBase<Derived>& probs) {
    const Scalar u = uniform();
    Scalar acc = 0.0;
    const Index n = probs.size();
    for (Index i = 0; i < n; ++i) {
      acc += probs(i);
      if (u < acc) return i;
    }
    for (Index i = n; i-- > 0;) {
      if (probs(i) > 0.0) return i;
    }
    return n - 1;
  }

  Matrix uniform_matrix(Index rows, Index cols, Scalar lo, Scalar hi) {
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(lo, hi);
    return m;
  }
  Matrix normal_matrix(Index rows, Index cols, Scalar stddev = 1.0) {
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal(0.0, stddev);
    return m;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace saq
