#pragma once

// Shared helpers for the unit and acceptance suites. Random test data comes from
// std::mt19937_64 so it is independent of the library's own generator.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "frommerge/linalg.hpp"
#include "frommerge/tensor.hpp"

namespace frommerge::testing {

inline Tensor2D random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& gen, double sigma = 1.0) {
  std::normal_distribution<double> dist(0.0, sigma);
  Tensor2D m(rows, cols);
  for (double& v : m.data()) v = dist(gen);
  return m;
}

inline Tensor2D random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double sigma = 1.0) {
  std::mt19937_64 gen(seed);
  return random_matrix(rows, cols, gen, sigma);
}

// Product of thin random factors: rank <= r.
inline Tensor2D random_low_rank(std::size_t rows, std::size_t cols, std::size_t r, std::mt19937_64& gen) {
  return matmul(random_matrix(rows, r, gen), random_matrix(r, cols, gen));
}

inline std::size_t uniform_size(std::mt19937_64& gen, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(gen);
}

inline double uniform_real(std::mt19937_64& gen, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(gen);
}

inline double max_abs_diff(const Tensor2D& a, const Tensor2D& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline double relative_error(const Tensor2D& got, const Tensor2D& want) {
  return std::sqrt(frobenius_distance_squared(got, want)) / std::max(1e-300, frobenius_norm(want));
}

}  // namespace frommerge::testing
