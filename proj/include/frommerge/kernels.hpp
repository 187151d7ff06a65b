#pragma once

// Data-parallel inner loops. `serial` is the reference implementation kept for
// tests and benchmarks; `omp` is what the library calls. Both produce results
// that do not depend on the number of threads: elementwise kernels write
// disjoint outputs, and reductions use a fixed block decomposition whose
// partial sums are combined in block order.

#include <cstddef>
#include <span>

#include "frommerge/tensor.hpp"

namespace frommerge::kernels {

// Block length for the deterministic reductions.
inline constexpr std::size_t kReduceBlock = 4096;

namespace serial {

double sum_squares(std::span<const double> x);
double dot(std::span<const double> x, std::span<const double> y);
// out = sum_i coeffs[i] * inputs[i]
void weighted_sum(std::span<const double> coeffs, std::span<const std::span<const double>> inputs,
                  std::span<double> out);
// y += a * x
void axpy(double a, std::span<const double> x, std::span<double> y);
// c (m x n) = a (m x k) * b (k x n), row-major
void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
          std::span<const double> b, std::span<double> c);

}  // namespace serial

namespace omp {

double sum_squares(std::span<const double> x);
double dot(std::span<const double> x, std::span<const double> y);
void weighted_sum(std::span<const double> coeffs, std::span<const std::span<const double>> inputs,
                  std::span<double> out);
void axpy(double a, std::span<const double> x, std::span<double> y);
void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
          std::span<const double> b, std::span<double> c);

}  // namespace omp

// Thread control for the OpenMP kernels and the per-layer loops. 0 keeps the runtime default.
void set_num_threads(int n);
int max_threads();

}  // namespace frommerge::kernels
