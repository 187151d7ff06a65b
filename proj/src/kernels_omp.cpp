#include "frommerge/kernels.hpp"

#include <algorithm>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace frommerge::kernels {

namespace {

// Below this many elements the fork/join cost dominates.
constexpr std::ptrdiff_t kParallelThreshold = 1 << 15;

template <class BlockFn>
double blocked_reduce(std::size_t n, BlockFn&& block_sum) {
  const auto nblocks = static_cast<std::ptrdiff_t>((n + kReduceBlock - 1) / kReduceBlock);
  std::vector<double> partial(static_cast<std::size_t>(nblocks), 0.0);
#pragma omp parallel for schedule(static) if (static_cast<std::ptrdiff_t>(n) > kParallelThreshold)
  for (std::ptrdiff_t b = 0; b < nblocks; ++b) {
    const std::size_t lo = static_cast<std::size_t>(b) * kReduceBlock;
    const std::size_t hi = std::min(n, lo + kReduceBlock);
    partial[static_cast<std::size_t>(b)] = block_sum(lo, hi);
  }
  double acc = 0.0;
  for (double p : partial) acc += p;
  return acc;
}

}  // namespace

namespace omp {

double sum_squares(std::span<const double> x) {
  return blocked_reduce(x.size(), [&](std::size_t lo, std::size_t hi) {
    double acc = 0.0;
    for (std::size_t i = lo; i < hi; ++i) acc += x[i] * x[i];
    return acc;
  });
}

double dot(std::span<const double> x, std::span<const double> y) {
  return blocked_reduce(x.size(), [&](std::size_t lo, std::size_t hi) {
    double acc = 0.0;
    for (std::size_t i = lo; i < hi; ++i) acc += x[i] * y[i];
    return acc;
  });
}

void weighted_sum(std::span<const double> coeffs, std::span<const std::span<const double>> inputs,
                  std::span<double> out) {
  const auto n = static_cast<std::ptrdiff_t>(out.size());
  const std::size_t terms = inputs.size();
#pragma omp parallel for schedule(static) if (n * static_cast<std::ptrdiff_t>(terms) > kParallelThreshold)
  for (std::ptrdiff_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < terms; ++i) acc += coeffs[i] * inputs[i][static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(j)] = acc;
  }
}

void axpy(double a, std::span<const double> x, std::span<double> y) {
  const auto n = static_cast<std::ptrdiff_t>(y.size());
#pragma omp parallel for schedule(static) if (n > kParallelThreshold)
  for (std::ptrdiff_t i = 0; i < n; ++i) y[static_cast<std::size_t>(i)] += a * x[static_cast<std::size_t>(i)];
}

void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
          std::span<const double> b, std::span<double> c) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
  const auto work = static_cast<std::ptrdiff_t>(m * n * k);
#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* crow = c.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

}  // namespace omp

void set_num_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace frommerge::kernels
