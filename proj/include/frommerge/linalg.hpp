#pragma once

#include <span>
#include <utility>
#include <vector>

#include "frommerge/tensor.hpp"

namespace frommerge {

inline constexpr double kDefaultRcond = 1e-10;

double frobenius_norm(const Tensor2D& m);
double squared_norm(const Tensor2D& m);
double frobenius_distance_squared(const Tensor2D& a, const Tensor2D& b);

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b);
Tensor2D transpose(const Tensor2D& m);

Tensor2D add(const Tensor2D& a, const Tensor2D& b);
Tensor2D subtract(const Tensor2D& a, const Tensor2D& b);
Tensor2D scale(const Tensor2D& m, double c);

struct ScaledTerm {
  double coefficient;
  const Tensor2D* matrix;
};

// Σ cᵢ·mᵢ elementwise. All terms must share a shape; the list must be nonempty.
Tensor2D axpy_scale(std::span<const ScaledTerm> terms);
Tensor2D axpy_scale(std::span<const double> coefficients, std::span<const Tensor2D> matrices);

struct SvdResult {
  Tensor2D u;              // rows x p, orthonormal columns
  std::vector<double> s;   // p singular values, descending
  Tensor2D vt;             // p x cols, orthonormal rows
};

// Thin SVD with p = min(rows, cols).
SvdResult svd(const Tensor2D& m);

// Moore-Penrose pseudoinverse; singular values <= rcond * σ_max are dropped.
Tensor2D pinv(const Tensor2D& m, double rcond = kDefaultRcond);

// Best rank-r approximation (Eckart-Young) together with the discarded energy Σ_{j>r} σⱼ².
struct TruncatedSvd {
  Tensor2D approximation;
  double tail_energy = 0.0;
  std::vector<double> singular_values;
};
TruncatedSvd truncated_svd(const Tensor2D& m, std::size_t rank);

bool all_finite(const Tensor2D& m);

}  // namespace frommerge
