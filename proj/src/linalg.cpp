#include "frommerge/linalg.hpp"

#include <Eigen/SVD>
#include <cmath>
#include <limits>

#include "frommerge/errors.hpp"
#include "frommerge/kernels.hpp"

namespace frommerge {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMajor> as_eigen(const Tensor2D& m) {
  return {m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

Tensor2D from_eigen(const RowMajor& m) {
  Tensor2D out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  std::copy(m.data(), m.data() + m.size(), out.data().begin());
  return out;
}

// Jacobi is the accurate choice for the small matrices the Penrose checks cover;
// divide-and-conquer keeps larger oracle SVDs tractable.
constexpr Eigen::Index kJacobiLimit = 128;

template <class Fn>
auto with_svd(const Tensor2D& m, Fn&& fn) {
  if (!all_finite(m)) {
    throw NumericError("svd: non-finite input of shape " + m.shape_string());
  }
  const RowMajor dense = as_eigen(m);
  constexpr unsigned opts = Eigen::ComputeThinU | Eigen::ComputeThinV;
  if (std::min(dense.rows(), dense.cols()) <= kJacobiLimit) {
    Eigen::JacobiSVD<Eigen::MatrixXd> solver(dense, opts);
    return fn(solver);
  }
  Eigen::BDCSVD<Eigen::MatrixXd> solver(dense, opts);
  return fn(solver);
}

template <class Solver>
void check_converged(const Solver& solver, const Tensor2D& m) {
  const auto& s = solver.singularValues();
  bool ok = solver.info() == Eigen::Success && s.allFinite() && solver.matrixU().allFinite() &&
            solver.matrixV().allFinite();
  if (!ok) {
    double cond = std::numeric_limits<double>::infinity();
    if (s.size() > 0 && s(s.size() - 1) > 0) cond = s(0) / s(s.size() - 1);
    throw NumericError("svd did not converge for matrix of shape " + m.shape_string() +
                       " (condition estimate " + std::to_string(cond) + ")");
  }
}

}  // namespace

bool all_finite(const Tensor2D& m) {
  for (double v : m.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double squared_norm(const Tensor2D& m) { return kernels::omp::sum_squares(m.data()); }

double frobenius_norm(const Tensor2D& m) { return std::sqrt(squared_norm(m)); }

double frobenius_distance_squared(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "frobenius_distance");
  double acc = 0.0;
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    acc += d * d;
  }
  return acc;
}

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + a.shape_string() + " by " + b.shape_string());
  }
  Tensor2D c(a.rows(), b.cols());
  kernels::omp::gemm(a.rows(), b.cols(), a.cols(), a.data(), b.data(), c.data());
  return c;
}

Tensor2D transpose(const Tensor2D& m) {
  Tensor2D t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

Tensor2D add(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "add");
  Tensor2D out = a;
  kernels::omp::axpy(1.0, b.data(), out.data());
  return out;
}

Tensor2D subtract(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "subtract");
  Tensor2D out = a;
  kernels::omp::axpy(-1.0, b.data(), out.data());
  return out;
}

Tensor2D scale(const Tensor2D& m, double c) {
  Tensor2D out = m;
  for (double& v : out.data()) v *= c;
  return out;
}

Tensor2D axpy_scale(std::span<const ScaledTerm> terms) {
  if (terms.empty()) throw ValidationError("axpy_scale: empty term list");
  const Tensor2D& first = *terms.front().matrix;
  std::vector<double> coeffs;
  std::vector<std::span<const double>> inputs;
  coeffs.reserve(terms.size());
  inputs.reserve(terms.size());
  for (const auto& t : terms) {
    require_same_shape(first, *t.matrix, "axpy_scale");
    coeffs.push_back(t.coefficient);
    inputs.push_back(t.matrix->data());
  }
  Tensor2D out(first.rows(), first.cols());
  kernels::omp::weighted_sum(coeffs, inputs, out.data());
  return out;
}

Tensor2D axpy_scale(std::span<const double> coefficients, std::span<const Tensor2D> matrices) {
  if (coefficients.size() != matrices.size()) {
    throw ValidationError("axpy_scale: " + std::to_string(coefficients.size()) + " coefficients for " +
                          std::to_string(matrices.size()) + " matrices");
  }
  std::vector<ScaledTerm> terms;
  terms.reserve(matrices.size());
  for (std::size_t i = 0; i < matrices.size(); ++i) terms.push_back({coefficients[i], &matrices[i]});
  return axpy_scale(terms);
}

SvdResult svd(const Tensor2D& m) {
  return with_svd(m, [&](const auto& solver) {
    check_converged(solver, m);
    SvdResult r;
    r.u = from_eigen(solver.matrixU());
    r.vt = from_eigen(solver.matrixV().transpose());
    const auto& s = solver.singularValues();
    r.s.assign(s.data(), s.data() + s.size());
    return r;
  });
}

Tensor2D pinv(const Tensor2D& m, double rcond) {
  if (!(rcond > 0.0 && rcond < 1.0)) {
    throw ValidationError("pinv: rcond must lie in (0, 1), got " + std::to_string(rcond));
  }
  return with_svd(m, [&](const auto& solver) {
    check_converged(solver, m);
    const auto& s = solver.singularValues();
    const double cutoff = s.size() > 0 ? rcond * s(0) : 0.0;
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(s.size());
    for (Eigen::Index j = 0; j < s.size(); ++j) {
      if (s(j) > cutoff) inv(j) = 1.0 / s(j);
    }
    const RowMajor p = solver.matrixV() * inv.asDiagonal() * solver.matrixU().transpose();
    Tensor2D out = from_eigen(p);
    if (!all_finite(out)) throw NumericError("pinv: non-finite result for shape " + m.shape_string());
    return out;
  });
}

TruncatedSvd truncated_svd(const Tensor2D& m, std::size_t rank) {
  return with_svd(m, [&](const auto& solver) {
    check_converged(solver, m);
    const auto& s = solver.singularValues();
    const auto keep = std::min<Eigen::Index>(static_cast<Eigen::Index>(rank), s.size());
    TruncatedSvd out;
    out.singular_values.assign(s.data(), s.data() + s.size());
    for (Eigen::Index j = keep; j < s.size(); ++j) out.tail_energy += s(j) * s(j);
    const RowMajor approx = solver.matrixU().leftCols(keep) * s.head(keep).asDiagonal() *
                            solver.matrixV().leftCols(keep).transpose();
    out.approximation = from_eigen(approx);
    return out;
  });
}

}  // namespace frommerge
