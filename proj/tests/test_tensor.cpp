#include <doctest.h>

#include <cmath>
#include <numeric>

#include "frommerge/errors.hpp"
#include "frommerge/linalg.hpp"
#include "frommerge/rng.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace frommerge;
using frommerge::testing::random_matrix;

namespace {

struct PenroseResiduals {
  double mxm, xmx, mx_sym, xm_sym;
};

PenroseResiduals penrose(const Tensor2D& m, const Tensor2D& x) {
  const Tensor2D mx = matmul(m, x);
  const Tensor2D xm = matmul(x, m);
  return {std::sqrt(frobenius_distance_squared(matmul(mx, m), m)) / std::max(1.0, frobenius_norm(m)),
          std::sqrt(frobenius_distance_squared(matmul(xm, x), x)) / std::max(1.0, frobenius_norm(x)),
          std::sqrt(frobenius_distance_squared(transpose(mx), mx)),
          std::sqrt(frobenius_distance_squared(transpose(xm), xm))};
}

}  // namespace

TEST_SUITE("tensor-core") {

TEST_CASE("frobenius_norm examples") {
  CHECK(frobenius_norm(Tensor2D(2, 2)) == 0.0);
  CHECK(frobenius_norm(Tensor2D{{3, 4}}) == doctest::Approx(5.0).epsilon(1e-15));
  for (std::size_t n : {1u, 4u, 9u, 17u}) CHECK(frobenius_norm(Tensor2D::identity(n)) == doctest::Approx(std::sqrt(n)));
}

TEST_CASE("frobenius_norm is absolutely homogeneous") {
  std::mt19937_64 gen(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_matrix(1 + trial % 7, 1 + trial % 5, gen);
    const double c = testing::uniform_real(gen, -10, 10);
    const double lhs = frobenius_norm(scale(m, c));
    const double rhs = std::abs(c) * frobenius_norm(m);
    CHECK(std::abs(lhs - rhs) <= 1e-12 * std::max(1e-300, rhs));
  }
}

TEST_CASE("matmul examples") {
  const Tensor2D m{{1, 2, 3}, {4, 5, 6}};
  CHECK(matmul(Tensor2D::identity(2), m) == m);
  CHECK(matmul(Tensor2D{{1, 2}}, Tensor2D{{3}, {4}}) == Tensor2D{{11}});
  CHECK(matmul(Tensor2D(3, 2), m) == Tensor2D(3, 3));
}

TEST_CASE("matmul agrees with a naive triple loop") {
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_matrix(testing::uniform_size(gen, 1, 30), testing::uniform_size(gen, 1, 30), gen);
    const auto b = random_matrix(a.cols(), testing::uniform_size(gen, 1, 30), gen);
    CHECK(testing::max_abs_diff(matmul(a, b), oracle::naive_matmul(a, b)) < 1e-12);
  }
}

TEST_CASE("matmul shape error names both operands") {
  try {
    (void)matmul(Tensor2D(2, 3), Tensor2D(2, 3));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("by 2x3") != std::string::npos);
  }
}

TEST_CASE("transpose examples") {
  const Tensor2D row{{1, 2, 3}};
  const auto col = transpose(row);
  CHECK(col.rows() == 3);
  CHECK(col.cols() == 1);
  const Tensor2D sym{{1, 2}, {2, 5}};
  CHECK(transpose(sym) == sym);
  CHECK(transpose(Tensor2D{{1, 2}, {3, 4}}) == Tensor2D{{1, 3}, {2, 4}});
  const auto r = random_matrix(7, 4, 3);
  CHECK(transpose(transpose(r)) == r);
}

TEST_CASE("pinv examples") {
  CHECK(testing::max_abs_diff(pinv(Tensor2D{{2, 0}, {0, 4}}), Tensor2D{{0.5, 0}, {0, 0.25}}) < 1e-15);
  const auto z = pinv(Tensor2D(3, 5));
  CHECK(z.rows() == 5);
  CHECK(z.cols() == 3);
  CHECK(frobenius_norm(z) == 0.0);

  const Tensor2D d{{2, 0}, {0, 0}};
  const auto p = pinv(d);
  CHECK(testing::max_abs_diff(p, Tensor2D{{0.5, 0}, {0, 0}}) < 1e-15);
  const auto res = penrose(d, p);
  CHECK(res.mxm <= 1e-9);
  CHECK(res.xmx <= 1e-9);
  CHECK(res.mx_sym <= 1e-9);
  CHECK(res.xm_sym <= 1e-9);
}

TEST_CASE("pinv satisfies the Penrose conditions on random and rank-deficient matrices") {
  std::mt19937_64 gen(2024);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t rows = testing::uniform_size(gen, 1, 64);
    const std::size_t cols = testing::uniform_size(gen, 1, 64);
    Tensor2D m = trial % 2 == 0
                     ? random_matrix(rows, cols, gen)
                     : testing::random_low_rank(rows, cols, testing::uniform_size(gen, 1, std::min(rows, cols)), gen);
    const auto x = pinv(m);
    const auto res = penrose(m, x);
    CHECK(res.mxm <= 1e-9);
    CHECK(res.xmx <= 1e-9);
    CHECK(res.mx_sym <= 1e-9);
    CHECK(res.xm_sym <= 1e-9);
  }
}

TEST_CASE("pinv rejects rcond outside (0, 1)") {
  CHECK_THROWS_AS(pinv(Tensor2D::identity(2), 0.0), ValidationError);
  CHECK_THROWS_AS(pinv(Tensor2D::identity(2), 1.5), ValidationError);
}

TEST_CASE("pinv of a non-finite matrix is a numeric error") {
  Tensor2D m = Tensor2D::identity(2);
  m(0, 1) = std::nan("");
  CHECK_THROWS_AS(pinv(m), NumericError);
}

TEST_CASE("svd examples") {
  const auto d = svd(Tensor2D{{3, 0}, {0, 1}});
  REQUIRE(d.s.size() == 2);
  CHECK(d.s[0] == doctest::Approx(3.0));
  CHECK(d.s[1] == doctest::Approx(1.0));

  const Tensor2D u{{1}, {2}, {2}};   // |u| = 3
  const Tensor2D v{{3, 4}};          // |v| = 5
  const auto r1 = svd(matmul(u, v));
  CHECK(r1.s[0] == doctest::Approx(15.0).epsilon(1e-13));
  CHECK(r1.s[1] <= 1e-13);
}

TEST_CASE("svd reconstructs and has orthonormal factors") {
  std::mt19937_64 gen(77);
  for (int trial = 0; trial < 30; ++trial) {
    const auto m = trial == 0 ? random_matrix(5, 3, gen)
                              : random_matrix(testing::uniform_size(gen, 1, 40), testing::uniform_size(gen, 1, 40), gen);
    const auto r = svd(m);
    CHECK(std::is_sorted(r.s.rbegin(), r.s.rend()));
    for (double s : r.s) CHECK(s >= 0.0);
    const auto rec = matmul(matmul(r.u, Tensor2D::diagonal(r.s)), r.vt);
    CHECK(testing::relative_error(rec, m) <= 1e-10);
    const std::size_t p = r.s.size();
    CHECK(testing::max_abs_diff(matmul(transpose(r.u), r.u), Tensor2D::identity(p)) <= 1e-10);
    CHECK(testing::max_abs_diff(matmul(r.vt, transpose(r.vt)), Tensor2D::identity(p)) <= 1e-10);
  }
}

TEST_CASE("truncated svd keeps the top singular directions") {
  const Tensor2D m{{5, 0, 0}, {0, 2, 0}, {0, 0, 1}};
  const auto t = truncated_svd(m, 1);
  CHECK(t.tail_energy == doctest::Approx(5.0));
  CHECK(testing::max_abs_diff(t.approximation, Tensor2D{{5, 0, 0}, {0, 0, 0}, {0, 0, 0}}) < 1e-14);
}

TEST_CASE("axpy_scale examples") {
  const Tensor2D m{{1, -2}, {3.5, 4}};
  const ScaledTerm one[] = {{1.0, &m}};
  CHECK(axpy_scale(one) == m);
  const ScaledTerm halves[] = {{0.5, &m}, {0.5, &m}};
  CHECK(axpy_scale(halves) == m);
  const Tensor2D a{{1}}, b{{-3}};
  const ScaledTerm mixed[] = {{3.0, &a}, {1.0, &b}};
  CHECK(axpy_scale(mixed) == Tensor2D{{0}});
}

TEST_CASE("axpy_scale errors") {
  const Tensor2D a(2, 2), b(2, 3);
  const ScaledTerm bad[] = {{1.0, &a}, {1.0, &b}};
  CHECK_THROWS_AS(axpy_scale(bad), ShapeError);
  CHECK_THROWS_AS(axpy_scale(std::span<const ScaledTerm>{}), ValidationError);
}

TEST_CASE("seeded_normal is deterministic and stream separated") {
  const auto a = seeded_normal(8, 9, 0.5, 42, "layer.0");
  const auto b = seeded_normal(8, 9, 0.5, 42, "layer.0");
  CHECK(a == b);
  const auto c = seeded_normal(8, 9, 0.5, 42, "layer.1");
  CHECK(a != c);
  CHECK(a != seeded_normal(8, 9, 0.5, 43, "layer.0"));
}

TEST_CASE("seeded_normal sample moments") {
  const auto m = seeded_normal(100, 100, 1.0, 0, "moments");
  const auto d = m.data();
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
  double var = 0.0;
  for (double v : d) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(d.size() - 1));
  CHECK(std::abs(mean) <= 0.05);
  CHECK(std::abs(sd - 1.0) <= 0.05);
}

TEST_CASE("seeded_normal rejects non-positive sigma") {
  CHECK_THROWS_AS(seeded_normal(2, 2, 0.0, 1, "x"), ValidationError);
}

}  // TEST_SUITE
