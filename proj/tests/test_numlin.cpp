#include <gtest/gtest.h>

#include <unsupported/Eigen/MatrixFunctions>

#include <chrono>
#include <cmath>

#include "sgflab/numlin.hpp"
#include "test_util.hpp"

using namespace sgflab;
using testutil::random_matrix;
using testutil::random_spd;
using testutil::random_symmetric;
using testutil::rel_err;

namespace {

// Matrix-valued adaptive Simpson quadrature of t -> e^{-Ht} R e^{-Ht}.
struct IntegralOracle {
  Matrix H, R;
  Matrix f(double t) const {
    const Matrix e = (-H * t).exp();
    return e * R * e;
  }
  Matrix simpson(double a, double b, const Matrix& fa, const Matrix& fm, const Matrix& fb) const {
    return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  }
  Matrix adapt(double a, double b, const Matrix& fa, const Matrix& fm, const Matrix& fb,
               const Matrix& whole, double tol, int depth) const {
    const double m = 0.5 * (a + b);
    const Matrix flm = f(0.5 * (a + m));
    const Matrix frm = f(0.5 * (m + b));
    const Matrix left = simpson(a, m, fa, flm, fm);
    const Matrix right = simpson(m, b, fm, frm, fb);
    const Matrix both = left + right;
    if (depth <= 0 || (both - whole).norm() <= 15.0 * tol) return both + (both - whole) / 15.0;
    return adapt(a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
           adapt(m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
  }
  Matrix integrate(double tmax, double tol) const {
    Matrix total = Matrix::Zero(H.rows(), H.cols());
    double a = 0.0, b = 0.25;
    while (a < tmax) {
      const Matrix fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
      total += adapt(a, b, fa, fm, fb, simpson(a, b, fa, fm, fb), tol, 40);
      a = b;
      b *= 2.0;
    }
    return total;
  }
};

Matrix rank_deficient(Index rows, Index cols, Index rank, std::uint64_t seed) {
  return random_matrix(rows, rank, seed) * random_matrix(rank, cols, seed + 1000);
}

}  // namespace

TEST(Pseudoinverse, IdentityIsItsOwnInverse) {
  EXPECT_TRUE(numlin::pseudoinverse(Matrix::Identity(3, 3)).isApprox(Matrix::Identity(3, 3)));
}

TEST(Pseudoinverse, DiagonalWithZero) {
  Matrix a(2, 2);
  a << 2, 0, 0, 0;
  Matrix expect(2, 2);
  expect << 0.5, 0, 0, 0;
  EXPECT_LT((numlin::pseudoinverse(a) - expect).norm(), 1e-15);
}

TEST(Pseudoinverse, PenroseIdentitiesAcrossRankProfiles) {
  struct Case { Index r, c, rank; };
  const Case cases[] = {{4, 6, 4}, {6, 4, 4}, {5, 5, 5}, {5, 5, 2}, {7, 3, 1}, {3, 8, 2}, {10, 10, 9}};
  std::uint64_t seed = 1;
  for (const auto& cs : cases) {
    const Matrix a = rank_deficient(cs.r, cs.c, cs.rank, seed++);
    const Matrix ap = numlin::pseudoinverse(a);
    EXPECT_LT(rel_err(a * ap * a, a), 1e-8);
    EXPECT_LT(rel_err(ap * a * ap, ap), 1e-8);
    EXPECT_LT(rel_err((a * ap).transpose(), a * ap), 1e-8);
    EXPECT_LT(rel_err((ap * a).transpose(), ap * a), 1e-8);
  }
}

TEST(Pseudoinverse, CrossFormIdentity) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Matrix x = random_matrix(6, 9, 40 + s);
    const Matrix lhs = x * numlin::pseudoinverse(x.transpose() * x);
    const Matrix rhs = numlin::pseudoinverse(x * x.transpose()) * x;
    EXPECT_LT(rel_err(lhs, rhs), 1e-8);
  }
}

TEST(Pseudoinverse, RejectsNonFiniteAndBadCutoff) {
  Matrix a = Matrix::Identity(2, 2);
  EXPECT_THROW(numlin::pseudoinverse(a, 0.0), InvalidInput);
  a(0, 1) = std::nan("");
  EXPECT_THROW(numlin::pseudoinverse(a), InvalidInput);
}

TEST(Kron, IdentityBlocks) {
  EXPECT_TRUE(numlin::kron(Matrix::Identity(2, 2), Matrix::Identity(3, 3)).isApprox(Matrix::Identity(6, 6)));
}

TEST(Kron, RowTimesColumn) {
  Matrix a(1, 2), b(2, 1), expect(2, 2);
  a << 1, 2;
  b << 3, 4;
  expect << 3, 6, 4, 8;
  EXPECT_EQ(numlin::kron(a, b), expect);
}

TEST(Kron, VecIdentity) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Matrix a = random_matrix(4, 2, 100 + s);
    const Matrix x = random_matrix(2, 3, 200 + s);
    const Matrix b = random_matrix(3, 5, 300 + s);
    const Vector lhs = numlin::vec(a * x * b);
    const Vector rhs = numlin::kron(b.transpose(), a) * numlin::vec(x);
    EXPECT_LT((lhs - rhs).norm(), 1e-12 * std::max(1.0, lhs.norm()));
  }
}

TEST(Vec, StacksColumnsAndRoundTrips) {
  Matrix a(2, 3);
  a << 1, 3, 5, 2, 4, 6;
  Vector expect(6);
  expect << 1, 2, 3, 4, 5, 6;
  EXPECT_EQ(numlin::vec(a), expect);
  EXPECT_EQ(numlin::unvec(expect, 2, 3), a);
  EXPECT_THROW(numlin::unvec(expect, 4, 2), ShapeMismatch);
}

TEST(SymEig, AscendingOrthogonalReconstruction) {
  const Matrix a = random_symmetric(8, 5);
  const numlin::SymEig e = numlin::sym_eig(a);
  for (Index k = 1; k < e.values.size(); ++k) EXPECT_LE(e.values(k - 1), e.values(k));
  EXPECT_LT((e.vectors.transpose() * e.vectors - Matrix::Identity(8, 8)).norm(), 1e-10);
  EXPECT_LT(rel_err(e.reconstruct(), a), 1e-10);
}

TEST(SymEig, RejectsAsymmetric) {
  Matrix a(2, 2);
  a << 1, 2, 0, 1;
  EXPECT_THROW(numlin::sym_eig(a), InvalidInput);
}

TEST(Svd, ThinAndFullFactorizations) {
  const Matrix a = random_matrix(5, 3, 9);
  for (auto mode : {numlin::SvdMode::thin, numlin::SvdMode::full}) {
    const numlin::Svd d = numlin::svd(a, mode);
    EXPECT_LT((d.U.transpose() * d.U - Matrix::Identity(d.U.cols(), d.U.cols())).norm(), 1e-10);
    EXPECT_LT((d.V.transpose() * d.V - Matrix::Identity(d.V.cols(), d.V.cols())).norm(), 1e-10);
    for (Index k = 1; k < d.s.size(); ++k) EXPECT_GE(d.s(k - 1), d.s(k));
    EXPECT_GE(d.s.minCoeff(), 0.0);
    EXPECT_LT(rel_err(d.reconstruct(), a), 1e-12);
  }
  EXPECT_EQ(numlin::svd(a, numlin::SvdMode::full).U.cols(), 5);
  EXPECT_EQ(numlin::svd(a, numlin::SvdMode::thin).U.cols(), 3);
}

TEST(Svd, SignConventionIsReproducible) {
  const Matrix a = random_matrix(4, 6, 17);
  const numlin::Svd d1 = numlin::svd(a);
  const numlin::Svd d2 = numlin::svd(-(-a));
  for (Index k = 0; k < d1.U.cols(); ++k) {
    Index arg = 0;
    d1.U.col(k).cwiseAbs().maxCoeff(&arg);
    EXPECT_GE(d1.U(arg, k), 0.0);
  }
  EXPECT_EQ(d1.U, d2.U);
  EXPECT_EQ(d1.V, d2.V);
}

TEST(Lyapunov, IdentityDrift) {
  const Matrix m = numlin::solve_lyapunov(Matrix::Identity(2, 2), Matrix::Identity(2, 2));
  EXPECT_LT((m - 0.5 * Matrix::Identity(2, 2)).norm(), 1e-15);
}

TEST(Lyapunov, DiagonalDriftOffDiagonalRhs) {
  Matrix h(2, 2), r(2, 2), expect(2, 2);
  h << 1, 0, 0, 2;
  r << 0, 1, 1, 0;
  expect << 0, 1.0 / 3, 1.0 / 3, 0;
  const Matrix m = numlin::solve_lyapunov(h, r);
  EXPECT_LT((m - expect).norm(), 1e-15);
  EXPECT_LT((h * m + m * h - r).norm(), 1e-12);
}

TEST(Lyapunov, RandomCaseMatchesIntegralOracle) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    const Matrix h = random_spd(5, 60 + s, 0.1);
    const Matrix r = random_symmetric(5, 70 + s);
    const Matrix m = numlin::solve_lyapunov(h, r);
    EXPECT_LT((h * m + m * h - r).norm() / r.norm(), 1e-10);
    const double wmin = numlin::sym_eig(h).values(0);
    IntegralOracle oracle{h, r};
    const Matrix mi = oracle.integrate(40.0 / wmin, 1e-13);
    EXPECT_LT(rel_err(m, mi), 1e-9);
  }
}

TEST(Lyapunov, StrictModeNamesSingularPair) {
  Matrix h = Matrix::Zero(3, 3);
  h(1, 1) = 1.0;
  h(2, 2) = 2.0;
  try {
    numlin::solve_lyapunov(h, Matrix::Identity(3, 3));
    FAIL() << "expected SingularDrift";
  } catch (const SingularDrift& e) {
    EXPECT_NE(std::string(e.what()).find("(0, 0)"), std::string::npos);
  }
}

TEST(Lyapunov, PseudoModeDropsNullPairs) {
  Matrix h = Matrix::Zero(2, 2);
  h(1, 1) = 2.0;
  const Matrix m = numlin::solve_lyapunov(h, Matrix::Identity(2, 2), numlin::LyapunovMode::pseudo);
  EXPECT_DOUBLE_EQ(m(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(m(1, 1), 0.25);
}

TEST(Lyapunov, ResidualInvariantOnManyRandomCases) {
  const auto start = std::chrono::steady_clock::now();
  for (std::uint64_t s = 0; s < 50; ++s) {
    const Index n = 2 + static_cast<Index>(s % 9);
    const Matrix h = random_spd(n, 500 + s, 0.05);
    const Matrix r = random_symmetric(n, 900 + s);
    const Matrix m = numlin::solve_lyapunov(h, r);
    EXPECT_LT((h * m + m * h - r).norm() / r.norm(), 1e-10);
  }
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 10.0);
}

TEST(PsdFactor, ReconstructsAndRejectsIndefinite) {
  const Matrix a = random_matrix(6, 3, 3);
  const Matrix c = a * a.transpose();
  const numlin::PsdFactor f = numlin::psd_factor(c);
  EXPECT_EQ(f.L.cols(), 3);
  EXPECT_LT(rel_err(f.L * f.L.transpose(), c), 1e-12);
  Matrix bad = Matrix::Identity(2, 2);
  bad(1, 1) = -0.5;
  EXPECT_THROW(numlin::psd_factor(bad), CovarianceError);
}

TEST(Blocks, AssemblesTwoByTwo) {
  const Matrix a = Matrix::Constant(2, 2, 1), b = Matrix::Constant(2, 1, 2), c = Matrix::Constant(1, 2, 3),
               d = Matrix::Constant(1, 1, 4);
  const Matrix out = numlin::blocks(a, b, c, d);
  EXPECT_EQ(out.rows(), 3);
  EXPECT_EQ(out(2, 2), 4);
  EXPECT_EQ(out(0, 2), 2);
  EXPECT_EQ(out(2, 0), 3);
  EXPECT_THROW(numlin::blocks(a, c, c, d), ShapeMismatch);
}
