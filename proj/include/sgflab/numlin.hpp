#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include "sgflab/errors.hpp"

namespace sgflab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

namespace numlin {

inline void require_finite(const Matrix& a, const char* what = "matrix") {
  if (!a.allFinite()) {
    throw InvalidInput(std::string(what) + " contains non-finite entries");
  }
}

inline double max_abs(const Matrix& a) { return a.size() ? a.cwiseAbs().maxCoeff() : 0.0; }

inline Matrix symmetrized(const Matrix& a) { return (0.5 * (a + a.transpose())).eval(); }
inline Matrix antisymmetrized(const Matrix& a) { return (0.5 * (a - a.transpose())).eval(); }

// Symmetry test relative to the largest entry (absolute when the matrix is tiny).
inline bool is_symmetric(const Matrix& a, double tol = 1e-10) {
  if (a.rows() != a.cols()) return false;
  const double scale = std::max(1.0, max_abs(a));
  return max_abs(a - a.transpose()) <= tol * scale;
}

inline void require_symmetric(const Matrix& a, const char* what, double tol = 1e-10) {
  require_finite(a, what);
  if (a.rows() != a.cols()) {
    throw ShapeMismatch(std::string(what) + " must be square");
  }
  if (!is_symmetric(a, tol)) {
    throw InvalidInput(std::string(what) + " is not symmetric");
  }
}

// Eigenvalues ascending, eigenvector columns in the same order.
struct SymEig {
  Vector values;
  Matrix vectors;

  Matrix reconstruct() const { return vectors * values.asDiagonal() * vectors.transpose(); }
};

inline SymEig sym_eig(const Matrix& a) {
  require_symmetric(a, "sym_eig input");
  const Matrix s = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(s);
  if (es.info() != Eigen::Success) {
    throw InvalidInput("symmetric eigendecomposition failed to converge");
  }
  return {es.eigenvalues(), es.eigenvectors()};
}

enum class SvdMode { full, thin };

// A = U diag(s) V^T with s descending. In full mode U and V are square.
struct Svd {
  Matrix U;
  Vector s;
  Matrix V;
  SvdMode mode = SvdMode::thin;

  Matrix sigma() const {
    Matrix out = Matrix::Zero(U.cols(), V.cols());
    for (Index k = 0; k < s.size(); ++k) out(k, k) = s(k);
    return out;
  }
  Matrix reconstruct() const { return U * sigma() * V.transpose(); }
};

inline Svd svd(const Matrix& a, SvdMode mode = SvdMode::thin) {
  require_finite(a, "svd input");
  const unsigned flags = mode == SvdMode::full ? (Eigen::ComputeFullU | Eigen::ComputeFullV)
                                               : (Eigen::ComputeThinU | Eigen::ComputeThinV);
  Eigen::BDCSVD<Matrix> dec(a, flags);
  Svd out{dec.matrixU(), dec.singularValues(), dec.matrixV(), mode};
  // Largest-magnitude entry of each left vector is made non-negative.
  for (Index k = 0; k < out.U.cols(); ++k) {
    Index arg = 0;
    out.U.col(k).cwiseAbs().maxCoeff(&arg);
    if (out.U(arg, k) < 0.0) {
      out.U.col(k) *= -1.0;
      if (k < out.V.cols()) out.V.col(k) *= -1.0;
    }
  }
  return out;
}

inline Matrix pseudoinverse(const Matrix& a, double rel_cutoff = 1e-12) {
  require_finite(a, "pseudoinverse input");
  if (!(rel_cutoff > 0.0 && rel_cutoff < 1.0)) {
    throw InvalidInput("pseudoinverse rel_cutoff must lie in (0, 1)");
  }
  if (a.size() == 0) return Matrix::Zero(a.cols(), a.rows());
  const Svd d = svd(a, SvdMode::thin);
  const double cut = rel_cutoff * (d.s.size() ? d.s(0) : 0.0);
  Vector inv = Vector::Zero(d.s.size());
  for (Index k = 0; k < d.s.size(); ++k) {
    if (d.s(k) > cut && d.s(k) > 0.0) inv(k) = 1.0 / d.s(k);
  }
  return d.V * inv.asDiagonal() * d.U.transpose();
}

inline Matrix kron(const Matrix& a, const Matrix& b) {
  require_finite(a, "kron lhs");
  require_finite(b, "kron rhs");
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

// Column stacking.
inline Vector vec(const Matrix& a) {
  return Eigen::Map<const Vector>(a.data(), a.size());
}

inline Matrix unvec(const Vector& v, Index rows, Index cols) {
  if (rows * cols != v.size()) throw ShapeMismatch("unvec: size does not match rows*cols");
  return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

inline Matrix blocks(const Matrix& a11, const Matrix& a12, const Matrix& a21, const Matrix& a22) {
  if (a11.rows() != a12.rows() || a21.rows() != a22.rows() || a11.cols() != a21.cols() ||
      a12.cols() != a22.cols()) {
    throw ShapeMismatch("blocks: inconsistent block shapes");
  }
  Matrix out(a11.rows() + a21.rows(), a11.cols() + a12.cols());
  out << a11, a12, a21, a22;
  return out;
}

inline Index numerical_rank(const Vector& eigenvalues, double rel_threshold) {
  if (eigenvalues.size() == 0) return 0;
  const double top = eigenvalues.cwiseAbs().maxCoeff();
  Index r = 0;
  for (Index k = 0; k < eigenvalues.size(); ++k)
    if (std::abs(eigenvalues(k)) > rel_threshold * top) ++r;
  return top > 0.0 ? r : 0;
}

enum class LyapunovMode { strict, pseudo };

// Solves H M + M H = rhs for symmetric H using a precomputed eigensystem.
inline Matrix solve_lyapunov(const SymEig& h, const Matrix& rhs,
                             LyapunovMode mode = LyapunovMode::strict) {
  const Index n = h.values.size();
  if (rhs.rows() != n || rhs.cols() != n) throw ShapeMismatch("solve_lyapunov: rhs shape");
  require_symmetric(rhs, "Lyapunov rhs");
  const double wmax = n ? h.values.cwiseAbs().maxCoeff() : 0.0;
  const double eps = 1e-12 * wmax;
  Matrix t = h.vectors.transpose() * rhs * h.vectors;
  for (Index j = 0; j < n; ++j) {
    for (Index i = 0; i < n; ++i) {
      const double d = h.values(i) + h.values(j);
      if (d <= eps || wmax == 0.0) {
        if (mode == LyapunovMode::strict) {
          std::ostringstream os;
          os.precision(6);
          os << "near-singular Lyapunov pair (" << i << ", " << j << "): omega_i = " << h.values(i)
             << ", omega_j = " << h.values(j) << ", threshold " << eps;
          throw SingularDrift(os.str());
        }
        t(i, j) = 0.0;
      } else {
        t(i, j) /= d;
      }
    }
  }
  Matrix m = h.vectors * t * h.vectors.transpose();
  return 0.5 * (m + m.transpose());
}

inline Matrix solve_lyapunov(const Matrix& h, const Matrix& rhs,
                             LyapunovMode mode = LyapunovMode::strict) {
  require_symmetric(h, "Lyapunov drift");
  return solve_lyapunov(sym_eig(h), rhs, mode);
}

// Factor L with L L^T = C for symmetric PSD C. Negative eigenvalues down to
// -neg_tol * max|eig| are clipped; anything below raises CovarianceError.
struct PsdFactor {
  Matrix L;
  bool repaired = false;
  double min_eigenvalue = 0.0;
};

inline PsdFactor psd_factor(const Matrix& c, double neg_tol = 1e-10, double keep_rel = 1e-14) {
  require_finite(c, "covariance");
  if (c.rows() != c.cols()) throw ShapeMismatch("psd_factor: covariance must be square");
  const Matrix s = 0.5 * (c + c.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(s);
  const Vector& ev = es.eigenvalues();
  PsdFactor out;
  if (ev.size() == 0) return out;
  const double top = ev.cwiseAbs().maxCoeff();
  out.min_eigenvalue = ev(0);
  if (ev(0) < -neg_tol * top) {
    std::ostringstream os;
    os << "covariance is not positive semi-definite: min eigenvalue " << ev(0) << " vs scale "
       << top;
    throw CovarianceError(os.str());
  }
  out.repaired = ev(0) < 0.0;
  Index keep = 0;
  for (Index k = 0; k < ev.size(); ++k)
    if (ev(k) > keep_rel * top) ++keep;
  out.L.resize(c.rows(), keep);
  Index col = 0;
  for (Index k = 0; k < ev.size(); ++k) {
    if (ev(k) > keep_rel * top) out.L.col(col++) = es.eigenvectors().col(k) * std::sqrt(ev(k));
  }
  return out;
}

// Symmetric square root and inverse square root of an SPD matrix.
inline Matrix spd_sqrt(const Matrix& a) {
  const SymEig e = sym_eig(a);
  if (e.values.size() && e.values(0) < 0.0) throw InvalidInput("spd_sqrt: negative eigenvalue");
  return e.vectors * e.values.cwiseSqrt().asDiagonal() * e.vectors.transpose();
}

inline Matrix spd_inv_sqrt(const Matrix& a) {
  const SymEig e = sym_eig(a);
  if (e.values.size() && e.values(0) <= 0.0) {
    throw SingularDrift("spd_inv_sqrt: matrix is not positive definite");
  }
  return e.vectors * e.values.cwiseSqrt().cwiseInverse().asDiagonal() * e.vectors.transpose();
}

}  // namespace numlin
}  // namespace sgflab
