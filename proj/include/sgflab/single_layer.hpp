#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sgflab/csv.hpp"
#include "sgflab/datagen.hpp"
#include "sgflab/numlin.hpp"

namespace sgflab::single_layer {

using datagen::DataSet;

enum class Regime { underparameterized, overparameterized, threshold };

struct RegressionSolution {
  Vector w_star;
  Regime regime = Regime::underparameterized;
  Matrix H;
  Vector J;
  double L_star = 0.0;
  std::vector<std::string> warnings;
};

enum class NoiseKind { exact_k, hessian_limit, multiplicative, empirical };

inline std::string to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::exact_k: return "exact_k";
    case NoiseKind::hessian_limit: return "hessian_limit";
    case NoiseKind::multiplicative: return "multiplicative";
    case NoiseKind::empirical: return "empirical";
  }
  return "empirical";
}

struct NoiseCovariance {
  Matrix C;
  Vector K;  // sample-space diagonal; empty when not defined for the kind
  NoiseKind kind = NoiseKind::exact_k;
  int batch_size = 1;
  bool replacement = true;
};

struct StationarySolution {
  Matrix M;
  Matrix Q;
  numlin::SymEig eig_H;
  double lambda = 0.0;
  bool detailed_balance = false;
  double condition = 0.0;  // omega_max / omega_0
};

inline void require_single_output(const DataSet& d) {
  if (d.n_output() != 1) throw ShapeMismatch("single-layer model requires one output");
}

inline double full_batch_loss(const Vector& w, const DataSet& d) {
  require_single_output(d);
  if (w.size() != d.n_input()) throw ShapeMismatch("weight vector length differs from N");
  const Eigen::RowVectorXd r = w.transpose() * d.X - d.Y.row(0);
  return r.squaredNorm() / (2.0 * static_cast<double>(d.samples()));
}

inline Vector full_batch_gradient(const Vector& w, const DataSet& d) {
  require_single_output(d);
  const Eigen::RowVectorXd r = w.transpose() * d.X - d.Y.row(0);
  return d.X * r.transpose() / static_cast<double>(d.samples());
}

inline RegressionSolution solve_regression(const DataSet& d) {
  require_single_output(d);
  const Index n = d.n_input();
  const Index p = d.samples();
  const double pp = static_cast<double>(p);
  RegressionSolution s;
  s.H = d.sigma_xx();
  s.J = d.X * d.eps.row(0).transpose() / pp;
  if (n < p) {
    s.regime = Regime::underparameterized;
    Eigen::LDLT<Matrix> ldlt(s.H);
    s.w_star = d.u.row(0).transpose() + ldlt.solve(s.J);
    // eps (1 - X^T (X X^T)^-1 X) eps^T without forming the P x P projector.
    const Vector xe = d.X * d.eps.row(0).transpose();
    const double ee = d.eps.row(0).squaredNorm();
    s.L_star = (ee - xe.dot(ldlt.solve(xe)) / pp) / (2.0 * pp);
  } else if (n > p) {
    s.regime = Regime::overparameterized;
    const Matrix gram = d.X.transpose() * d.X;
    s.w_star = d.X * gram.ldlt().solve(d.Y.row(0).transpose());
    s.L_star = 0.0;
  } else {
    s.regime = Regime::threshold;
    s.warnings.push_back("N = P: near the interpolation threshold, using the pseudoinverse solution");
    s.w_star = numlin::pseudoinverse(d.X.transpose()) * d.Y.row(0).transpose();
    s.L_star = full_batch_loss(s.w_star, d);
  }
  return s;
}

inline NoiseCovariance noise_covariance_exact(const DataSet& d, int batch_size, bool replacement = true) {
  require_single_output(d);
  if (batch_size < 1) throw InvalidInput("batch size must be positive");
  const Index n = d.n_input();
  const Index p = d.samples();
  NoiseCovariance nc;
  nc.kind = NoiseKind::exact_k;
  nc.batch_size = batch_size;
  nc.replacement = replacement;
  if (n >= p) {
    nc.C = Matrix::Zero(n, n);
    nc.K = Vector::Zero(p);
    return nc;
  }
  const RegressionSolution s = solve_regression(d);
  const Eigen::RowVectorXd r = s.w_star.transpose() * d.X - d.Y.row(0);
  nc.K = r.transpose().array().square() / static_cast<double>(p);
  double pref = 1.0 / batch_size;
  if (!replacement) {
    if (batch_size > p) throw InvalidInput("S > P without replacement");
    pref = p > 1 ? static_cast<double>(p - batch_size) / (batch_size * static_cast<double>(p - 1)) : 0.0;
  }
  const Matrix xk = d.X * nc.K.asDiagonal();
  nc.C = pref * xk * d.X.transpose();
  nc.C = numlin::symmetrized(nc.C);
  return nc;
}

inline NoiseCovariance noise_covariance_hessian_limit(const Matrix& H, double label_noise_var, int batch_size) {
  numlin::require_symmetric(H, "Hessian");
  NoiseCovariance nc;
  nc.kind = NoiseKind::hessian_limit;
  nc.batch_size = batch_size;
  nc.C = (label_noise_var / batch_size) * H;
  return nc;
}

inline NoiseCovariance noise_covariance_multiplicative(const Matrix& H, const Vector& w_bar,
                                                       double label_noise_var, int batch_size) {
  numlin::require_symmetric(H, "Hessian");
  if (w_bar.size() != H.rows()) throw ShapeMismatch("w_bar length differs from Hessian size");
  const Vector hw = H * w_bar;
  NoiseCovariance nc;
  nc.kind = NoiseKind::multiplicative;
  nc.batch_size = batch_size;
  nc.C = (hw * hw.transpose() + (w_bar.dot(hw) + label_noise_var) * H) / batch_size;
  return nc;
}

inline StationarySolution stationary_covariance(const Matrix& H, const Matrix& C, double lambda) {
  numlin::require_symmetric(H, "Hessian");
  numlin::require_symmetric(C, "noise covariance");
  if (H.rows() != C.rows()) throw ShapeMismatch("H and C differ in size");
  StationarySolution s;
  s.eig_H = numlin::sym_eig(H);
  s.lambda = lambda;
  const Vector& w = s.eig_H.values;
  const Index n = w.size();
  const double wmax = w.cwiseAbs().maxCoeff();
  if (!(w(0) > 1e-12 * wmax)) {
    throw SingularDrift("Hessian is singular: omega_0 = " + csv::cell(w(0)) +
                        ", omega_max = " + csv::cell(wmax));
  }
  s.condition = wmax / w(0);
  const Matrix& V = s.eig_H.vectors;
  const Matrix ct = V.transpose() * C * V;
  Matrix mt(n, n), qt(n, n);
  for (Index j = 0; j < n; ++j) {
    for (Index i = 0; i < n; ++i) {
      const double sum = w(i) + w(j);
      mt(i, j) = lambda * ct(i, j) / sum;
      qt(i, j) = (w(i) - w(j)) / sum * ct(i, j);
    }
  }
  s.M = numlin::symmetrized(V * mt * V.transpose());
  s.Q = numlin::antisymmetrized(V * qt * V.transpose());
  return s;
}

struct DetailedBalance {
  Matrix M;          // symmetrized (lambda/2) H^-1 C
  double asymmetry;  // ||M_db - M_db^T||_F / ||M_db||_F before symmetrization
  Vector spectrum;   // eigenvalues of (lambda/2) H^-1 C, ascending
};

inline DetailedBalance detailed_balance_covariance(const Matrix& H, const Matrix& C, double lambda) {
  numlin::require_symmetric(H, "Hessian");
  numlin::require_symmetric(C, "noise covariance");
  const numlin::SymEig e = numlin::sym_eig(H);
  const double wmax = e.values.cwiseAbs().maxCoeff();
  if (!(e.values(0) > 1e-12 * wmax)) throw SingularDrift("Hessian is singular");
  const Matrix& V = e.vectors;
  const Matrix hinv = V * e.values.cwiseInverse().asDiagonal() * V.transpose();
  const Matrix raw = 0.5 * lambda * hinv * C;
  DetailedBalance db;
  const double norm = raw.norm();
  db.asymmetry = norm > 0.0 ? (raw - raw.transpose()).norm() / norm : 0.0;
  db.M = 0.5 * (raw + raw.transpose());
  // H^-1 C is similar to H^-1/2 C H^-1/2, which is symmetric.
  const Vector is = e.values.cwiseSqrt().cwiseInverse();
  const Matrix sym =
      0.5 * lambda * numlin::symmetrized(is.asDiagonal() * (V.transpose() * C * V) * is.asDiagonal());
  db.spectrum = Eigen::SelfAdjointEigenSolver<Matrix>(sym, Eigen::EigenvaluesOnly).eigenvalues();
  return db;
}

// Direction of the stationary probability current at w (Gaussian density
// factor omitted).
inline Vector stationary_current(const Matrix& M, const Matrix& Q, const Vector& w, const Vector& w_star) {
  if (M.rows() != w.size() || Q.rows() != w.size()) throw ShapeMismatch("stationary_current shapes");
  Eigen::LDLT<Matrix> ldlt(M);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      ldlt.vectorD().cwiseAbs().minCoeff() <= 1e-14 * ldlt.vectorD().cwiseAbs().maxCoeff()) {
    throw InvalidInput("stationary covariance M is singular");
  }
  return -Q * ldlt.solve(w - w_star);
}

// Noise averaged mode trajectory in the eigenbasis of H. t is continuous time
// (t = lambda * SGD steps).
inline Vector mode_relaxation(const numlin::SymEig& eig_H, const Vector& z0, const Vector& z_star, double t) {
  if (t < 0.0) throw InvalidInput("mode_relaxation requires t >= 0");
  if (z0.size() != eig_H.values.size() || z_star.size() != z0.size()) {
    throw ShapeMismatch("mode_relaxation shapes");
  }
  return z_star.array() + (-eig_H.values.array() * t).exp() * (z0 - z_star).array();
}

struct PerturbationRow {
  Index mode;
  double theta;
  double delta_loss;     // direct loss evaluation
  double quadratic;      // theta^2/2 v^T H v
};

// Columns of eigvecs are the perturbation directions.
inline std::vector<PerturbationRow> loss_perturbation_probe(const DataSet& d, const Vector& w_star,
                                                            const Matrix& eigvecs,
                                                            const std::vector<double>& theta_grid) {
  require_single_output(d);
  if (eigvecs.rows() != d.n_input()) throw ShapeMismatch("eigenvector length differs from N");
  const Matrix H = d.sigma_xx();
  const double base = full_batch_loss(w_star, d);
  std::vector<PerturbationRow> rows;
  for (Index k = 0; k < eigvecs.cols(); ++k) {
    const Vector v = eigvecs.col(k);
    const double curv = v.dot(H * v);
    for (double th : theta_grid) {
      const double dl = th == 0.0 ? 0.0 : full_batch_loss(w_star + th * v, d) - base;
      rows.push_back({k, th, dl, 0.5 * th * th * curv});
    }
  }
  return rows;
}

// Check of the additive noise approximation: ratio of the
// multiplicative correction C1 to the additive part C0 (both in the eta = lambda/S
// expansion of the large-P noise).
struct NoiseHierarchy {
  Matrix C0;
  Matrix C1;
  double ratio;  // ||C1||_F / ||C0||_F
};

inline NoiseHierarchy additive_noise_hierarchy(const Matrix& H, const Vector& J, double label_noise_var,
                                               double lambda, int batch_size) {
  const double eta = lambda / batch_size;
  Eigen::LDLT<Matrix> ldlt(H);
  const Matrix hinv_jjt = ldlt.solve(J * J.transpose());
  NoiseHierarchy out;
  out.C0 = J * J.transpose() + (hinv_jjt.trace() + label_noise_var) * H;
  const Matrix w1 = 0.5 * ldlt.solve(out.C0);
  const Matrix w1s = 0.5 * (w1 + w1.transpose());
  out.C1 = 0.5 * eta * (H * w1s * H + (H * w1s).trace() * H);
  out.ratio = out.C1.norm() / out.C0.norm();
  return out;
}

// Rows (mode_index, value, normalization, source_tag), values sorted descending.
inline void write_spectrum_rows(csv::Writer& w, const Vector& values, double normalization,
                                const std::string& tag) {
  std::vector<double> v(values.data(), values.data() + values.size());
  std::sort(v.begin(), v.end(), std::greater<>());
  for (std::size_t k = 0; k < v.size(); ++k) w.row(k, v[k], normalization, tag);
}

inline const std::vector<std::string>& spectrum_columns() {
  static const std::vector<std::string> cols{"mode_index", "value", "normalization", "source_tag"};
  return cols;
}

}  // namespace sgflab::single_layer
