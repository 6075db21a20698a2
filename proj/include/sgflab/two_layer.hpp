#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgflab/csv.hpp"
#include "sgflab/datagen.hpp"
#include "sgflab/numlin.hpp"

namespace sgflab::two_layer {

using datagen::DataSet;

struct TwoLayerWeights {
  Matrix W1;  // N_h x N_i
  Matrix W2;  // N_o x N_h

  Index n_input() const { return W1.cols(); }
  Index n_hidden() const { return W1.rows(); }
  Index n_output() const { return W2.rows(); }
  Matrix product() const { return W2 * W1; }
};

// Sufficient statistics of the full batch.
struct Moments {
  Matrix sxx;        // Sigma^xx, N_i x N_i
  Matrix syx;        // Sigma^yx, N_o x N_i
  double tr_syy = 0; // tr Sigma^yy
};

inline Moments moments(const DataSet& d) {
  const double p = static_cast<double>(d.samples());
  return {d.sigma_xx(), d.sigma_yx(), d.Y.squaredNorm() / p};
}

inline void check_shapes(const TwoLayerWeights& w, const DataSet& d) {
  if (w.W1.cols() != d.n_input() || w.W2.rows() != d.n_output() || w.W2.cols() != w.W1.rows()) {
    throw ShapeMismatch("two-layer weights do not conform to the data");
  }
}

inline double two_layer_loss(const TwoLayerWeights& w, const DataSet& d) {
  check_shapes(w, d);
  const Matrix r = d.Y - w.W2 * (w.W1 * d.X);
  return r.squaredNorm() / (2.0 * static_cast<double>(d.samples()));
}

inline double two_layer_loss(const TwoLayerWeights& w, const Moments& m) {
  const Matrix p = w.product();
  return 0.5 * (m.tr_syy - 2.0 * (p.cwiseProduct(m.syx)).sum() + (p * m.sxx).cwiseProduct(p).sum());
}

// w* = Sigma^yx (Sigma^xx)^-1.
inline Matrix product_solution(const DataSet& d) {
  if (d.n_input() >= d.samples()) throw InvalidInput("product_solution requires N_i < P");
  const Matrix sxx = d.sigma_xx();
  Eigen::LDLT<Matrix> ldlt(sxx);
  const double dmax = ldlt.vectorD().cwiseAbs().maxCoeff();
  if (ldlt.info() != Eigen::Success || ldlt.vectorD().minCoeff() <= 1e-14 * dmax) {
    throw SingularDrift("Sigma^xx is singular");
  }
  return ldlt.solve(d.sigma_yx().transpose()).transpose();
}

inline Matrix balancedness(const TwoLayerWeights& w) {
  return w.W2.transpose() * w.W2 - w.W1 * w.W1.transpose();
}

// Zero-balanced late-time prediction from the compact SVD of Sigma^yx:
// W1^T W1 = (w*^T w*)^{1/2} and W2 W2^T = (w* w*^T)^{1/2} with w* = Sigma^yx/sigma_x^2.
struct ZeroBalancedPrediction {
  Matrix w1tw1;
  Matrix w2w2t;
};

inline ZeroBalancedPrediction zero_balanced_solution(const Matrix& syx, double x_var) {
  const numlin::Svd d = numlin::svd(syx);
  const Matrix s = (d.s / x_var).asDiagonal();
  return {d.V * s * d.V.transpose(), d.U * s * d.U.transpose()};
}

// Gradient flow right-hand side: (dW1, dW2).
inline TwoLayerWeights flow_rhs(const TwoLayerWeights& w, const Moments& m) {
  const Matrix r = m.syx - w.W2 * w.W1 * m.sxx;
  return {w.W2.transpose() * r, r * w.W1.transpose()};
}

enum class Integrator { rk4, euler };

struct FlowOptions {
  Integrator method = Integrator::rk4;
  long record_every = 0;   // 0: keep only the end points
  int max_halvings = 30;
  bool stop_at_quasi_stationary = false;
  long qs_window = 1000;   // steps between quasi-stationarity checks
  double qs_rel_tol = 1e-4;
};

struct FlowResult {
  std::vector<double> times;
  std::vector<double> losses;
  std::vector<TwoLayerWeights> snapshots;
  TwoLayerWeights final;
  double dt_used = 0.0;
  int halvings = 0;
  long steps_taken = 0;
  bool quasi_stationary = false;
};

inline TwoLayerWeights flow_step(const TwoLayerWeights& w, const Moments& m, double dt, Integrator method) {
  const TwoLayerWeights k1 = flow_rhs(w, m);
  if (method == Integrator::euler) return {w.W1 + dt * k1.W1, w.W2 + dt * k1.W2};
  const TwoLayerWeights k2 = flow_rhs({w.W1 + 0.5 * dt * k1.W1, w.W2 + 0.5 * dt * k1.W2}, m);
  const TwoLayerWeights k3 = flow_rhs({w.W1 + 0.5 * dt * k2.W1, w.W2 + 0.5 * dt * k2.W2}, m);
  const TwoLayerWeights k4 = flow_rhs({w.W1 + dt * k3.W1, w.W2 + dt * k3.W2}, m);
  return {w.W1 + dt / 6.0 * (k1.W1 + 2.0 * k2.W1 + 2.0 * k3.W1 + k4.W1),
          w.W2 + dt / 6.0 * (k1.W2 + 2.0 * k2.W2 + 2.0 * k3.W2 + k4.W2)};
}

// Integrates the deterministic flow up to time dt * steps. A step whose loss
// exceeds ten times the previous loss (or is non-finite) is retried at half dt.
inline FlowResult gradient_flow(const TwoLayerWeights& w0, const DataSet& d, double dt, long steps,
                                const FlowOptions& opt = {}) {
  check_shapes(w0, d);
  if (!(dt > 0.0)) throw InvalidInput("gradient_flow requires dt > 0");
  if (steps < 1) throw InvalidInput("gradient_flow requires steps >= 1");
  const Moments m = moments(d);
  const double t_end = dt * static_cast<double>(steps);
  FlowResult out;
  TwoLayerWeights w = w0;
  double loss = two_layer_loss(w, m);
  double t = 0.0;
  double h = dt;
  out.times.push_back(0.0);
  out.losses.push_back(loss);
  out.snapshots.push_back(w);
  double window_loss = loss;
  long k = 0;
  while (t < t_end * (1.0 - 1e-14)) {
    const double step = std::min(h, t_end - t);
    TwoLayerWeights next = flow_step(w, m, step, opt.method);
    const double nl = two_layer_loss(next, m);
    if (!std::isfinite(nl) || !next.W1.allFinite() || !next.W2.allFinite() ||
        nl > 10.0 * std::max(loss, std::numeric_limits<double>::min())) {
      if (++out.halvings > opt.max_halvings) {
        throw StepSizeError("gradient flow diverged after " + std::to_string(opt.max_halvings) +
                            " step halvings (dt = " + csv::cell(h) + ")");
      }
      h *= 0.5;
      continue;
    }
    w = std::move(next);
    loss = nl;
    t += step;
    ++k;
    if (opt.record_every > 0 && k % opt.record_every == 0) {
      out.times.push_back(t);
      out.losses.push_back(loss);
      out.snapshots.push_back(w);
    }
    if (opt.stop_at_quasi_stationary && k % opt.qs_window == 0) {
      const double rel = std::abs(window_loss - loss) / std::max(std::abs(loss), 1e-300);
      window_loss = loss;
      if (rel < opt.qs_rel_tol) {
        out.quasi_stationary = true;
        break;
      }
    }
  }
  if (out.times.back() != t) {
    out.times.push_back(t);
    out.losses.push_back(loss);
    out.snapshots.push_back(w);
  }
  out.final = w;
  out.dt_used = h;
  out.steps_taken = k;
  return out;
}

// Runs gradient flow until the relative loss change across qs_window steps
// drops below qs_rel_tol, or max_steps is reached.
inline FlowResult run_to_quasi_stationary(const TwoLayerWeights& w0, const DataSet& d, double dt,
                                          long max_steps, FlowOptions opt = {}) {
  opt.stop_at_quasi_stationary = true;
  return gradient_flow(w0, d, dt, max_steps, opt);
}

// Factors of the reference weights: W1 = A S1 B^T (A, B square), W2 = U S2 V^T
// (U square, V with N_o columns). D1 = S1 S1^T, D2 = S2^T S2 stored as diagonals.
struct ReferenceSvd {
  Matrix A, S1, B;
  Matrix U, S2, V;
  Vector d1;  // N_h
  Vector d2;  // N_o

  Index n_input() const { return B.rows(); }
  Index n_hidden() const { return A.rows(); }
  Index n_output() const { return U.rows(); }
};

inline ReferenceSvd reference_svd(const TwoLayerWeights& w) {
  const Index nh = w.n_hidden(), no = w.n_output();
  if (no > nh) throw ShapeMismatch("reference_svd requires N_o <= N_h");
  ReferenceSvd r;
  const numlin::Svd s1 = numlin::svd(w.W1, numlin::SvdMode::full);
  r.A = s1.U;
  r.B = s1.V;
  r.S1 = s1.sigma();
  r.d1 = Vector::Zero(nh);
  for (Index k = 0; k < s1.s.size(); ++k) r.d1(k) = s1.s(k) * s1.s(k);
  const numlin::Svd s2 = numlin::svd(w.W2, numlin::SvdMode::thin);
  r.U = s2.U;
  r.V = s2.V;
  r.S2 = s2.s.asDiagonal();
  r.d2 = s2.s.cwiseProduct(s2.s);
  return r;
}

struct DriftDiffusion {
  Matrix Gamma;
  Matrix Delta;
  double sigma_R2 = 0.0;
  double x_var = 0.0;
};

// Drift and diffusion of the linearized fluctuations z = (vec z1, vec z2) with
// dW1 = V z1, dW2 = z2 A^T.
inline DriftDiffusion drift_diffusion(const ReferenceSvd& r, double x_var, double sigma_R2) {
  const Index ni = r.n_input(), no = r.n_output();
  const Matrix us2 = r.U * r.S2;
  const Matrix d2 = r.d2.asDiagonal();
  const Matrix d1 = r.d1.asDiagonal();
  const Matrix g11 = numlin::kron(Matrix::Identity(ni, ni), d2);
  const Matrix g12 = numlin::kron(r.B * r.S1.transpose(), us2.transpose());
  const Matrix g21 = numlin::kron(r.S1 * r.B.transpose(), us2);
  const Matrix g22 = numlin::kron(d1, Matrix::Identity(no, no));
  DriftDiffusion dd;
  dd.Gamma = x_var * numlin::blocks(g11, g12, g21, g22);
  dd.Gamma = numlin::symmetrized(dd.Gamma);
  dd.Delta = (sigma_R2 / x_var) * dd.Gamma;
  dd.sigma_R2 = sigma_R2;
  dd.x_var = x_var;
  return dd;
}

// Spectrum of Gamma, ascending: x_var * ({d1_k + d2_l}, {d2_l x (N_i - N_h)}, {0 x N_h N_o}).
inline Vector analytic_gamma_spectrum(const ReferenceSvd& r, double x_var) {
  const Index ni = r.n_input(), nh = r.n_hidden(), no = r.n_output();
  if (nh > ni) throw ShapeMismatch("analytic spectrum requires N_h <= N_i");
  std::vector<double> v;
  for (Index l = 0; l < no; ++l) {
    for (Index k = 0; k < nh; ++k) v.push_back(x_var * (r.d1(k) + r.d2(l)));
    for (Index k = 0; k < ni - nh; ++k) v.push_back(x_var * r.d2(l));
  }
  for (Index k = 0; k < nh * no; ++k) v.push_back(0.0);
  std::sort(v.begin(), v.end());
  return Eigen::Map<Vector>(v.data(), static_cast<Index>(v.size()));
}

struct TwoLayerCovariance {
  Matrix M;
  Matrix M11, M12, M22;
  Matrix cov_dw1;  // cov(vec dW1), N_h N_i square
  Matrix cov_dw2;  // cov(vec dW2), N_o N_h square
};

inline TwoLayerCovariance stationary_covariance_2l(const DriftDiffusion& dd, const ReferenceSvd& r) {
  const Index ni = r.n_input(), nh = r.n_hidden(), no = r.n_output();
  const Index n1 = no * ni, n2 = no * nh;
  if (dd.Gamma.rows() != n1 + n2) throw ShapeMismatch("drift size does not match reference");
  TwoLayerCovariance c;
  c.M = numlin::solve_lyapunov(dd.Gamma, dd.Delta, numlin::LyapunovMode::pseudo);
  c.M11 = c.M.topLeftCorner(n1, n1);
  c.M12 = c.M.topRightCorner(n1, n2);
  c.M22 = c.M.bottomRightCorner(n2, n2);
  const Matrix iv = numlin::kron(Matrix::Identity(ni, ni), r.V);
  const Matrix ai = numlin::kron(r.A, Matrix::Identity(no, no));
  c.cov_dw1 = numlin::symmetrized(iv * c.M11 * iv.transpose());
  c.cov_dw2 = numlin::symmetrized(ai * c.M22 * ai.transpose());
  return c;
}

struct M22ClosedForm {
  Vector exact;   // (lambda sigma_y^2 / 2S) d1 / (d1 + d2)
  Vector approx;  // (lambda sigma_y^2 / (2 S d2)) d1
};

inline M22ClosedForm m22_closed_form(const ReferenceSvd& r, double lambda, double y_var, int batch_size) {
  if (r.n_output() != 1) throw ShapeMismatch("m22_closed_form requires N_o = 1");
  const double c = lambda * y_var / (2.0 * batch_size);
  const double d2 = r.d2(0);
  M22ClosedForm out{Vector::Zero(r.n_hidden()), Vector::Zero(r.n_hidden())};
  for (Index k = 0; k < r.n_hidden(); ++k) {
    const double s = r.d1(k) + d2;
    out.exact(k) = s > 0.0 ? c * r.d1(k) / s : 0.0;
    out.approx(k) = d2 > 0.0 ? c * r.d1(k) / d2 : std::numeric_limits<double>::infinity();
  }
  return out;
}

// Statistics entering the two-layer gradient noise.
struct NoiseStats {
  double x_var = 0.0;   // sigma_x^2
  double y_sq = 0.0;    // <y^2>
  double learning_rate = 0.0;
  int batch_size = 1;
  Index samples = 1;

  double sigma_R2() const { return learning_rate * x_var * y_sq / batch_size; }
};

inline NoiseStats noise_stats(const DataSet& d, double learning_rate, int batch_size) {
  NoiseStats s;
  s.x_var = d.sigma_xx().trace() / static_cast<double>(d.n_input());
  s.y_sq = d.Y.squaredNorm() / static_cast<double>(d.Y.size());
  s.learning_rate = learning_rate;
  s.batch_size = batch_size;
  s.samples = d.samples();
  return s;
}

// Covariances of vec R1 (N_h N_i), vec R2 (N_o N_h) and their cross block.
struct NoiseCovariances {
  Matrix cov_r1;
  Matrix cov_r2;
  Matrix cross;

  Matrix joint() const { return numlin::blocks(cov_r1, cross, cross.transpose(), cov_r2); }
};

inline NoiseCovariances sgf_noise_covariances(const TwoLayerWeights& ref, const NoiseStats& st) {
  const Index ni = ref.n_input(), no = ref.n_output();
  const double c = st.sigma_R2() * (1.0 - 1.0 / static_cast<double>(st.samples));
  NoiseCovariances nc;
  nc.cov_r1 = c * numlin::kron(Matrix::Identity(ni, ni), ref.W2.transpose() * ref.W2);
  nc.cov_r2 = c * numlin::kron(ref.W1 * ref.W1.transpose(), Matrix::Identity(no, no));
  nc.cross = c * numlin::kron(ref.W1.transpose(), ref.W2.transpose());
  return nc;
}

struct IvfrRow {
  Index mode;
  double d1;
  double variance;
  double curvature;
  double flatness;
};

struct IvfrResult {
  std::vector<IvfrRow> rows;
  double psi = 0.0;
  double psi_stderr = 0.0;
  Index modes_used = 0;
};

struct PowerLawFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_stderr = 0.0;
};

// Weighted least squares y = a + b x; weights of zero length mean unit weights.
inline PowerLawFit fit_line(const std::vector<double>& x, const std::vector<double>& y,
                            const std::vector<double>& weights = {}) {
  double sw = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double w = weights.empty() ? 1.0 : weights[k];
    sw += w;
    sx += w * x[k];
    sy += w * y[k];
    sxx += w * x[k] * x[k];
    sxy += w * x[k] * y[k];
  }
  const double det = sw * sxx - sx * sx;
  PowerLawFit f;
  f.slope = (sw * sxy - sx * sy) / det;
  f.intercept = (sy - f.slope * sx) / sw;
  if (!weights.empty()) {
    f.slope_stderr = std::sqrt(sw / det);
  } else if (x.size() > 2) {
    double rss = 0;
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double e = y[k] - f.intercept - f.slope * x[k];
      rss += e * e;
    }
    f.slope_stderr = std::sqrt(rss / static_cast<double>(x.size() - 2) * sw / det);
  }
  return f;
}

// Least-squares slope of log variance against log flatness over rows with
// positive curvature and variance (and use[k] when given), weighted by the
// inverse squared relative standard errors when supplied.
inline IvfrResult fit_ivfr(std::vector<IvfrRow> rows, const std::optional<Vector>& variance_stderr = std::nullopt,
                           const std::vector<bool>& use = {}) {
  double dmax = 0;
  for (const auto& r : rows) dmax = std::max(dmax, r.d1);
  std::vector<double> lx, ly, wts;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const IvfrRow& row = rows[k];
    if (!use.empty() && !use[k]) continue;
    if (!(row.curvature > 0.0 && row.variance > 0.0 && row.d1 > 1e-12 * dmax)) continue;
    lx.push_back(std::log(row.flatness));
    ly.push_back(std::log(row.variance));
    if (variance_stderr) {
      const double rel = (*variance_stderr)(static_cast<Index>(k)) / row.variance;
      wts.push_back(1.0 / std::max(rel * rel, 1e-300));
    }
  }
  if (lx.size() < 3) throw InsufficientSpread("fewer than 3 modes with positive curvature and variance");
  const PowerLawFit f = fit_line(lx, ly, wts);
  IvfrResult out;
  out.rows = std::move(rows);
  out.psi = -f.slope;
  out.psi_stderr = f.slope_stderr;
  out.modes_used = static_cast<Index>(lx.size());
  return out;
}

// Perturbs W2 along the columns of A and fits the curvature of the direct loss
// over theta_grid. Variances default to the closed-form M22; supply measured
// variances (and optionally their standard errors) to test simulations.
inline IvfrResult ivfr_probe(const TwoLayerWeights& ref, const ReferenceSvd& r, const DataSet& d,
                             const std::vector<double>& theta_grid, const Vector& variances,
                             const std::optional<Vector>& variance_stderr = std::nullopt) {
  if (ref.n_output() != 1) throw ShapeMismatch("ivfr_probe requires N_o = 1");
  if (variances.size() != ref.n_hidden()) throw ShapeMismatch("one variance per hidden mode required");
  std::vector<double> distinct;
  for (Index k = 0; k < r.d1.size(); ++k) {
    const double v = r.d1(k);
    if (!(v > 0.0)) continue;
    bool seen = false;
    for (double u : distinct) seen = seen || std::abs(u - v) <= 1e-9 * std::max(u, v);
    if (!seen) distinct.push_back(v);
  }
  if (distinct.size() < 3) throw InsufficientSpread("fewer than 3 distinct D1 values");
  const Moments m = moments(d);
  const double base = two_layer_loss(ref, m);
  std::vector<IvfrRow> rows;
  for (Index k = 0; k < ref.n_hidden(); ++k) {
    // Least squares delta_L = b theta + a theta^2.
    double s22 = 0, s23 = 0, s33 = 0, sy2 = 0, sy3 = 0;
    for (double th : theta_grid) {
      TwoLayerWeights p = ref;
      p.W2 += th * r.A.col(k).transpose();
      const double dl = th == 0.0 ? 0.0 : two_layer_loss(p, m) - base;
      const double t2 = th * th, t3 = t2 * th;
      s22 += t2;
      s23 += t3;
      s33 += t2 * t2;
      sy2 += dl * th;
      sy3 += dl * t2;
    }
    const double det = s22 * s33 - s23 * s23;
    const double a = (s22 * sy3 - s23 * sy2) / det;
    IvfrRow row{k, r.d1(k), variances(k), 2.0 * a, 0.0};
    row.flatness = row.curvature > 0.0 ? 1.0 / std::sqrt(row.curvature) : std::numeric_limits<double>::infinity();
    rows.push_back(row);
  }
  return fit_ivfr(std::move(rows), variance_stderr);
}

inline IvfrResult ivfr_probe(const TwoLayerWeights& ref, const ReferenceSvd& r, const DataSet& d,
                             const std::vector<double>& theta_grid, double lambda, double y_var,
                             int batch_size, bool approximate = false) {
  const M22ClosedForm m22 = m22_closed_form(r, lambda, y_var, batch_size);
  return ivfr_probe(ref, r, d, theta_grid, approximate ? m22.approx : m22.exact);
}

struct W1PerturbationRow {
  Index mode;
  double eigenvalue;
  double delta_loss;
  double delta_over_theta2;
  bool beyond_input_dim;  // mode index >= N_i
};

// Modes ordered by descending covariance eigenvalue.
inline std::vector<W1PerturbationRow> w1_perturbation_probe(const TwoLayerWeights& ref, const Matrix& cov_vec_dw1,
                                                            const DataSet& d, double theta) {
  const Index nh = ref.n_hidden(), ni = ref.n_input();
  if (cov_vec_dw1.rows() != nh * ni) throw ShapeMismatch("cov(vec dW1) size differs from N_h N_i");
  const numlin::SymEig e = numlin::sym_eig(numlin::symmetrized(cov_vec_dw1));
  const Moments m = moments(d);
  const double base = two_layer_loss(ref, m);
  std::vector<W1PerturbationRow> rows;
  for (Index k = 0; k < e.values.size(); ++k) {
    const Index src = e.values.size() - 1 - k;
    TwoLayerWeights p = ref;
    p.W1 += theta * numlin::unvec(e.vectors.col(src), nh, ni);
    const double dl = theta == 0.0 ? 0.0 : two_layer_loss(p, m) - base;
    rows.push_back({k, e.values(src), dl, theta == 0.0 ? 0.0 : dl / (theta * theta), k >= ni});
  }
  return rows;
}

struct RelaxationRow {
  Index mode;
  double rate;           // omega_k (eigenvalue of Gamma / sigma_x^2)
  double mean_factor;    // <chi_k(t)> / chi_k(0) = <chi_k(t) chi_k(0)> / <chi_k(0)^2>
  double variance;       // variance of chi_k at time t
};

// Rates ascending. chi0_var holds the initial variance of each mode in that order.
inline std::vector<RelaxationRow> relaxation_spectrum_2l(const ReferenceSvd& r, double x_var, double sigma_R2,
                                                         const Vector& chi0_var, double t) {
  if (r.n_output() != 1) throw ShapeMismatch("relaxation_spectrum_2l requires N_o = 1");
  if (t < 0.0) throw InvalidInput("relaxation_spectrum_2l requires t >= 0");
  const Vector rates = analytic_gamma_spectrum(r, 1.0);
  if (chi0_var.size() != rates.size()) throw ShapeMismatch("one initial variance per mode required");
  const double eq = sigma_R2 / (2.0 * x_var);
  const double zero = 1e-8 * std::max(rates.maxCoeff(), 0.0);
  std::vector<RelaxationRow> rows;
  for (Index k = 0; k < rates.size(); ++k) {
    const double w = rates(k);
    if (w <= zero) {
      rows.push_back({k, w, 1.0, chi0_var(k)});
      continue;
    }
    const double f = std::exp(-x_var * w * t);
    rows.push_back({k, w, f, f * f * chi0_var(k) + eq * (1.0 - f * f)});
  }
  return rows;
}

inline nlohmann::json reference_to_json(const TwoLayerWeights& w, const ReferenceSvd& r) {
  using datagen::detail::matrix_to_json;
  nlohmann::json j;
  j["W1"] = matrix_to_json(w.W1);
  j["W2"] = matrix_to_json(w.W2);
  j["A"] = matrix_to_json(r.A);
  j["S1"] = matrix_to_json(r.S1);
  j["B"] = matrix_to_json(r.B);
  j["U"] = matrix_to_json(r.U);
  j["S2"] = matrix_to_json(r.S2);
  j["V"] = matrix_to_json(r.V);
  j["D1"] = std::vector<double>(r.d1.data(), r.d1.data() + r.d1.size());
  j["D2"] = std::vector<double>(r.d2.data(), r.d2.data() + r.d2.size());
  return j;
}

inline TwoLayerWeights reference_from_json(const nlohmann::json& j) {
  return {datagen::detail::matrix_from_json(j.at("W1")), datagen::detail::matrix_from_json(j.at("W2"))};
}

}  // namespace sgflab::two_layer
