// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "sgflab/expcli.hpp"
#include "sgflab/numlin.hpp"
#include "sgflab/sgd_engine.hpp"
#include "sgflab/single_layer.hpp"
#include "sgflab/two_layer.hpp"
#include "test_util.hpp"

using namespace sgflab;
using testutil::random_matrix;
using testutil::rel_err;
using two_layer::TwoLayerWeights;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kLyapResidualTol = 1e-10;
constexpr double kLyapFormTol = 1e-8;
constexpr double kLyapMaxSeconds = 10.0;
constexpr double kIsoMaxRatio = 1.5;
constexpr double kIsoMeanTol = 0.10;
constexpr double kHessianModeTol = 0.10;
constexpr double kSpreadMismatchMin = 2.0;
constexpr double kDetailedBalanceTol = 0.20;
constexpr double kFlatnessSpreadTol = 0.10;
constexpr double kGammaTol = 1e-10;
constexpr double kZeroThreshold = 1e-8;
constexpr double kM22Tol = 1e-10;
constexpr double kPsiTheoryTol = 0.01;
constexpr double kPsiSgdLow = 1.6, kPsiSgdHigh = 2.4;
constexpr double kBalanceTol = 1e-6;
constexpr double kMonteCarloSigmas = 3.0;
constexpr double kEnumerationTol = 1e-12;

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char b[256];
  std::snprintf(b, sizeof b, f, a);
  return b;
}

template <class... T>
std::string fmtn(const char* f, T... a) {
  char b[512];
  std::snprintf(b, sizeof b, f, a...);
  return b;
}

fs::path out_root() { return fs::current_path() / "acceptance_out"; }

expcli::RunManifest run_default(const std::string& e, const std::function<void(expcli::ExperimentConfig&)>& edit = {}) {
  expcli::ExperimentConfig c = expcli::default_config(e);
  if (edit) edit(c);
  expcli::RunOptions opt;
  opt.out = out_root() / e;
  fs::remove_all(*opt.out);
  return expcli::run_experiment(c, opt);
}

TwoLayerWeights random_reference(Index ni, Index nh, Index no, std::uint64_t seed) {
  return {random_matrix(nh, ni, seed) / std::sqrt(static_cast<double>(ni)),
          random_matrix(no, nh, seed + 1) / std::sqrt(static_cast<double>(nh))};
}

// ---------------------------------------------------------------------------

Outcome lyapunov_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_res = 0, worst_form = 0, worst_anti = 0;
  const double lambda = 0.1;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const Index n = 2 + static_cast<Index>(s % 39);
    const Matrix h = testutil::random_spd(n, 10 + s, 0.05);
    const Matrix a = random_matrix(n, n, 500 + s);
    const Matrix c = a * a.transpose() / static_cast<double>(n);
    const single_layer::StationarySolution st = single_layer::stationary_covariance(h, c, lambda);
    worst_res = std::max(worst_res, rel_err(h * st.M + st.M * h, lambda * c));
    const Matrix form = 0.5 * lambda * h.ldlt().solve(c + st.Q);
    worst_form = std::max(worst_form, rel_err(st.M, form));
    worst_anti = std::max(worst_anti, (st.Q + st.Q.transpose()).cwiseAbs().maxCoeff());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool ok = worst_res < kLyapResidualTol && worst_form < kLyapFormTol && worst_anti == 0.0 &&
                  secs < kLyapMaxSeconds;
  return {ok, fmtn("50 pairs, residual %.2e (< %.0e), M-form %.2e (< %.0e), max|Q+Q^T| %.1e (== 0), %.2fs (< %.0fs)",
                   worst_res, kLyapResidualTol, worst_form, kLyapFormTol, worst_anti, secs, kLyapMaxSeconds)};
}

Outcome isotropic_limit() {
  datagen::DataSpec s;
  s.n_input = 100;
  s.samples = 10000;
  s.label_noise_var = 0.25;
  s.seed = 21;
  const datagen::DataSet d = datagen::generate(s);
  const auto sol = single_layer::solve_regression(d);
  sgd::TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.batch_size = 10;
  cfg.steps = 20000000;
  cfg.burn_in_steps = 20000;
  cfg.record_every = 10;
  cfg.loss_every = 1000000;
  cfg.seed = 22;
  const sgd::Trajectory t = sgd::sgd_run_single(d, sol.w_star, cfg);
  const Matrix m = sgd::finalize_covariance(t).covariance;
  const Vector ev = numlin::sym_eig(m).values;
  const double ratio = ev.maxCoeff() / ev.minCoeff();
  const double target = cfg.learning_rate * s.label_noise_var / (2.0 * cfg.batch_size);
  const double mean_dev = std::abs(m.diagonal().mean() / target - 1.0);
  const Matrix c = single_layer::noise_covariance_exact(d, cfg.batch_size, true).C;
  const Vector th = numlin::sym_eig(single_layer::stationary_covariance(sol.H, c, cfg.learning_rate).M).values;
  return {ratio < kIsoMaxRatio && mean_dev < kIsoMeanTol,
          fmtn("max/min eigenvalue %.3f (< %.1f; exact theory M gives %.3f), mean diagonal %.4e vs %.4e "
               "(deviation %.3f < %.2f)",
               ratio, kIsoMaxRatio, th.maxCoeff() / th.minCoeff(), m.diagonal().mean(), target, mean_dev,
               kIsoMeanTol)};
}

nlohmann::json noise_spectrum_summary() {
  static nlohmann::json cached;
  if (cached.is_null()) {
    cached = run_default("noise-spectrum", [](auto& c) { c.extra["sgd.measure"] = "false"; }).summary;
  }
  return cached;
}

Outcome noise_spectrum() {
  const auto s = noise_spectrum_summary().at("per_ratio");
  const double dev = s.at("P/N=50").at("hessian_rel_dev_mean");
  const double dev_max = s.at("P/N=50").at("hessian_rel_dev_max");
  const double mismatch = s.at("P/N=1.1").at("spread_mismatch");
  return {dev < kHessianModeTol && mismatch > kSpreadMismatchMin,
          fmtn("P/N=50 mean per-mode deviation from Hessian limit %.3f (< %.2f; max mode %.3f), "
               "P/N=1.1 spread mismatch %.1fx (> %.0fx)",
               dev, kHessianModeTol, dev_max, mismatch, kSpreadMismatchMin)};
}

Outcome detailed_balance() {
  const auto s = noise_spectrum_summary().at("per_ratio");
  const double d2 = s.at("P/N=2").at("db_rel_dev_mean");
  const double d11 = s.at("P/N=1.1").at("db_rel_dev_mean");
  const double d50 = s.at("P/N=50").at("db_rel_dev_mean");
  return {d2 < kDetailedBalanceTol && d11 > kDetailedBalanceTol && d11 > d2,
          fmtn("mean per-mode deviation full vs detailed balance: P/N=50 %.4f, P/N=2 %.3f (< %.2f), "
               "P/N=1.1 %.3f (> %.2f); max mode at P/N=2 %.3f",
               d50, d2, kDetailedBalanceTol, d11, kDetailedBalanceTol,
               s.at("P/N=2").at("db_rel_dev_max").get<double>())};
}

Outcome double_descent() {
  const auto m = run_default("weight-fluct");
  const Index peak = m.summary.at("peak_N");
  const bool rise = m.summary.at("rising_before_peak"), fall = m.summary.at("falling_after_peak");
  const Index p = expcli::default_config("weight-fluct").data.samples;
  return {peak == p && rise && fall,
          fmtn("test-loss peak at N=%ld (P=%ld), rising over the window before: %s, falling after: %s",
               static_cast<long>(peak), static_cast<long>(p), rise ? "yes" : "no", fall ? "yes" : "no")};
}

Outcome flatness_isotropy() {
  const auto m = run_default("loss-pert-1l");
  const double rms = m.summary.at("rms_relative_deviation");
  return {rms < kFlatnessSpreadTol,
          fmtn("P/N=20, mean dL/theta^2 %.5f vs sigma_x^2/2 = %.5f, rms relative deviation %.3f (< %.2f), "
               "max %.3f",
               m.summary.at("mean_delta_over_theta2").get<double>(), m.summary.at("prediction").get<double>(), rms,
               kFlatnessSpreadTol, m.summary.at("max_relative_deviation").get<double>())};
}

Outcome gamma_spectrum() {
  double worst = 0;
  int bad_zero = 0;
  for (int c = 0; c < 100; ++c) {
    Rng rng(100 + static_cast<std::uint64_t>(c), Purpose::monte_carlo);
    const Index ni = 1 + static_cast<Index>(rng.index(8));
    const Index nh = 1 + static_cast<Index>(rng.index(static_cast<std::uint64_t>(ni)));
    const Index no = 1 + static_cast<Index>(rng.index(static_cast<std::uint64_t>(nh)));
    const auto r = two_layer::reference_svd(random_reference(ni, nh, no, 2000 + static_cast<std::uint64_t>(c)));
    const double x_var = 0.5 + rng.uniform();
    const Vector dense = numlin::sym_eig(two_layer::drift_diffusion(r, x_var, 1.0).Gamma).values;
    const Vector ana = two_layer::analytic_gamma_spectrum(r, x_var);
    worst = std::max(worst, (dense - ana).cwiseAbs().maxCoeff() / std::max(1.0, ana.maxCoeff()));
    Index zeros = 0;
    for (Index k = 0; k < dense.size(); ++k) zeros += std::abs(dense(k)) < kZeroThreshold * dense.cwiseAbs().maxCoeff();
    bad_zero += zeros != nh * no;
  }
  return {worst < kGammaTol && bad_zero == 0,
          fmtn("100 references, max eigenvalue error %.2e (< %.0e), zero-multiplicity mismatches %d", worst, kGammaTol,
               bad_zero)};
}

Outcome m22_equivalence() {
  double worst = 0;
  const double lambda = 0.1, y_var = 0.7;
  const int batch = 10;
  for (int c = 0; c < 100; ++c) {
    Rng rng(300 + static_cast<std::uint64_t>(c), Purpose::monte_carlo);
    const Index ni = 1 + static_cast<Index>(rng.index(8));
    const Index nh = 1 + static_cast<Index>(rng.index(static_cast<std::uint64_t>(ni)));
    const double x_var = 0.5 + rng.uniform();
    const auto r = two_layer::reference_svd(random_reference(ni, nh, 1, 4000 + static_cast<std::uint64_t>(c)));
    const auto dd = two_layer::drift_diffusion(r, x_var, lambda * x_var * y_var / batch);
    const Matrix half = 0.5 * numlin::pseudoinverse(dd.Gamma, 1e-10) * dd.Delta;
    const Matrix block = half.bottomRightCorner(nh, nh);
    const Vector closed = two_layer::m22_closed_form(r, lambda, y_var, batch).exact;
    worst = std::max(worst, rel_err(block, Matrix(closed.asDiagonal())));
  }
  return {worst < kM22Tol, fmtn("100 references, max relative error %.2e (< %.0e)", worst, kM22Tol)};
}

Outcome ivfr() {
  const auto m = run_default("ivfr");
  const double th = m.summary.at("psi_theory_approx");
  const double psi = m.summary.at("psi_fit");
  const double se = m.summary.at("psi_stderr");
  return {std::abs(th - 2.0) <= kPsiTheoryTol && psi >= kPsiSgdLow && psi <= kPsiSgdHigh,
          fmtn("theory psi %.4f (2 +- %.2f; exact-form psi %.3f), SGD psi %.3f +- %.3f over %d modes with "
               "D1 < D2 (in [%.1f, %.1f]; all modes %.3f)",
               th, kPsiTheoryTol, m.summary.at("psi_theory_exact").get<double>(), psi, se,
               m.summary.at("modes_used").get<int>(), kPsiSgdLow, kPsiSgdHigh,
               m.summary.at("psi_all_modes").get<double>())};
}

Outcome balancedness() {
  datagen::DataSpec s;
  s.n_input = 10;
  s.samples = 500;
  s.x_var = 1.0;
  s.label_noise_var = 0.25;
  s.covariance_kind = datagen::CovarianceKind::whitened;
  s.seed = 41;
  const datagen::DataSet d = datagen::generate(s);
  const TwoLayerWeights w0 = random_reference(10, 6, 1, 42);
  two_layer::FlowOptions opt;
  opt.record_every = 100;
  const auto r = two_layer::run_to_quasi_stationary(w0, d, 0.01, 1000000, opt);
  const Matrix b0 = two_layer::balancedness(w0);
  double worst = 0;
  for (const auto& w : r.snapshots) worst = std::max(worst, (two_layer::balancedness(w) - b0).norm());
  worst = std::max(worst, (two_layer::balancedness(r.final) - b0).norm());
  return {r.quasi_stationary && worst < kBalanceTol,
          fmtn("RK4 flow, %ld steps to quasi-stationary (%s), max ||B(t) - B(0)||_F %.2e (< %.0e)",
               r.steps_taken, r.quasi_stationary ? "reached" : "not reached", worst, kBalanceTol)};
}

Outcome noise_covariance_monte_carlo() {
  const Index ni = 4, nh = 3;
  const int batch = 20;
  const double lambda = 0.1;
  datagen::DataSpec s;
  s.n_input = ni;
  s.samples = 10000;
  s.x_var = 1.0;
  s.teacher_var = 0.0;
  s.label_noise_var = 1.0;
  s.covariance_kind = datagen::CovarianceKind::whitened;
  s.seed = 51;
  const datagen::DataSet d = datagen::generate(s);
  // Reference on the solution manifold, W2 W1 = w*.
  const Matrix ws = two_layer::product_solution(d);
  const double norm = ws.norm();
  const Vector q = numlin::svd(random_matrix(nh, nh, 52), numlin::SvdMode::full).U.col(0);
  const Matrix proj = Matrix::Identity(nh, nh) - q * q.transpose();
  TwoLayerWeights w;
  w.W1 = std::sqrt(norm) * q * (ws / norm) + 0.3 * proj * random_matrix(nh, ni, 53);
  w.W2 = std::sqrt(norm) * q.transpose();
  const two_layer::NoiseStats st = two_layer::noise_stats(d, lambda, batch);
  const Matrix closed = two_layer::sgf_noise_covariances(w, st).joint();
  // Fresh mini-batches from the Gaussian population with the dataset's moments.
  const Matrix prod = w.W2 * w.W1;
  const double sx = std::sqrt(st.x_var), sy = std::sqrt(st.y_sq);
  Rng rng(54, Purpose::monte_carlo);
  const long draws = 100000;
  const Index n = closed.rows();
  Matrix s1 = Matrix::Zero(n, n), s2 = Matrix::Zero(n, n);
  Vector x(ni), r(n);
  for (long k = 0; k < draws; ++k) {
    Matrix e = st.x_var * prod;
    for (int b = 0; b < batch; ++b) {
      for (Index i = 0; i < ni; ++i) x(i) = sx * rng.normal();
      const double y = sy * rng.normal();
      e += ((y - (prod * x)(0)) / batch) * x.transpose();
    }
    r << numlin::vec(std::sqrt(lambda) * w.W2.transpose() * e), numlin::vec(std::sqrt(lambda) * e * w.W1.transpose());
    const Matrix o = r * r.transpose();
    s1 += o;
    s2 += o.cwiseProduct(o);
  }
  s1 /= static_cast<double>(draws);
  s2 /= static_cast<double>(draws);
  double worst_z = 0;
  int outside = 0, entries = 0;
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i <= j; ++i) {
      const double se = std::sqrt(std::max(s2(i, j) - s1(i, j) * s1(i, j), 0.0) / static_cast<double>(draws));
      if (!(se > 0.0)) continue;
      const double z = std::abs(s1(i, j) - closed(i, j)) / se;
      worst_z = std::max(worst_z, z);
      outside += z > kMonteCarloSigmas;
      ++entries;
    }
  return {outside == 0, fmtn("%ld draws, %d distinct entries, %d beyond %.0f std-errors, max |z| %.2f", draws, entries,
                             outside, kMonteCarloSigmas, worst_z)};
}

Outcome minibatch_enumeration() {
  Matrix g(1, 3);
  g << 1.0, 2.0, 3.0;
  const double toy = sgd::enumerate_gradient_noise(g, 1, true)(0, 0);
  double worst = 0;
  int cases = 0;
  for (Index p = 2; p <= 7; ++p)
    for (int s = 1; s <= p; ++s) {
      const Matrix gr = random_matrix(3, p, 60 + static_cast<std::uint64_t>(10 * p + s));
      const Matrix with = sgd::enumerate_gradient_noise(gr, s, true);
      const Matrix without = sgd::enumerate_gradient_noise(gr, s, false);
      const double scale = std::max(1.0, with.cwiseAbs().maxCoeff());
      const double pref = static_cast<double>(p - s) / (static_cast<double>(s) * static_cast<double>(p - 1));
      const Matrix base = s * with;
      worst = std::max({worst, (with - sgd::minibatch_covariance(gr, s, true)).cwiseAbs().maxCoeff() / scale,
                        (without - sgd::minibatch_covariance(gr, s, false)).cwiseAbs().maxCoeff() / scale,
                        (without - pref * base).cwiseAbs().maxCoeff() / scale});
      ++cases;
    }
  return {std::abs(toy - 2.0 / 3.0) < 1e-15 && worst < kEnumerationTol,
          fmtn("P=3 toy %.15f (2/3), %d enumerable cases, max deviation from (P-S)/(S(P-1)) relation %.2e (< %.0e)",
               toy, cases, worst, kEnumerationTol)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"lyapunov-identity", lyapunov_suite},
      {"isotropic-limit", isotropic_limit},
      {"noise-spectrum-anisotropy", noise_spectrum},
      {"detailed-balance-crossover", detailed_balance},
      {"double-descent", double_descent},
      {"single-layer-flatness", flatness_isotropy},
      {"gamma-spectrum", gamma_spectrum},
      {"m22-equivalence", m22_equivalence},
      {"ivfr", ivfr},
      {"balancedness", balancedness},
      {"noise-covariance-monte-carlo", noise_covariance_monte_carlo},
      {"minibatch-enumeration", minibatch_enumeration},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o{false, ""};
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
