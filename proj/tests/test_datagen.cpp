#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "sgflab/datagen.hpp"

using namespace sgflab;
using datagen::CovarianceKind;
using datagen::DataSpec;

namespace {

DataSpec base_spec(Index n, Index p, std::uint64_t seed = 7) {
  DataSpec s;
  s.n_input = n;
  s.samples = p;
  s.seed = seed;
  return s;
}

double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sx += x[k];
    sy += y[k];
    sxx += x[k] * x[k];
    sxy += x[k] * y[k];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace

TEST(Generate, NoiselessTeacherFitsExactly) {
  DataSpec s = base_spec(10, 30);
  const auto d = datagen::generate(s);
  EXPECT_EQ((d.Y - d.u * d.X).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(d.eps.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Generate, StoredFieldsReproduceTargets) {
  DataSpec s = base_spec(6, 20);
  s.label_noise_var = 0.3;
  const auto d = datagen::generate(s);
  EXPECT_EQ(d.Y, d.u * d.X + d.eps);
}

TEST(Generate, DiagonalSecondMomentMatchesVariance) {
  const auto d = datagen::generate(base_spec(100, 2000));
  const Matrix h = d.sigma_xx();
  const double mean = h.diagonal().mean();
  // Each diagonal entry averages P squared N(0, 1/N) variates: variance 2 sigma^4 / P.
  const double sigma2 = 0.01;
  const double se = std::sqrt(2.0 * sigma2 * sigma2 / 2000.0 / 100.0);
  EXPECT_NEAR(mean, sigma2, 3.0 * se);
}

TEST(Generate, WhitenedIsExact) {
  DataSpec s = base_spec(10, 50);
  s.covariance_kind = CovarianceKind::whitened;
  const auto d = datagen::generate(s);
  EXPECT_LT((d.sigma_xx() - 0.1 * Matrix::Identity(10, 10)).norm(), 1e-10);
}

TEST(Generate, WhitenedNeedsEnoughSamples) {
  DataSpec s = base_spec(10, 5);
  s.covariance_kind = CovarianceKind::whitened;
  EXPECT_THROW(datagen::generate(s), InfeasibleSpec);
}

TEST(Generate, RandomLabelsZeroTeacher) {
  DataSpec s = base_spec(5, 40);
  s.random_labels = true;
  s.label_noise_var = 1.0;
  const auto d = datagen::generate(s);
  EXPECT_EQ(d.u.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(d.Y, d.eps);
}

TEST(Generate, BitIdenticalUnderSameSeed) {
  DataSpec s = base_spec(12, 40, 99);
  s.label_noise_var = 0.2;
  s.covariance_kind = CovarianceKind::wishart;
  const auto a = datagen::generate(s);
  const auto b = datagen::generate(s);
  EXPECT_EQ(a.X, b.X);
  EXPECT_EQ(a.Y, b.Y);
  s.seed = 100;
  EXPECT_NE(datagen::generate(s).X, a.X);
}

TEST(Generate, WishartColumnsFollowPopulationCovariance) {
  DataSpec s = base_spec(5, 40000, 3);
  s.covariance_kind = CovarianceKind::wishart;
  const auto d = datagen::generate(s);
  const Matrix sigma = datagen::population_covariance(s);
  EXPECT_LT((d.sigma_xx() - sigma).norm() / sigma.norm(), 0.05);
}

TEST(Generate, TestSetSharesTeacher) {
  DataSpec s = base_spec(5, 40);
  s.label_noise_var = 0.1;
  const auto d = datagen::generate(s);
  const auto t = datagen::generate_test_set(d, 100);
  EXPECT_EQ(t.u, d.u);
  EXPECT_EQ(t.samples(), 100);
  EXPECT_NE(t.X.leftCols(40), d.X);
}

TEST(MarchenkoPastur, ThresholdAndQuarterRatio) {
  DataSpec s = base_spec(50, 50);
  EXPECT_DOUBLE_EQ(datagen::mp_smallest_eigenvalue(s), 0.0);
  s.samples = 200;
  s.x_var = 1.0;
  EXPECT_DOUBLE_EQ(datagen::mp_smallest_eigenvalue(s), 1.0);
}

TEST(MarchenkoPastur, EmpiricalHessianEdge) {
  DataSpec s = base_spec(200, 800, 11);
  const auto d = datagen::generate(s);
  const double wmin = numlin::sym_eig(d.sigma_xx()).values(0);
  // The literal expression is the edge of X X^T / N; the Hessian X X^T / P
  // differs by the factor N/P.
  const double scaled = datagen::mp_smallest_eigenvalue(s) * 200.0 / 800.0;
  EXPECT_NEAR(wmin, scaled, 0.15 * scaled);
  EXPECT_NEAR(datagen::mp_hessian_lower_edge(s), scaled, 1e-15);
  const double wmin_n = numlin::sym_eig(d.X * d.X.transpose() / 200.0).values(0);
  EXPECT_NEAR(wmin_n, datagen::mp_smallest_eigenvalue(s), 0.15 * datagen::mp_smallest_eigenvalue(s));
}

TEST(ProjectorStats, MeanDiagonalIsNOverP) {
  const auto st = datagen::projector_stats(50, 500, 1, 2);
  EXPECT_NEAR(st.mean_diag, 0.1, 0.01);
  EXPECT_NEAR(st.mean_trace, 50.0, 1e-6);
  EXPECT_LT(st.max_idempotence_error, 1e-8);
}

TEST(ProjectorStats, VarianceScalingWithSamplingRatio) {
  const Index n = 50;
  std::vector<double> ls, lall, loff;
  for (int s : {2, 4, 8, 16}) {
    const auto st = datagen::projector_stats(n, s * n, 5, 2);
    ls.push_back(std::log(static_cast<double>(s)));
    lall.push_back(std::log(st.var_all));
    loff.push_back(std::log(st.var_offdiag));
    // Sum of squared entries equals tr(P^2) = N, so the pooled variance is
    // N/P^2 minus the squared mean entry.
    const double p = static_cast<double>(s * n);
    EXPECT_LE(st.var_all, n / (p * p));
    EXPECT_GE(st.var_all, 0.98 * n / (p * p));
  }
  const double slope_off = fit_slope(ls, loff);
  EXPECT_NEAR(slope_off, -1.8, 0.2);
  EXPECT_NEAR(fit_slope(ls, lall), -2.0, 0.05);
}

TEST(ProjectorStats, RequiresOversampling) {
  EXPECT_THROW(datagen::projector_stats(10, 10, 1, 1), InvalidInput);
}

TEST(CsvBundle, RoundTripsExactly) {
  DataSpec s = base_spec(4, 9);
  s.label_noise_var = 0.5;
  const auto d = datagen::generate(s);
  const auto dir = std::filesystem::temp_directory_path() / "sgflab_bundle_test";
  std::filesystem::remove_all(dir);
  const auto files = datagen::write_csv_bundle(d, dir);
  EXPECT_EQ(files.size(), 3u);
  const auto back = datagen::read_csv_bundle(dir);
  EXPECT_EQ(back.X, d.X);
  EXPECT_EQ(back.Y, d.Y);
  EXPECT_EQ(back.u, d.u);
  EXPECT_EQ(back.Y, back.u * back.X + back.eps);
  EXPECT_EQ(back.spec.seed, s.seed);
  std::filesystem::remove_all(dir);
}
