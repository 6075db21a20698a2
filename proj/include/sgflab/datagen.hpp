#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "sgflab/csv.hpp"
#include "sgflab/numlin.hpp"
#include "sgflab/rng.hpp"

namespace sgflab::datagen {

enum class CovarianceKind { iid, wishart, whitened };

inline std::string to_string(CovarianceKind k) {
  switch (k) {
    case CovarianceKind::iid: return "iid";
    case CovarianceKind::wishart: return "wishart";
    case CovarianceKind::whitened: return "whitened";
  }
  return "iid";
}

inline CovarianceKind covariance_kind_from(const std::string& s) {
  if (s == "iid") return CovarianceKind::iid;
  if (s == "wishart") return CovarianceKind::wishart;
  if (s == "whitened") return CovarianceKind::whitened;
  throw InvalidInput("unknown covariance kind: " + s);
}

struct DataSpec {
  Index n_input = 1;
  Index n_output = 1;
  Index samples = 1;
  double x_mean = 0.0;
  std::optional<double> x_var;  // unset means 1/N
  double teacher_var = 1.0;
  double label_noise_var = 0.0;
  CovarianceKind covariance_kind = CovarianceKind::iid;
  bool random_labels = false;
  std::uint64_t seed = 0;

  double input_variance() const { return x_var ? *x_var : 1.0 / static_cast<double>(n_input); }

  void validate() const {
    if (n_input < 1 || n_output < 1 || samples < 1) {
      throw InvalidInput("data dimensions must be positive");
    }
    if (!(input_variance() > 0.0)) throw InvalidInput("x_var must be positive");
    if (!(label_noise_var >= 0.0)) throw InvalidInput("label_noise_var must be non-negative");
    if (!(teacher_var >= 0.0)) throw InvalidInput("teacher_var must be non-negative");
  }
};

// Columns of X are samples.
struct DataSet {
  Matrix X;
  Matrix Y;
  Matrix u;
  Matrix eps;
  DataSpec spec;

  Index n_input() const { return X.rows(); }
  Index n_output() const { return Y.rows(); }
  Index samples() const { return X.cols(); }
  Matrix sigma_xx() const { return X * X.transpose() / static_cast<double>(samples()); }
  Matrix sigma_yx() const { return Y * X.transpose() / static_cast<double>(samples()); }
};

namespace detail {

inline Matrix normal_matrix(Index rows, Index cols, double mean, double sd, Rng& rng) {
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = rng.normal(mean, sd);
  return m;
}

inline Matrix wishart_cholesky(const DataSpec& spec) {
  Rng rng(spec.seed, Purpose::wishart);
  const Index n = spec.n_input;
  const Matrix g = normal_matrix(n, n, 0.0, 1.0, rng);
  const Matrix sigma = spec.input_variance() * g * g.transpose() / static_cast<double>(n);
  Eigen::LLT<Matrix> llt(sigma);
  if (llt.info() != Eigen::Success) throw InfeasibleSpec("Wishart covariance is not positive definite");
  return llt.matrixL();
}

inline Matrix sample_inputs(const DataSpec& spec, Index samples, Purpose purpose) {
  Rng rng(spec.seed, purpose);
  const double sd = std::sqrt(spec.input_variance());
  if (spec.covariance_kind == CovarianceKind::wishart) {
    const Matrix l = wishart_cholesky(spec);
    Matrix z = normal_matrix(spec.n_input, samples, 0.0, 1.0, rng);
    return (l * z).array() + spec.x_mean;
  }
  return normal_matrix(spec.n_input, samples, spec.x_mean, sd, rng);
}

}  // namespace detail

// Population covariance of the inputs (second moment about x_mean).
inline Matrix population_covariance(const DataSpec& spec) {
  if (spec.covariance_kind == CovarianceKind::wishart) {
    const Matrix l = detail::wishart_cholesky(spec);
    return l * l.transpose();
  }
  return spec.input_variance() * Matrix::Identity(spec.n_input, spec.n_input);
}

inline DataSet generate(const DataSpec& spec) {
  spec.validate();
  if (spec.covariance_kind == CovarianceKind::whitened && spec.samples < spec.n_input) {
    throw InfeasibleSpec("whitened inputs require P >= N");
  }
  DataSet d;
  d.spec = spec;
  d.X = detail::sample_inputs(spec, spec.samples, Purpose::inputs);
  if (spec.covariance_kind == CovarianceKind::whitened) {
    const double p = static_cast<double>(spec.samples);
    const Matrix s = d.X * d.X.transpose() / (p * spec.input_variance());
    d.X = numlin::spd_inv_sqrt(s) * d.X;
  }
  Rng teacher(spec.seed, Purpose::teacher);
  d.u = spec.random_labels
            ? Matrix::Zero(spec.n_output, spec.n_input)
            : detail::normal_matrix(spec.n_output, spec.n_input, 0.0, std::sqrt(spec.teacher_var), teacher);
  Rng noise(spec.seed, Purpose::label_noise);
  d.eps = detail::normal_matrix(spec.n_output, spec.samples, 0.0, std::sqrt(spec.label_noise_var), noise);
  d.Y = d.u * d.X + d.eps;
  return d;
}

// Held-out samples from the same teacher and input distribution. Whitening is a
// property of the training sample, so whitened specs draw iid test inputs.
inline DataSet generate_test_set(const DataSet& train, Index samples) {
  DataSpec spec = train.spec;
  spec.samples = samples;
  if (spec.covariance_kind == CovarianceKind::whitened) spec.covariance_kind = CovarianceKind::iid;
  DataSet d;
  d.spec = spec;
  d.X = detail::sample_inputs(spec, samples, Purpose::test_inputs);
  d.u = train.u;
  Rng noise(spec.seed, Purpose::test_noise);
  d.eps = detail::normal_matrix(spec.n_output, samples, 0.0, std::sqrt(spec.label_noise_var), noise);
  d.Y = d.u * d.X + d.eps;
  return d;
}

// Literal Marchenko-Pastur expression sigma_x^2 (sqrt(P/N) - 1)^2. This is the
// lower edge of the spectrum of X X^T / N.
inline double mp_smallest_eigenvalue(const DataSpec& spec) {
  if (spec.covariance_kind != CovarianceKind::iid) {
    throw InvalidInput("mp_smallest_eigenvalue requires iid inputs");
  }
  if (spec.samples < spec.n_input) throw InvalidInput("mp_smallest_eigenvalue requires P >= N");
  const double r = std::sqrt(static_cast<double>(spec.samples) / static_cast<double>(spec.n_input));
  return spec.input_variance() * (r - 1.0) * (r - 1.0);
}

// Lower and upper spectral edges of H = X X^T / P for iid inputs.
inline double mp_hessian_lower_edge(const DataSpec& spec) {
  const double q = static_cast<double>(spec.n_input) / static_cast<double>(spec.samples);
  const double a = 1.0 - std::sqrt(q);
  return q >= 1.0 ? 0.0 : spec.input_variance() * a * a;
}

inline double mp_hessian_upper_edge(const DataSpec& spec) {
  const double q = static_cast<double>(spec.n_input) / static_cast<double>(spec.samples);
  const double a = 1.0 + std::sqrt(q);
  return spec.input_variance() * a * a;
}

struct ProjectorStats {
  double mean_diag = 0.0;
  double var_all = 0.0;
  double var_offdiag = 0.0;
  double max_idempotence_error = 0.0;
  double mean_trace = 0.0;
};

// Statistics of the P x P projector X^+ X for iid inputs with variance 1/N,
// pooled over reps realizations.
inline ProjectorStats projector_stats(Index n, Index p, std::uint64_t seed, int reps) {
  if (p <= n) throw InvalidInput("projector_stats requires P > N");
  if (reps < 1) throw InvalidInput("projector_stats requires reps >= 1");
  ProjectorStats out;
  const double pp = static_cast<double>(p);
  for (int r = 0; r < reps; ++r) {
    Rng rng(seed, Purpose::inputs, static_cast<std::uint64_t>(r));
    const Matrix x = detail::normal_matrix(n, p, 0.0, 1.0 / std::sqrt(static_cast<double>(n)), rng);
    const Matrix proj = numlin::pseudoinverse(x) * x;
    const double mean_all = proj.mean();
    const double diag_sum = proj.diagonal().sum();
    const double off_mean = (proj.sum() - diag_sum) / (pp * pp - pp);
    const double var_all = (proj.array() - mean_all).square().mean();
    const double sq_off = (proj.array() - off_mean).square().sum() -
                          (proj.diagonal().array() - off_mean).square().sum();
    out.mean_diag += diag_sum / pp;
    out.mean_trace += diag_sum;
    out.var_all += var_all;
    out.var_offdiag += sq_off / (pp * pp - pp);
    out.max_idempotence_error =
        std::max(out.max_idempotence_error, numlin::max_abs(proj * proj - proj));
  }
  out.mean_diag /= reps;
  out.mean_trace /= reps;
  out.var_all /= reps;
  out.var_offdiag /= reps;
  return out;
}

inline nlohmann::json spec_to_json(const DataSpec& s) {
  nlohmann::json j;
  j["n_input"] = s.n_input;
  j["n_output"] = s.n_output;
  j["samples"] = s.samples;
  j["x_mean"] = s.x_mean;
  j["x_var"] = s.input_variance();
  j["teacher_var"] = s.teacher_var;
  j["label_noise_var"] = s.label_noise_var;
  j["covariance_kind"] = to_string(s.covariance_kind);
  j["random_labels"] = s.random_labels;
  j["seed"] = s.seed;
  return j;
}

inline DataSpec spec_from_json(const nlohmann::json& j) {
  DataSpec s;
  s.n_input = j.at("n_input").get<Index>();
  s.n_output = j.at("n_output").get<Index>();
  s.samples = j.at("samples").get<Index>();
  s.x_mean = j.at("x_mean").get<double>();
  s.x_var = j.at("x_var").get<double>();
  s.teacher_var = j.at("teacher_var").get<double>();
  s.label_noise_var = j.at("label_noise_var").get<double>();
  s.covariance_kind = covariance_kind_from(j.at("covariance_kind").get<std::string>());
  s.random_labels = j.at("random_labels").get<bool>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    nlohmann::json r = nlohmann::json::array();
    for (Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(r);
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const Index rows = static_cast<Index>(j.size());
  const Index cols = rows ? static_cast<Index>(j[0].size()) : 0;
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index k = 0; k < cols; ++k) m(i, k) = j[i][k].get<double>();
  return m;
}

// One sample per line, one column per feature.
inline void write_samples(const std::filesystem::path& path, const Matrix& m, const char* prefix) {
  std::vector<std::string> cols;
  for (Index i = 0; i < m.rows(); ++i) cols.push_back(prefix + std::to_string(i));
  csv::Writer w(path, cols);
  std::vector<std::string> cells(static_cast<std::size_t>(m.rows()));
  for (Index mu = 0; mu < m.cols(); ++mu) {
    for (Index i = 0; i < m.rows(); ++i) cells[static_cast<std::size_t>(i)] = csv::cell(m(i, mu));
    w.row_strings(cells);
  }
}

inline Matrix read_samples(const std::filesystem::path& path) {
  const csv::Table t = csv::read(path);
  Matrix m(static_cast<Index>(t.columns.size()), static_cast<Index>(t.rows.size()));
  for (std::size_t mu = 0; mu < t.rows.size(); ++mu)
    for (std::size_t i = 0; i < t.columns.size(); ++i)
      m(static_cast<Index>(i), static_cast<Index>(mu)) = std::stod(t.rows[mu][i]);
  return m;
}

}  // namespace detail

// Writes X.csv, Y.csv and meta.json into dir; returns the written paths.
inline std::vector<std::filesystem::path> write_csv_bundle(const DataSet& d,
                                                           const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::write_samples(dir / "X.csv", d.X, "x");
  detail::write_samples(dir / "Y.csv", d.Y, "y");
  nlohmann::json meta;
  meta["spec"] = spec_to_json(d.spec);
  meta["shape"] = {{"X", {d.X.rows(), d.X.cols()}}, {"Y", {d.Y.rows(), d.Y.cols()}}};
  meta["u"] = detail::matrix_to_json(d.u);
  meta["eps"] = detail::matrix_to_json(d.eps);
  std::ofstream(dir / "meta.json", std::ios::binary) << meta.dump(2) << '\n';
  return {dir / "X.csv", dir / "Y.csv", dir / "meta.json"};
}

inline DataSet read_csv_bundle(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw Error("io", "missing meta.json in " + dir.string());
  const nlohmann::json meta = nlohmann::json::parse(in);
  DataSet d;
  d.spec = spec_from_json(meta.at("spec"));
  d.X = detail::read_samples(dir / "X.csv");
  d.Y = detail::read_samples(dir / "Y.csv");
  d.u = detail::matrix_from_json(meta.at("u"));
  d.eps = detail::matrix_from_json(meta.at("eps"));
  return d;
}

}  // namespace sgflab::datagen
