#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sgflab/csv.hpp"
#include "sgflab/datagen.hpp"
#include "sgflab/numlin.hpp"
#include "sgflab/rng.hpp"
#include "sgflab/single_layer.hpp"
#include "sgflab/two_layer.hpp"

namespace sgflab::sgd {

using datagen::DataSet;
using two_layer::TwoLayerWeights;

struct TrainConfig {
  double learning_rate = 0.1;
  int batch_size = 1;
  bool replacement = true;
  long steps = 1;
  long burn_in_steps = 0;
  long record_every = 10;
  std::uint64_t seed = 0;
  bool keep_snapshots = false;
  long loss_every = 0;  // 0: about 200 loss evaluations per run

  void validate(Index samples) const {
    if (!(learning_rate > 0.0)) throw InvalidInput("learning_rate must be positive");
    if (batch_size < 1) throw InvalidInput("batch_size must be positive");
    if (!replacement && batch_size > samples) throw InvalidInput("batch_size exceeds P without replacement");
    if (steps < 1) throw InvalidInput("steps must be positive");
    if (burn_in_steps < 0) throw InvalidInput("burn_in_steps must be non-negative");
    if (record_every < 1) throw InvalidInput("record_every must be positive");
    if (loss_every < 0) throw InvalidInput("loss_every must be non-negative");
  }

  long loss_interval() const { return loss_every > 0 ? loss_every : std::max(1L, steps / 200); }
};

// Draws mini-batch indices. Without replacement a partial Fisher-Yates shuffle
// of a persistent permutation gives S distinct uniformly chosen indices.
class MinibatchSampler {
 public:
  MinibatchSampler(Index samples, int batch_size, bool replacement)
      : p_(samples), s_(batch_size), replacement_(replacement) {
    if (samples < 1 || batch_size < 1) throw InvalidInput("sampler requires P >= 1 and S >= 1");
    if (!replacement && batch_size > samples) throw InvalidInput("batch_size exceeds P without replacement");
    if (!replacement) {
      perm_.resize(static_cast<std::size_t>(samples));
      std::iota(perm_.begin(), perm_.end(), Index{0});
    }
    out_.resize(static_cast<std::size_t>(batch_size));
  }

  const std::vector<Index>& next(Rng& rng) {
    const auto p = static_cast<std::uint64_t>(p_);
    if (replacement_) {
      for (auto& i : out_) i = static_cast<Index>(rng.index(p));
      return out_;
    }
    for (int k = 0; k < s_; ++k) {
      const auto j = static_cast<std::size_t>(k) + rng.index(p - static_cast<std::uint64_t>(k));
      std::swap(perm_[static_cast<std::size_t>(k)], perm_[j]);
      out_[static_cast<std::size_t>(k)] = perm_[static_cast<std::size_t>(k)];
    }
    return out_;
  }

 private:
  Index p_;
  int s_;
  bool replacement_;
  std::vector<Index> perm_;
  std::vector<Index> out_;
};

inline std::vector<Index> sample_minibatch(Index samples, int batch_size, bool replacement, Rng& rng) {
  MinibatchSampler s(samples, batch_size, replacement);
  return s.next(rng);
}

// Single-pass mean and covariance (Welford), mergeable across workers.
class Accumulator {
 public:
  Accumulator() = default;
  explicit Accumulator(Index dim) : mean_(Vector::Zero(dim)), m2_(Matrix::Zero(dim, dim)) {}

  void add(const Vector& x) {
    if (mean_.size() == 0 && n_ == 0) *this = Accumulator(x.size());
    if (x.size() != mean_.size()) throw ShapeMismatch("accumulator dimension mismatch");
    ++n_;
    const Vector d = x - mean_;
    mean_ += d / static_cast<double>(n_);
    m2_.selfadjointView<Eigen::Lower>().rankUpdate(d, 1.0 - 1.0 / static_cast<double>(n_));
  }

  void merge(const Accumulator& o) {
    if (o.n_ == 0) return;
    if (n_ == 0) {
      *this = o;
      return;
    }
    if (o.mean_.size() != mean_.size()) throw ShapeMismatch("accumulator dimension mismatch");
    const double na = static_cast<double>(n_), nb = static_cast<double>(o.n_), n = na + nb;
    const Vector d = o.mean_ - mean_;
    mean_ += d * (nb / n);
    m2_ += o.m2_;
    m2_.selfadjointView<Eigen::Lower>().rankUpdate(d, na * nb / n);
    n_ += o.n_;
  }

  long count() const { return n_; }
  Index dim() const { return mean_.size(); }
  const Vector& mean() const { return mean_; }

  // Unbiased covariance, n >= 2.
  Matrix covariance() const {
    if (n_ < 2) throw InsufficientSamples("covariance needs at least 2 samples, have " + std::to_string(n_));
    Matrix c = m2_.selfadjointView<Eigen::Lower>();
    return c / static_cast<double>(n_ - 1);
  }

 private:
  long n_ = 0;
  Vector mean_;
  Matrix m2_;  // lower triangle holds the centred second moment
};

enum class ModelKind { single, two_layer };

// Parts of the two-layer state entering snapshots and the accumulator.
enum class Scope { both, w1, w2 };

struct Trajectory {
  ModelKind kind = ModelKind::single;
  Scope scope = Scope::both;
  std::vector<long> snapshot_steps;
  std::vector<Vector> snapshots;
  Accumulator stats;
  std::vector<long> loss_steps;
  std::vector<double> train_loss;
  std::vector<double> test_loss;  // NaN without a test set
  Vector final_w;
  TwoLayerWeights final_weights;
  TwoLayerWeights mean_weights;  // two-layer runs: mean over recorded steps
  long steps_run = 0;
};

struct SnapshotMoments {
  Vector mean;
  Matrix covariance;
  long count = 0;
};

inline SnapshotMoments finalize_covariance(const Trajectory& t, long min_samples = 10) {
  if (t.stats.count() < min_samples) {
    throw InsufficientSamples("need at least " + std::to_string(min_samples) + " post-burn-in snapshots, have " +
                              std::to_string(t.stats.count()));
  }
  return {t.stats.mean(), numlin::symmetrized(t.stats.covariance()), t.stats.count()};
}

inline SnapshotMoments finalize_covariance(const std::vector<Vector>& snapshots, long min_samples = 10) {
  Trajectory t;
  for (const auto& s : snapshots) t.stats.add(s);
  return finalize_covariance(t, min_samples);
}

// Lag-1 autocorrelation and effective sample size n (1 - rho) / (1 + rho).
inline double lag1_autocorrelation(const std::vector<double>& x) {
  const std::size_t n = x.size();
  if (n < 3) throw InsufficientSamples("autocorrelation needs at least 3 samples");
  const double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  double c0 = 0, c1 = 0;
  for (std::size_t k = 0; k < n; ++k) {
    c0 += (x[k] - m) * (x[k] - m);
    if (k + 1 < n) c1 += (x[k] - m) * (x[k + 1] - m);
  }
  return c0 > 0.0 ? c1 / c0 : 0.0;
}

inline double effective_sample_size(const std::vector<double>& x) {
  const double rho = std::clamp(lag1_autocorrelation(x), -0.999, 0.999);
  return static_cast<double>(x.size()) * (1.0 - rho) / (1.0 + rho);
}

struct VarianceEstimate {
  double value = 0.0;
  double std_error = 0.0;
  double ess = 0.0;
};

// Variance of a scalar series with a Gaussian standard error var * sqrt(2 / ESS).
inline VarianceEstimate variance_estimate(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  const double m = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double v = 0;
  for (double e : x) v += (e - m) * (e - m);
  v /= n - 1.0;
  const double ess = effective_sample_size(x);
  return {v, v * std::sqrt(2.0 / std::max(ess, 1.0)), ess};
}

inline std::vector<double> project_snapshots(const std::vector<Vector>& snapshots, const Vector& direction) {
  std::vector<double> out;
  out.reserve(snapshots.size());
  for (const auto& s : snapshots) out.push_back(direction.dot(s));
  return out;
}

// Covariance of snapshots[begin, begin + len) with the mean and a linear trend
// removed (dof len - 2).
inline Matrix detrended_covariance(const std::vector<Vector>& snapshots, std::size_t begin, std::size_t len) {
  if (len < 4) throw InvalidInput("block length must be at least 4");
  if (begin + len > snapshots.size()) throw InvalidInput("block exceeds the snapshot range");
  const Index dim = snapshots[begin].size();
  const double bt = static_cast<double>(len);
  const double tbar = 0.5 * (bt - 1.0);
  Matrix x(dim, static_cast<Index>(len));
  for (std::size_t k = 0; k < len; ++k) x.col(static_cast<Index>(k)) = snapshots[begin + k];
  const Vector mean = x.rowwise().mean();
  Vector slope = Vector::Zero(dim);
  double stt = 0;
  for (std::size_t k = 0; k < len; ++k) {
    const double dt = static_cast<double>(k) - tbar;
    slope += dt * (x.col(static_cast<Index>(k)) - mean);
    stt += dt * dt;
  }
  slope /= stt;
  for (std::size_t k = 0; k < len; ++k)
    x.col(static_cast<Index>(k)) -= mean + (static_cast<double>(k) - tbar) * slope;
  return numlin::symmetrized(x * x.transpose() / (bt - 2.0));
}

// Covariance from consecutive blocks of snapshots, each detrended on its own.
// Suited to quasi-stationary runs whose mean drifts slowly along flat directions.
struct BlockCovariance {
  Matrix covariance;
  std::vector<Matrix> per_block;
  long blocks = 0;
};

inline BlockCovariance block_detrended_covariance(const std::vector<Vector>& snapshots, long block) {
  if (block < 4) throw InvalidInput("block length must be at least 4");
  const long nb = static_cast<long>(snapshots.size()) / block;
  if (nb < 2) throw InsufficientSamples("need at least two blocks of " + std::to_string(block) + " snapshots");
  BlockCovariance out;
  const auto len = static_cast<std::size_t>(block);
  for (long b = 0; b < nb; ++b) {
    out.per_block.push_back(detrended_covariance(snapshots, static_cast<std::size_t>(b) * len, len));
    out.covariance = b == 0 ? out.per_block.back() : Matrix(out.covariance + out.per_block.back());
  }
  out.covariance /= static_cast<double>(nb);
  out.blocks = nb;
  return out;
}

// Variance along a unit direction with the between-block standard error.
inline VarianceEstimate block_variance(const BlockCovariance& bc, const Vector& direction) {
  std::vector<double> v;
  for (const auto& c : bc.per_block) v.push_back(direction.dot(c * direction));
  const double n = static_cast<double>(v.size());
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double s = 0;
  for (double e : v) s += (e - m) * (e - m);
  return {m, std::sqrt(s / (n - 1.0) / n), n};
}

// Consecutive two-layer runs, each segment starting from the end of the
// previous one. Segment k keeps its snapshots and mean weights, which serve as
// the local reference.
struct SegmentedRun {
  std::vector<TwoLayerWeights> means;
  std::vector<std::vector<Vector>> snapshots;  // W2 entries last
  std::vector<double> train_loss;  // mean logged loss per segment
  TwoLayerWeights final_weights;
};

// The runner records snapshots ending in vec(W2), e.g. sgd_run_two_layer(d, w, c, Scope::w2).
using TwoLayerRunner = std::function<Trajectory(const TwoLayerWeights&, const TrainConfig&)>;

// cfg.steps is the segment length; the burn-in precedes the first segment.
inline SegmentedRun segmented_run(const TwoLayerWeights& w0, const TrainConfig& cfg, int segments,
                                  const TwoLayerRunner& runner) {
  if (segments < 1) throw InvalidInput("segments must be positive");
  SegmentedRun out;
  TwoLayerWeights w = w0;
  for (int k = 0; k < segments; ++k) {
    TrainConfig c = cfg;
    c.keep_snapshots = true;
    c.seed = mix64(cfg.seed + static_cast<std::uint64_t>(k));
    c.burn_in_steps = k == 0 ? cfg.burn_in_steps : 0;
    c.steps = cfg.steps + c.burn_in_steps;
    Trajectory t = runner(w, c);
    out.means.push_back(t.mean_weights);
    out.snapshots.push_back(std::move(t.snapshots));
    double l = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < t.loss_steps.size(); ++i) {
      if (t.loss_steps[i] > c.burn_in_steps) {
        l += t.train_loss[i];
        ++n;
      }
    }
    out.train_loss.push_back(n ? l / static_cast<double>(n) : std::nan(""));
    w = t.final_weights;
  }
  out.final_weights = w;
  return out;
}

// Second-layer variances along the local left singular vectors a_k of W1
// (N_o = 1), each segment detrended and compared with theory at its own
// reference.
struct LocalModeVariances {
  Matrix measured;  // segments x N_h
  Matrix theory;
  Matrix measured_se;  // per-segment ESS standard error
  Vector mean_ratio;
  Vector ratio_stderr;  // between-segment
  std::vector<two_layer::ReferenceSvd> references;
};

inline LocalModeVariances local_second_layer_variances(
    const SegmentedRun& run, const std::function<Vector(const two_layer::ReferenceSvd&)>& theory) {
  const std::size_t nb = run.means.size();
  if (nb < 2) throw InsufficientSamples("need at least two segments");
  const Index nh = run.means.front().n_hidden();
  if (run.means.front().n_output() != 1) throw ShapeMismatch("local mode variances require N_o = 1");
  LocalModeVariances out;
  const auto rows = static_cast<Index>(nb);
  out.measured.resize(rows, nh);
  out.theory.resize(rows, nh);
  out.measured_se.resize(rows, nh);
  for (std::size_t b = 0; b < nb; ++b) {
    std::vector<Vector> snaps;
    snaps.reserve(run.snapshots[b].size());
    for (const auto& x : run.snapshots[b]) snaps.push_back(x.tail(nh));
    const Matrix c = detrended_covariance(snaps, 0, snaps.size());
    const two_layer::ReferenceSvd r = two_layer::reference_svd(run.means[b]);
    const Vector th = theory(r);
    const auto i = static_cast<Index>(b);
    for (Index k = 0; k < nh; ++k) {
      const Vector a = r.A.col(k);
      out.measured(i, k) = a.dot(c * a);
      out.theory(i, k) = th(k);
      const double ess = effective_sample_size(project_snapshots(snaps, a));
      out.measured_se(i, k) = out.measured(i, k) * std::sqrt(2.0 / std::max(ess, 1.0));
    }
    out.references.push_back(r);
  }
  const Matrix ratio = out.measured.cwiseQuotient(out.theory);
  const double n = static_cast<double>(nb);
  out.mean_ratio = ratio.colwise().mean().transpose();
  out.ratio_stderr.resize(nh);
  for (Index k = 0; k < nh; ++k) {
    const double var = (ratio.col(k).array() - out.mean_ratio(k)).square().sum() / (n - 1.0);
    out.ratio_stderr(k) = std::sqrt(var / n);
  }
  return out;
}

// Ten slowest relaxation times, 10 / (lambda omega_0), with omega_0 the lower
// Marchenko-Pastur edge of H.
inline long default_burn_in(const datagen::DataSpec& spec, double learning_rate) {
  const double w0 = datagen::mp_hessian_lower_edge(spec);
  if (!(w0 > 0.0)) throw InvalidInput("default burn-in needs P > N (the Hessian edge vanishes)");
  return static_cast<long>(std::ceil(10.0 / (learning_rate * w0)));
}

namespace detail {

inline bool record_step(const TrainConfig& cfg, long k) {
  return k > cfg.burn_in_steps && (k - cfg.burn_in_steps) % cfg.record_every == 0;
}

inline void record(Trajectory& t, const TrainConfig& cfg, long k, const Vector& x) {
  t.stats.add(x);
  if (cfg.keep_snapshots) {
    t.snapshot_steps.push_back(k);
    t.snapshots.push_back(x);
  }
}

inline double max_hessian_eigenvalue(const DataSet& d) {
  return numlin::sym_eig(d.sigma_xx()).values.maxCoeff();
}

[[noreturn]] inline void diverged(double lambda, double bound, long step) {
  std::ostringstream os;
  os << "loss diverged (> 1e6 x initial) at step " << step << ": learning rate " << lambda
     << " exceeds the linear stability bound 2/omega_max = " << bound;
  throw InstabilityError(os.str());
}

inline Vector flatten(const TwoLayerWeights& w, Scope s) {
  const Vector v1 = numlin::vec(w.W1), v2 = numlin::vec(w.W2);
  if (s == Scope::w1) return v1;
  if (s == Scope::w2) return v2;
  Vector out(v1.size() + v2.size());
  out << v1, v2;
  return out;
}

inline TwoLayerWeights mean_or(const TwoLayerWeights& sum, long n, const TwoLayerWeights& fallback) {
  if (n == 0) return fallback;
  const double k = static_cast<double>(n);
  return {sum.W1 / k, sum.W2 / k};
}

}  // namespace detail

inline std::vector<double> per_sample_residuals(const Vector& w, const DataSet& d) {
  const Eigen::RowVectorXd r = w.transpose() * d.X - d.Y.row(0);
  return {r.data(), r.data() + r.size()};
}

// Plain SGD on the single-layer loss: w <- w - lambda (1/S) sum_B (w.x - y) x.
inline Trajectory sgd_run_single(const DataSet& d, const Vector& w0, const TrainConfig& cfg,
                                 const DataSet* test = nullptr) {
  single_layer::require_single_output(d);
  if (w0.size() != d.n_input()) throw ShapeMismatch("w0 length differs from N");
  cfg.validate(d.samples());
  Trajectory t;
  t.kind = ModelKind::single;
  Rng rng(cfg.seed, Purpose::minibatch);
  MinibatchSampler sampler(d.samples(), cfg.batch_size, cfg.replacement);
  const double step = cfg.learning_rate / cfg.batch_size;
  const long loss_every = cfg.loss_interval();
  Vector w = w0;
  Vector g(w.size());
  const double l0 = single_layer::full_batch_loss(w, d);
  auto log_loss = [&](long k) {
    const double l = single_layer::full_batch_loss(w, d);
    t.loss_steps.push_back(k);
    t.train_loss.push_back(l);
    t.test_loss.push_back(test ? single_layer::full_batch_loss(w, *test) : std::nan(""));
    if (!std::isfinite(l) || l > 1e6 * std::max(l0, 1e-300)) {
      detail::diverged(cfg.learning_rate, 2.0 / detail::max_hessian_eigenvalue(d), k);
    }
  };
  log_loss(0);
  for (long k = 1; k <= cfg.steps; ++k) {
    g.setZero();
    for (Index mu : sampler.next(rng)) {
      const double r = w.dot(d.X.col(mu)) - d.Y(0, mu);
      g += r * d.X.col(mu);
    }
    w -= step * g;
    if (detail::record_step(cfg, k)) detail::record(t, cfg, k, w);
    if (k % loss_every == 0 || k == cfg.steps) log_loss(k);
  }
  t.final_w = w;
  t.steps_run = cfg.steps;
  return t;
}

// Gaussian draws with covariance C(w) for one of the single-layer noise models.
class SingleLayerNoise {
 public:
  SingleLayerNoise(const DataSet& d, single_layer::NoiseKind kind, int batch_size, bool replacement)
      : kind_(kind), s_(batch_size) {
    const Matrix h = d.sigma_xx();
    switch (kind) {
      case single_layer::NoiseKind::exact_k:
        factor_ = numlin::psd_factor(single_layer::noise_covariance_exact(d, batch_size, replacement).C).L;
        break;
      case single_layer::NoiseKind::hessian_limit:
        factor_ = numlin::psd_factor(
                      single_layer::noise_covariance_hessian_limit(h, d.spec.label_noise_var, batch_size).C)
                      .L;
        break;
      case single_layer::NoiseKind::multiplicative:
        h_ = h;
        h_sqrt_ = numlin::psd_factor(h).L;
        teacher_ = d.u.row(0).transpose();
        label_var_ = d.spec.label_noise_var;
        break;
      case single_layer::NoiseKind::empirical:
        throw InvalidInput("SGF noise kind must be exact_k, hessian_limit or multiplicative");
    }
  }

  // One draw xi with cov(xi) = C(w).
  Vector draw(const Vector& w, Rng& rng) const {
    if (kind_ != single_layer::NoiseKind::multiplicative) return factor_ * normals(factor_.cols(), rng);
    // C = (a a^T + (wb.H wb + s2) H) / S with a = H wb, wb = w - u.
    const Vector wb = w - teacher_;
    const Vector a = h_ * wb;
    const double scale = std::sqrt(std::max(wb.dot(a) + label_var_, 0.0));
    const double z0 = rng.normal();
    return (a * z0 + scale * (h_sqrt_ * normals(h_sqrt_.cols(), rng))) / std::sqrt(static_cast<double>(s_));
  }

  static Vector normals(Index n, Rng& rng) {
    Vector z(n);
    for (Index k = 0; k < n; ++k) z(k) = rng.normal();
    return z;
  }

 private:
  single_layer::NoiseKind kind_;
  int s_;
  Matrix factor_;
  Matrix h_, h_sqrt_;
  Vector teacher_;
  double label_var_ = 0.0;
};

// Euler-Maruyama for dw = -H (w - w*) dt + sqrt(lambda) xi dW with dt = lambda.
inline Trajectory sgf_run_single(const DataSet& d, const Vector& w0, const TrainConfig& cfg,
                                 single_layer::NoiseKind kind, const DataSet* test = nullptr) {
  single_layer::require_single_output(d);
  if (w0.size() != d.n_input()) throw ShapeMismatch("w0 length differs from N");
  cfg.validate(d.samples());
  const single_layer::RegressionSolution sol = single_layer::solve_regression(d);
  const SingleLayerNoise noise(d, kind, cfg.batch_size, cfg.replacement);
  Trajectory t;
  t.kind = ModelKind::single;
  Rng rng(cfg.seed, Purpose::sgf_noise);
  const double dt = cfg.learning_rate;
  const double amp = std::sqrt(cfg.learning_rate * dt);
  const long loss_every = cfg.loss_interval();
  Vector w = w0;
  const double l0 = single_layer::full_batch_loss(w, d);
  auto log_loss = [&](long k) {
    const double l = single_layer::full_batch_loss(w, d);
    t.loss_steps.push_back(k);
    t.train_loss.push_back(l);
    t.test_loss.push_back(test ? single_layer::full_batch_loss(w, *test) : std::nan(""));
    if (!std::isfinite(l) || l > 1e6 * std::max(l0, 1e-300)) {
      detail::diverged(cfg.learning_rate, 2.0 / detail::max_hessian_eigenvalue(d), k);
    }
  };
  log_loss(0);
  for (long k = 1; k <= cfg.steps; ++k) {
    const Vector xi = noise.draw(w, rng);
    w += -dt * (sol.H * (w - sol.w_star)) + amp * xi;
    if (detail::record_step(cfg, k)) detail::record(t, cfg, k, w);
    if (k % loss_every == 0 || k == cfg.steps) log_loss(k);
  }
  t.final_w = w;
  t.steps_run = cfg.steps;
  return t;
}

// Two-layer SGD with simultaneous updates
// W1 += lambda W2^T (S^yx - W2 W1 S^xx), W2 += lambda (S^yx - W2 W1 S^xx) W1^T on mini-batch moments.
inline Trajectory sgd_run_two_layer(const DataSet& d, const TwoLayerWeights& w0, const TrainConfig& cfg,
                                    Scope scope = Scope::both, const DataSet* test = nullptr) {
  two_layer::check_shapes(w0, d);
  cfg.validate(d.samples());
  Trajectory t;
  t.kind = ModelKind::two_layer;
  t.scope = scope;
  Rng rng(cfg.seed, Purpose::minibatch);
  MinibatchSampler sampler(d.samples(), cfg.batch_size, cfg.replacement);
  const long loss_every = cfg.loss_interval();
  const double step = cfg.learning_rate / cfg.batch_size;
  const two_layer::Moments mom = two_layer::moments(d);
  const std::optional<two_layer::Moments> test_mom =
      test ? std::optional<two_layer::Moments>(two_layer::moments(*test)) : std::nullopt;
  TwoLayerWeights w = w0;
  TwoLayerWeights sum{Matrix::Zero(w0.W1.rows(), w0.W1.cols()), Matrix::Zero(w0.W2.rows(), w0.W2.cols())};
  long recorded = 0;
  Matrix xb(d.n_input(), cfg.batch_size), yb(d.n_output(), cfg.batch_size);
  const double l0 = two_layer::two_layer_loss(w, mom);
  auto log_loss = [&](long k) {
    const double l = two_layer::two_layer_loss(w, mom);
    t.loss_steps.push_back(k);
    t.train_loss.push_back(l);
    t.test_loss.push_back(test_mom ? two_layer::two_layer_loss(w, *test_mom) : std::nan(""));
    if (!std::isfinite(l) || l > 1e6 * std::max(l0, 1e-300)) {
      const double bound = 2.0 / (detail::max_hessian_eigenvalue(d) *
                                  std::max(w0.W1.squaredNorm() + w0.W2.squaredNorm(), 1e-300));
      detail::diverged(cfg.learning_rate, bound, k);
    }
  };
  log_loss(0);
  for (long k = 1; k <= cfg.steps; ++k) {
    const auto& idx = sampler.next(rng);
    for (int b = 0; b < cfg.batch_size; ++b) {
      xb.col(b) = d.X.col(idx[static_cast<std::size_t>(b)]);
      yb.col(b) = d.Y.col(idx[static_cast<std::size_t>(b)]);
    }
    const Matrix h = w.W1 * xb;
    const Matrix e = yb - w.W2 * h;
    const Matrix dw2 = step * e * h.transpose();
    w.W1 += step * (w.W2.transpose() * e) * xb.transpose();
    w.W2 += dw2;
    if (detail::record_step(cfg, k)) {
      detail::record(t, cfg, k, detail::flatten(w, scope));
      sum.W1 += w.W1;
      sum.W2 += w.W2;
      ++recorded;
    }
    if (k % loss_every == 0 || k == cfg.steps) log_loss(k);
  }
  t.final_weights = w;
  t.mean_weights = detail::mean_or(sum, recorded, w);
  t.steps_run = cfg.steps;
  return t;
}

enum class NoiseReference {
  current,  // exact factor at the current weights: R1 = W2^T E, R2 = E W1^T
  frozen,   // joint covariance assembled and factored once at the reference
};

struct SgfTwoLayerOptions {
  NoiseReference noise = NoiseReference::current;
  std::optional<TwoLayerWeights> reference;  // frozen mode; defaults to the initial weights
  long refresh_every = 0;                    // frozen mode, > 0: refactor at the current weights
  double noise_scale = 1.0;                  // 0 gives the deterministic flow
};

// Euler-Maruyama for the coupled two-layer SGF with dt = lambda. The noise
// (R1, R2) is jointly Gaussian with the covariances of sgf_noise_covariances.
inline Trajectory sgf_run_two_layer(const DataSet& d, const TwoLayerWeights& w0, const TrainConfig& cfg,
                                    const SgfTwoLayerOptions& opt = {}, Scope scope = Scope::both,
                                    std::vector<std::string>* log = nullptr) {
  two_layer::check_shapes(w0, d);
  cfg.validate(d.samples());
  const two_layer::NoiseStats st = two_layer::noise_stats(d, cfg.learning_rate, cfg.batch_size);
  const two_layer::Moments mom = two_layer::moments(d);
  const Index n1 = w0.W1.size(), n2 = w0.W2.size();
  const bool frozen = opt.noise == NoiseReference::frozen;
  auto factor = [&](const TwoLayerWeights& ref) {
    const numlin::PsdFactor f = numlin::psd_factor(two_layer::sgf_noise_covariances(ref, st).joint());
    if (f.repaired && log) log->push_back("joint noise covariance clipped: min eigenvalue " + csv::cell(f.min_eigenvalue));
    return f.L;
  };
  Matrix L;
  if (frozen) L = factor(opt.reference ? *opt.reference : w0);
  const double c = st.sigma_R2() * (1.0 - 1.0 / static_cast<double>(st.samples));
  Trajectory t;
  t.kind = ModelKind::two_layer;
  t.scope = scope;
  Rng rng(cfg.seed, Purpose::sgf_noise);
  const double dt = cfg.learning_rate;
  const double amp = opt.noise_scale * std::sqrt(dt);
  const long loss_every = cfg.loss_interval();
  TwoLayerWeights w = w0;
  TwoLayerWeights sum{Matrix::Zero(w0.W1.rows(), w0.W1.cols()), Matrix::Zero(w0.W2.rows(), w0.W2.cols())};
  long recorded = 0;
  Matrix e(w0.n_output(), w0.n_input());
  const double l0 = two_layer::two_layer_loss(w, mom);
  auto log_loss = [&](long k) {
    const double l = two_layer::two_layer_loss(w, mom);
    t.loss_steps.push_back(k);
    t.train_loss.push_back(l);
    t.test_loss.push_back(std::nan(""));
    if (!std::isfinite(l) || l > 1e6 * std::max(l0, 1e-300)) {
      detail::diverged(cfg.learning_rate, 2.0 / detail::max_hessian_eigenvalue(d), k);
    }
  };
  log_loss(0);
  for (long k = 1; k <= cfg.steps; ++k) {
    if (frozen && opt.refresh_every > 0 && k > 1 && (k - 1) % opt.refresh_every == 0) L = factor(w);
    const TwoLayerWeights f = two_layer::flow_rhs(w, mom);
    if (amp > 0.0 && !frozen) {
      for (Index j = 0; j < e.cols(); ++j)
        for (Index i = 0; i < e.rows(); ++i) e(i, j) = rng.normal();
      e *= amp * std::sqrt(c);
      const Matrix r1 = w.W2.transpose() * e;
      w.W2 += e * w.W1.transpose();
      w.W1 += r1;
    } else if (amp > 0.0) {
      const Vector r = amp * (L * SingleLayerNoise::normals(L.cols(), rng));
      w.W1 += numlin::unvec(r.head(n1), w.W1.rows(), w.W1.cols());
      w.W2 += numlin::unvec(r.tail(n2), w.W2.rows(), w.W2.cols());
    }
    w.W1 += dt * f.W1;
    w.W2 += dt * f.W2;
    if (detail::record_step(cfg, k)) {
      detail::record(t, cfg, k, detail::flatten(w, scope));
      sum.W1 += w.W1;
      sum.W2 += w.W2;
      ++recorded;
    }
    if (k % loss_every == 0 || k == cfg.steps) log_loss(k);
  }
  t.final_weights = w;
  t.mean_weights = detail::mean_or(sum, recorded, w);
  t.steps_run = cfg.steps;
  return t;
}

// Per-sample single-layer gradients as columns, g_mu = (w.x - y) x.
inline Matrix per_sample_gradients(const DataSet& d, const Vector& w) {
  single_layer::require_single_output(d);
  const Eigen::RowVectorXd r = w.transpose() * d.X - d.Y.row(0);
  return d.X * r.asDiagonal();
}

// Exact mini-batch covariance pref [(1/P) sum g g^T - gbar gbar^T] with
// pref = 1/S (with replacement) or (P - S) / (S (P - 1)) (without).
inline Matrix minibatch_covariance(const Matrix& g, int batch_size, bool replacement) {
  const Index p = g.cols();
  if (batch_size < 1) throw InvalidInput("batch size must be positive");
  if (!replacement && batch_size > p) throw InvalidInput("S > P without replacement");
  const double pp = static_cast<double>(p);
  const Vector m = g.rowwise().mean();
  const Matrix c = g * g.transpose() / pp - m * m.transpose();
  const double pref = replacement ? 1.0 / batch_size
                                  : (p > 1 ? (pp - batch_size) / (batch_size * (pp - 1.0)) : 0.0);
  return numlin::symmetrized(pref * c);
}

// Covariance of the batch-mean gradient by enumerating all equally likely
// batches: ordered S-tuples with replacement, S-subsets without.
inline Matrix enumerate_gradient_noise(const Matrix& g, int batch_size, bool replacement,
                                       double max_batches = 1e6) {
  const Index p = g.cols(), n = g.rows();
  if (batch_size < 1) throw InvalidInput("batch size must be positive");
  if (!replacement && batch_size > p) throw InvalidInput("S > P without replacement");
  double count = 1.0;
  if (replacement) {
    count = std::pow(static_cast<double>(p), batch_size);
  } else {
    for (int k = 0; k < batch_size; ++k) count *= static_cast<double>(p - k) / static_cast<double>(k + 1);
  }
  if (count > max_batches) throw InvalidInput("too many batches to enumerate");
  std::vector<Index> idx(static_cast<std::size_t>(batch_size));
  if (!replacement) std::iota(idx.begin(), idx.end(), Index{0});
  else std::fill(idx.begin(), idx.end(), Index{0});
  Accumulator acc(n);
  for (;;) {
    Vector m = Vector::Zero(n);
    for (Index i : idx) m += g.col(i);
    acc.add(m / static_cast<double>(batch_size));
    // Advance to the next tuple / combination.
    int k = batch_size - 1;
    if (replacement) {
      while (k >= 0 && idx[static_cast<std::size_t>(k)] == p - 1) --k;
      if (k < 0) break;
      ++idx[static_cast<std::size_t>(k)];
      for (int j = k + 1; j < batch_size; ++j) idx[static_cast<std::size_t>(j)] = 0;
    } else {
      while (k >= 0 && idx[static_cast<std::size_t>(k)] == p - batch_size + k) --k;
      if (k < 0) break;
      ++idx[static_cast<std::size_t>(k)];
      for (int j = k + 1; j < batch_size; ++j) idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
    }
  }
  // Population covariance over the enumerated batches.
  if (acc.count() < 2) return Matrix::Zero(n, n);
  const double c = static_cast<double>(acc.count());
  return acc.covariance() * ((c - 1.0) / c);
}

// Monte Carlo estimate of cov(grad L_B) at fixed w from n_draws mini-batches.
inline Matrix empirical_gradient_noise(const DataSet& d, const Vector& w, int batch_size, bool replacement,
                                       long n_draws, Rng& rng) {
  if (n_draws < 100) throw InvalidInput("empirical_gradient_noise needs n_draws >= 100");
  const Matrix g = per_sample_gradients(d, w);
  MinibatchSampler sampler(d.samples(), batch_size, replacement);
  Accumulator acc(d.n_input());
  Vector m(d.n_input());
  for (long k = 0; k < n_draws; ++k) {
    m.setZero();
    for (Index i : sampler.next(rng)) m += g.col(i);
    acc.add(m / static_cast<double>(batch_size));
  }
  return numlin::symmetrized(acc.covariance());
}

inline void write_snapshots_csv(const Trajectory& t, const std::filesystem::path& path) {
  if (t.snapshots.empty()) throw InvalidInput("trajectory has no stored snapshots");
  std::vector<std::string> cols{"step"};
  for (Index k = 0; k < t.snapshots.front().size(); ++k) cols.push_back("w" + std::to_string(k));
  csv::Writer w(path, cols);
  for (std::size_t r = 0; r < t.snapshots.size(); ++r) {
    std::vector<std::string> row{csv::cell(t.snapshot_steps[r])};
    for (Index k = 0; k < t.snapshots[r].size(); ++k) row.push_back(csv::cell(t.snapshots[r](k)));
    w.row_strings(row);
  }
}

inline void write_loss_csv(const Trajectory& t, const std::filesystem::path& path) {
  csv::Writer w(path, {"step", "train_loss", "test_loss"});
  for (std::size_t r = 0; r < t.loss_steps.size(); ++r) w.row(t.loss_steps[r], t.train_loss[r], t.test_loss[r]);
}

}  // namespace sgflab::sgd
