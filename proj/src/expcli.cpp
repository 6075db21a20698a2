#include "sgflab/expcli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "sgflab/csv.hpp"
#include "sgflab/numlin.hpp"
#include "sgflab/single_layer.hpp"
#include "sgflab/two_layer.hpp"

#ifndef SGFLAB_VERSION
#define SGFLAB_VERSION "0.1.0"
#endif

namespace sgflab::expcli {

namespace {

using datagen::DataSet;
using datagen::DataSpec;
using sgd::TrainConfig;
using two_layer::TwoLayerWeights;
using nlohmann::json;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("bad value for " + key + ": '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

std::string fmt(double v) { return csv::cell(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }
template <class T>
  requires std::is_integral_v<T>
std::string fmt(T v) {
  return std::to_string(v);
}

using Setter = std::function<void(ExperimentConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::optional<std::string>(const ExperimentConfig&)>;

struct Field {
  Setter set;
  Getter get;
};

const std::map<std::string, Field>& core_fields() {
  static const std::map<std::string, Field> f = [] {
    std::map<std::string, Field> m;
    m["experiment"] = {[](auto& c, auto&, auto& v) { c.experiment = v; },
                       [](const auto& c) { return std::optional<std::string>(c.experiment); }};
    m["data.n_input"] = {[](auto& c, auto& k, auto& v) { c.data.n_input = parse_number<Index>(k, v); },
                         [](const auto& c) { return std::optional<std::string>(fmt(c.data.n_input)); }};
    m["data.n_output"] = {[](auto& c, auto& k, auto& v) { c.data.n_output = parse_number<Index>(k, v); },
                          [](const auto& c) { return std::optional<std::string>(fmt(c.data.n_output)); }};
    m["data.samples"] = {[](auto& c, auto& k, auto& v) { c.data.samples = parse_number<Index>(k, v); },
                         [](const auto& c) { return std::optional<std::string>(fmt(c.data.samples)); }};
    m["data.x_mean"] = {[](auto& c, auto& k, auto& v) { c.data.x_mean = parse_number<double>(k, v); },
                        [](const auto& c) { return std::optional<std::string>(fmt(c.data.x_mean)); }};
    m["data.x_var"] = {[](auto& c, auto& k, auto& v) { c.data.x_var = parse_number<double>(k, v); },
                       [](const auto& c) {
                         return c.data.x_var ? std::optional<std::string>(fmt(*c.data.x_var)) : std::nullopt;
                       }};
    m["data.teacher_var"] = {[](auto& c, auto& k, auto& v) { c.data.teacher_var = parse_number<double>(k, v); },
                             [](const auto& c) { return std::optional<std::string>(fmt(c.data.teacher_var)); }};
    m["data.label_noise_var"] = {
        [](auto& c, auto& k, auto& v) { c.data.label_noise_var = parse_number<double>(k, v); },
        [](const auto& c) { return std::optional<std::string>(fmt(c.data.label_noise_var)); }};
    m["data.covariance_kind"] = {
        [](auto& c, auto&, auto& v) {
          try {
            c.data.covariance_kind = datagen::covariance_kind_from(v);
          } catch (const Error& e) {
            throw ConfigError(e.what());
          }
        },
        [](const auto& c) { return std::optional<std::string>(datagen::to_string(c.data.covariance_kind)); }};
    m["data.random_labels"] = {[](auto& c, auto& k, auto& v) { c.data.random_labels = parse_bool(k, v); },
                               [](const auto& c) { return std::optional<std::string>(fmt(c.data.random_labels)); }};
    m["data.seed"] = {[](auto& c, auto& k, auto& v) { c.data.seed = parse_number<std::uint64_t>(k, v); },
                      [](const auto& c) { return std::optional<std::string>(fmt(c.data.seed)); }};
    m["train.learning_rate"] = {
        [](auto& c, auto& k, auto& v) { c.train.learning_rate = parse_number<double>(k, v); },
        [](const auto& c) { return std::optional<std::string>(fmt(c.train.learning_rate)); }};
    m["train.batch_size"] = {[](auto& c, auto& k, auto& v) { c.train.batch_size = parse_number<int>(k, v); },
                             [](const auto& c) { return std::optional<std::string>(fmt(c.train.batch_size)); }};
    m["train.replacement"] = {[](auto& c, auto& k, auto& v) { c.train.replacement = parse_bool(k, v); },
                              [](const auto& c) { return std::optional<std::string>(fmt(c.train.replacement)); }};
    m["train.steps"] = {[](auto& c, auto& k, auto& v) { c.train.steps = parse_number<long>(k, v); },
                        [](const auto& c) { return std::optional<std::string>(fmt(c.train.steps)); }};
    m["train.burn_in_steps"] = {[](auto& c, auto& k, auto& v) { c.train.burn_in_steps = parse_number<long>(k, v); },
                                [](const auto& c) { return std::optional<std::string>(fmt(c.train.burn_in_steps)); }};
    m["train.record_every"] = {[](auto& c, auto& k, auto& v) { c.train.record_every = parse_number<long>(k, v); },
                               [](const auto& c) { return std::optional<std::string>(fmt(c.train.record_every)); }};
    m["train.loss_every"] = {[](auto& c, auto& k, auto& v) { c.train.loss_every = parse_number<long>(k, v); },
                             [](const auto& c) { return std::optional<std::string>(fmt(c.train.loss_every)); }};
    m["train.seed"] = {[](auto& c, auto& k, auto& v) { c.train.seed = parse_number<std::uint64_t>(k, v); },
                       [](const auto& c) { return std::optional<std::string>(fmt(c.train.seed)); }};
    m["model.n_hidden"] = {[](auto& c, auto& k, auto& v) { c.n_hidden = parse_number<Index>(k, v); },
                           [](const auto& c) { return std::optional<std::string>(fmt(c.n_hidden)); }};
    m["model.init_var_w1"] = {[](auto& c, auto& k, auto& v) { c.init_var_w1 = parse_number<double>(k, v); },
                              [](const auto& c) { return std::optional<std::string>(fmt(c.init_var_w1)); }};
    m["model.init_var_w2"] = {[](auto& c, auto& k, auto& v) { c.init_var_w2 = parse_number<double>(k, v); },
                              [](const auto& c) { return std::optional<std::string>(fmt(c.init_var_w2)); }};
    m["run.realizations"] = {[](auto& c, auto& k, auto& v) { c.realizations = parse_number<int>(k, v); },
                             [](const auto& c) { return std::optional<std::string>(fmt(c.realizations)); }};
    m["run.output_dir"] = {[](auto& c, auto&, auto& v) { c.output_dir = v; },
                           [](const auto& c) { return std::optional<std::string>(c.output_dir); }};
    return m;
  }();
  return f;
}

bool is_core_prefix(const std::string& key) {
  for (const char* p : {"data.", "train.", "model.", "run."})
    if (key.rfind(p, 0) == 0) return true;
  return false;
}

const std::set<std::string>& two_layer_experiments() {
  static const std::set<std::string> s{"two-layer-cov", "ivfr", "w1-pert"};
  return s;
}

// ---------------------------------------------------------------------------
// Shared helpers for the pipelines.

struct Context {
  std::filesystem::path dir;
  int jobs = 1;
  std::vector<std::string> files;
  std::vector<Diagnostic> diagnostics;
  json summary = json::object();

  csv::Writer writer(const std::string& name, const std::vector<std::string>& columns) {
    files.push_back(name);
    return csv::Writer(dir / name, columns);
  }
};

DataSpec realization_spec(const ExperimentConfig& c, int r) {
  DataSpec s = c.data;
  s.seed = realization_seed(c.data.seed, r);
  return s;
}

TrainConfig realization_train(const ExperimentConfig& c, int r) {
  TrainConfig t = c.train;
  t.seed = realization_seed(c.train.seed, r);
  return t;
}

std::vector<double> linspace(double a, double b, int n) {
  std::vector<double> v;
  for (int k = 0; k < n; ++k) v.push_back(n == 1 ? b : a + (b - a) * k / (n - 1));
  return v;
}

Vector descending(Vector v) {
  std::sort(v.data(), v.data() + v.size(), std::greater<>());
  return v;
}

Vector sym_values_desc(const Matrix& m) { return descending(numlin::sym_eig(numlin::symmetrized(m)).values); }

// Elementwise mean of equally sized vectors.
Vector mean_of(const std::vector<Vector>& v) {
  Vector m = Vector::Zero(v.front().size());
  for (const auto& x : v) m += x;
  return m / static_cast<double>(v.size());
}

double mean_rel_dev(const Vector& a, const Vector& ref) {
  return ((a - ref).cwiseAbs().array() / ref.cwiseAbs().array()).mean();
}

double max_rel_dev(const Vector& a, const Vector& ref) {
  return ((a - ref).cwiseAbs().array() / ref.cwiseAbs().array()).maxCoeff();
}

std::string ratio_tag(double r) {
  std::ostringstream os;
  os << "P/N=" << csv::cell(r);
  return os.str();
}

TwoLayerWeights init_weights(const ExperimentConfig& c, std::uint64_t seed) {
  const Index ni = c.data.n_input, nh = c.n_hidden, no = c.data.n_output;
  const double v1 = c.init_var_w1 > 0.0 ? c.init_var_w1 : 1.0 / static_cast<double>(ni);
  const double v2 = c.init_var_w2 > 0.0 ? c.init_var_w2 : 1.0 / static_cast<double>(nh);
  Rng r1(seed, Purpose::init_w1), r2(seed, Purpose::init_w2);
  return {datagen::detail::normal_matrix(nh, ni, 0.0, std::sqrt(v1), r1),
          datagen::detail::normal_matrix(no, nh, 0.0, std::sqrt(v2), r2)};
}

double segment_mean_loss(const sgd::Trajectory& t, long burn_in) {
  double s = 0;
  long n = 0;
  for (std::size_t k = 0; k < t.loss_steps.size(); ++k) {
    if (t.loss_steps[k] > burn_in) {
      s += t.train_loss[k];
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : std::nan("");
}

double segment_mean_test_loss(const sgd::Trajectory& t, long burn_in) {
  double s = 0;
  long n = 0;
  for (std::size_t k = 0; k < t.loss_steps.size(); ++k) {
    if (t.loss_steps[k] > burn_in) {
      s += t.test_loss[k];
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : std::nan("");
}

// ---------------------------------------------------------------------------
// projector-stats

void run_projector_stats(const ExperimentConfig& c, Context& ctx) {
  const std::vector<double> ratios = parse_list(c.get("sweep.ratios", "2,4,8,16"));
  const std::vector<double> ns = parse_list(c.get("sweep.n_values", std::to_string(c.data.n_input)));
  const std::vector<double> ks = parse_list(c.get("k.samples", "70,100,200,500,1000,10000"));
  struct Job {
    Index n, p;
    double s;
  };
  std::vector<Job> jobs;
  for (double n : ns)
    for (double s : ratios)
      jobs.push_back({static_cast<Index>(n), static_cast<Index>(std::llround(s * n)), s});
  const int reps = c.realizations;
  const int total = static_cast<int>(jobs.size()) * reps;
  const auto stats = parallel_map<datagen::ProjectorStats>(ctx.jobs, total, [&](int i) {
    const Job& j = jobs[static_cast<std::size_t>(i / reps)];
    return datagen::projector_stats(j.n, j.p, realization_seed(c.data.seed, i % reps), 1);
  });
  csv::Writer w = ctx.writer("projector_stats.csv", {"N", "P", "s", "mean_diag", "mean_diag_theory", "var_all",
                                                      "var_offdiag", "max_idempotence_error"});
  std::map<Index, std::vector<std::array<double, 3>>> by_n;
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    datagen::ProjectorStats m;
    for (int r = 0; r < reps; ++r) {
      const auto& s = stats[j * static_cast<std::size_t>(reps) + static_cast<std::size_t>(r)];
      m.mean_diag += s.mean_diag / reps;
      m.var_all += s.var_all / reps;
      m.var_offdiag += s.var_offdiag / reps;
      m.max_idempotence_error = std::max(m.max_idempotence_error, s.max_idempotence_error);
    }
    const Job& jb = jobs[j];
    w.row(jb.n, jb.p, jb.s, m.mean_diag, static_cast<double>(jb.n) / static_cast<double>(jb.p), m.var_all,
          m.var_offdiag, m.max_idempotence_error);
    by_n[jb.n].push_back({std::log(jb.s), std::log(m.var_all), std::log(m.var_offdiag)});
  }
  json slopes = json::object();
  for (const auto& [n, pts] : by_n) {
    if (pts.size() < 2) continue;
    std::vector<double> x, ya, yo;
    for (const auto& p : pts) {
      x.push_back(p[0]);
      ya.push_back(p[1]);
      yo.push_back(p[2]);
    }
    slopes[std::to_string(n)] = {{"var_all", two_layer::fit_line(x, ya).slope},
                                 {"var_offdiag", two_layer::fit_line(x, yo).slope}};
  }
  ctx.summary["slope_vs_s"] = slopes;

  // Diagonal of K (squared residuals at w*), sorted, for N = data.n_input.
  struct KRes {
    Vector k, eps2;
  };
  const int nk = static_cast<int>(ks.size()) * reps;
  const auto kres = parallel_map<KRes>(ctx.jobs, nk, [&](int i) {
    DataSpec s = realization_spec(c, i % reps);
    s.samples = static_cast<Index>(ks[static_cast<std::size_t>(i / reps)]);
    const DataSet d = datagen::generate(s);
    const auto sol = single_layer::solve_regression(d);
    const Vector r = (sol.w_star.transpose() * d.X - d.Y.row(0)).transpose();
    return KRes{descending(r.cwiseAbs2()), descending(d.eps.row(0).transpose().cwiseAbs2())};
  });
  csv::Writer kw = ctx.writer("k_entries.csv", single_layer::spectrum_columns());
  for (std::size_t j = 0; j < ks.size(); ++j) {
    std::vector<Vector> kv, ev;
    for (int r = 0; r < reps; ++r) {
      kv.push_back(kres[j * static_cast<std::size_t>(reps) + static_cast<std::size_t>(r)].k);
      ev.push_back(kres[j * static_cast<std::size_t>(reps) + static_cast<std::size_t>(r)].eps2);
    }
    const std::string tag = "P=" + csv::cell(static_cast<long>(ks[j]));
    single_layer::write_spectrum_rows(kw, mean_of(kv), c.data.label_noise_var, "k:" + tag);
    single_layer::write_spectrum_rows(kw, mean_of(ev), c.data.label_noise_var, "eps2:" + tag);
  }
}

// ---------------------------------------------------------------------------
// noise-spectrum

void run_noise_spectrum(const ExperimentConfig& c, Context& ctx) {
  const std::vector<double> ratios = parse_list(c.get("sweep.ratios", "1.1,2,50"));
  const bool measure = parse_bool("sgd.measure", c.get("sgd.measure", "false"));
  const int draws = parse_number<int>("sgd.draws", c.get("sgd.draws", "2000"));
  const int reps = c.realizations;
  const Index n = c.data.n_input;
  const int S = c.train.batch_size;
  const double lambda = c.train.learning_rate;
  struct Res {
    Vector exact, hess, full, db, sgd;
  };
  const auto res = parallel_map<Res>(ctx.jobs, static_cast<int>(ratios.size()) * reps, [&](int i) {
    const int r = i % reps;
    DataSpec s = realization_spec(c, r);
    s.samples = static_cast<Index>(std::llround(ratios[static_cast<std::size_t>(i / reps)] * static_cast<double>(n)));
    const DataSet d = datagen::generate(s);
    const Matrix h = d.sigma_xx();
    const Matrix ce = single_layer::noise_covariance_exact(d, S, c.train.replacement).C;
    const Matrix ch = single_layer::noise_covariance_hessian_limit(h, s.label_noise_var, S).C;
    Res out{sym_values_desc(ce), sym_values_desc(ch), sym_values_desc(single_layer::stationary_covariance(h, ce, lambda).M),
            descending(single_layer::detailed_balance_covariance(h, ce, lambda).spectrum), Vector()};
    if (measure && r == 0) {
      TrainConfig t = realization_train(c, r);
      const auto sol = single_layer::solve_regression(d);
      const sgd::Trajectory tr = sgd::sgd_run_single(d, sol.w_star, t);
      Rng rng(t.seed, Purpose::monte_carlo);
      out.sgd = sym_values_desc(sgd::empirical_gradient_noise(d, tr.final_w, S, c.train.replacement, draws, rng));
    }
    return out;
  });
  const double xv = c.data.input_variance();
  const double norm_c = xv * c.data.label_noise_var / S;
  const double norm_m = lambda * c.data.label_noise_var / (2.0 * S);
  csv::Writer nw = ctx.writer("noise_spectrum.csv", single_layer::spectrum_columns());
  csv::Writer mw = ctx.writer("weight_spectrum.csv", single_layer::spectrum_columns());
  json per = json::object();
  for (std::size_t j = 0; j < ratios.size(); ++j) {
    std::vector<Vector> e, h, f, db;
    for (int r = 0; r < reps; ++r) {
      const Res& x = res[j * static_cast<std::size_t>(reps) + static_cast<std::size_t>(r)];
      e.push_back(x.exact);
      h.push_back(x.hess);
      f.push_back(x.full);
      db.push_back(x.db);
    }
    const Vector me = mean_of(e), mh = mean_of(h), mf = mean_of(f), mdb = mean_of(db);
    const std::string tag = ratio_tag(ratios[j]);
    single_layer::write_spectrum_rows(nw, me, norm_c, "exact_k:" + tag);
    single_layer::write_spectrum_rows(nw, mh, norm_c, "hessian_limit:" + tag);
    const Res& first = res[j * static_cast<std::size_t>(reps)];
    if (first.sgd.size()) single_layer::write_spectrum_rows(nw, first.sgd, norm_c, "sgd:" + tag);
    single_layer::write_spectrum_rows(mw, mf, norm_m, "full:" + tag);
    single_layer::write_spectrum_rows(mw, mdb, norm_m, "detailed_balance:" + tag);
    const double se = me.maxCoeff() / me.minCoeff(), sh = mh.maxCoeff() / mh.minCoeff();
    per[tag] = {{"hessian_rel_dev_mean", mean_rel_dev(me, mh)},
                {"hessian_rel_dev_max", max_rel_dev(me, mh)},
                {"spread_exact", se},
                {"spread_hessian", sh},
                {"spread_mismatch", std::max(se / sh, sh / se)},
                {"db_rel_dev_mean", mean_rel_dev(mdb, mf)},
                {"db_rel_dev_max", max_rel_dev(mdb, mf)}};
  }
  ctx.summary["per_ratio"] = per;
}

// ---------------------------------------------------------------------------
// relaxation

void run_relaxation(const ExperimentConfig& c, Context& ctx) {
  std::vector<Index> modes;
  for (double m : parse_list(c.get("modes", "0,1,5,25"))) modes.push_back(static_cast<Index>(m));
  const double init_var = parse_number<double>("init.var", c.get("init.var", "0"));
  const double lambda = c.train.learning_rate;
  struct Res {
    std::vector<long> steps;
    std::vector<Vector> z;  // selected modes along the run, step 0 first
    Vector omega, z_star, z0;
    std::vector<long> loss_steps;
    std::vector<double> loss;
    double l_star = 0;
  };
  const auto res = parallel_map<Res>(ctx.jobs, c.realizations, [&](int r) {
    const DataSet d = datagen::generate(realization_spec(c, r));
    const auto sol = single_layer::solve_regression(d);
    const numlin::SymEig eig = numlin::sym_eig(sol.H);
    TrainConfig t = realization_train(c, r);
    t.keep_snapshots = true;
    Vector w0 = Vector::Zero(d.n_input());
    if (init_var > 0.0) {
      Rng rng(t.seed, Purpose::init_w);
      w0 = datagen::detail::normal_matrix(d.n_input(), 1, 0.0, std::sqrt(init_var), rng).col(0);
    }
    const sgd::Trajectory tr = sgd::sgd_run_single(d, w0, t);
    Res out;
    out.omega = eig.values;
    out.z_star = eig.vectors.transpose() * sol.w_star;
    out.z0 = eig.vectors.transpose() * w0;
    out.steps.push_back(0);
    out.z.push_back(out.z0);
    for (std::size_t k = 0; k < tr.snapshots.size(); ++k) {
      out.steps.push_back(tr.snapshot_steps[k]);
      out.z.push_back(eig.vectors.transpose() * tr.snapshots[k]);
    }
    out.loss_steps = tr.loss_steps;
    out.loss = tr.train_loss;
    out.l_star = sol.L_star;
    return out;
  });
  csv::Writer zw =
      ctx.writer("relaxation.csv", {"realization", "step", "t", "mode", "eigenvalue", "z_sgd", "z_theory"});
  csv::Writer lw = ctx.writer("relaxation_loss.csv", {"realization", "step", "t", "train_loss", "L_star"});
  json dev = json::object();
  for (int r = 0; r < c.realizations; ++r) {
    const Res& x = res[static_cast<std::size_t>(r)];
    std::vector<double> se(modes.size(), 0.0), sn(modes.size(), 0.0);
    for (std::size_t k = 0; k < x.steps.size(); ++k) {
      const double t = lambda * static_cast<double>(x.steps[k]);
      for (std::size_t m = 0; m < modes.size(); ++m) {
        const Index i = modes[m];
        const double th = x.z_star(i) + std::exp(-x.omega(i) * t) * (x.z0(i) - x.z_star(i));
        zw.row(r, x.steps[k], t, i, x.omega(i), x.z[k](i), th);
        se[m] += (x.z[k](i) - th) * (x.z[k](i) - th);
        sn[m] += (x.z0(i) - x.z_star(i)) * (x.z0(i) - x.z_star(i));
      }
    }
    for (std::size_t k = 0; k < x.loss_steps.size(); ++k)
      lw.row(r, x.loss_steps[k], lambda * static_cast<double>(x.loss_steps[k]), x.loss[k], x.l_star);
    if (r == 0) {
      for (std::size_t m = 0; m < modes.size(); ++m)
        dev[std::to_string(modes[m])] = sn[m] > 0.0 ? std::sqrt(se[m] / sn[m]) : 0.0;
      ctx.summary["L_star"] = x.l_star;
      ctx.summary["final_train_loss"] = x.loss.back();
    }
  }
  ctx.summary["relative_rms_deviation"] = dev;
}

// ---------------------------------------------------------------------------
// weight-fluct

void run_weight_fluct(const ExperimentConfig& c, Context& ctx) {
  const auto n_min = static_cast<Index>(parse_number<long>("sweep.n_min", c.get("sweep.n_min", "20")));
  const auto n_max = static_cast<Index>(parse_number<long>("sweep.n_max", c.get("sweep.n_max", "400")));
  const auto n_step = static_cast<Index>(parse_number<long>("sweep.n_step", c.get("sweep.n_step", "20")));
  const auto n_test = static_cast<Index>(parse_number<long>("test.samples", c.get("test.samples", "2000")));
  const bool from_solution = c.get("init", "solution") == "solution";
  std::vector<Index> ns;
  for (Index n = n_min; n <= n_max; n += n_step) ns.push_back(n);
  const int reps = c.realizations;
  const double lambda = c.train.learning_rate;
  const int S = c.train.batch_size;
  const Index p = c.data.samples;
  struct Res {
    double temporal, full, iso, spatial, train, test;
  };
  const auto res = parallel_map<Res>(ctx.jobs, static_cast<int>(ns.size()) * reps, [&](int i) {
    const int r = i % reps;
    DataSpec s = realization_spec(c, r);
    s.n_input = ns[static_cast<std::size_t>(i / reps)];
    const DataSet d = datagen::generate(s);
    const DataSet test = datagen::generate_test_set(d, n_test);
    const TrainConfig t = realization_train(c, r);
    const auto sol = single_layer::solve_regression(d);
    const Vector w0 = from_solution ? sol.w_star : Vector::Zero(s.n_input);
    const sgd::Trajectory tr = sgd::sgd_run_single(d, w0, t, &test);
    Res out{};
    out.temporal = sgd::finalize_covariance(tr).covariance.diagonal().mean();
    if (s.n_input < p) {
      const Matrix ce = single_layer::noise_covariance_exact(d, S, t.replacement).C;
      out.full = single_layer::stationary_covariance(sol.H, ce, lambda).M.diagonal().mean();
      out.iso = lambda * s.label_noise_var / (2.0 * S);
    }
    out.spatial = (tr.final_w - sol.w_star).squaredNorm() / static_cast<double>(s.n_input);
    out.train = segment_mean_loss(tr, t.burn_in_steps);
    out.test = segment_mean_test_loss(tr, t.burn_in_steps);
    return out;
  });
  csv::Writer w = ctx.writer("weight_fluct.csv", {"N", "temporal_var_empirical", "temporal_var_theory_full",
                                                  "temporal_var_theory_isotropic", "spatial_var", "train_loss",
                                                  "test_loss"});
  std::vector<double> test_curve;
  for (std::size_t j = 0; j < ns.size(); ++j) {
    Res m{};
    for (int r = 0; r < reps; ++r) {
      const Res& x = res[j * static_cast<std::size_t>(reps) + static_cast<std::size_t>(r)];
      m.temporal += x.temporal / reps;
      m.full += x.full / reps;
      m.iso += x.iso / reps;
      m.spatial += x.spatial / reps;
      m.train += x.train / reps;
      m.test += x.test / reps;
    }
    w.row(ns[j], m.temporal, m.full, m.iso, m.spatial, m.train, m.test);
    test_curve.push_back(m.test);
  }
  const auto peak = static_cast<std::size_t>(std::max_element(test_curve.begin(), test_curve.end()) - test_curve.begin());
  bool left = peak >= 2 && test_curve[peak - 2] < test_curve[peak - 1] && test_curve[peak - 1] < test_curve[peak];
  bool right = peak + 2 < test_curve.size() && test_curve[peak + 1] < test_curve[peak] &&
               test_curve[peak + 2] < test_curve[peak + 1];
  ctx.summary["peak_N"] = ns[peak];
  ctx.summary["peak_test_loss"] = test_curve[peak];
  ctx.summary["rising_before_peak"] = left;
  ctx.summary["falling_after_peak"] = right;
}

// ---------------------------------------------------------------------------
// loss-pert-1l

void run_loss_pert_1l(const ExperimentConfig& c, Context& ctx) {
  const double theta_max = parse_number<double>("probe.theta_max", c.get("probe.theta_max", "1"));
  const int points = parse_number<int>("probe.points", c.get("probe.points", "11"));
  const std::vector<double> grid = linspace(-theta_max, theta_max, points);
  struct Res {
    Vector cov_eig;
    Matrix delta;  // modes x grid
  };
  const auto res = parallel_map<Res>(ctx.jobs, c.realizations, [&](int r) {
    const DataSet d = datagen::generate(realization_spec(c, r));
    const auto sol = single_layer::solve_regression(d);
    const sgd::Trajectory tr = sgd::sgd_run_single(d, sol.w_star, realization_train(c, r));
    const numlin::SymEig e = numlin::sym_eig(sgd::finalize_covariance(tr).covariance);
    const Matrix v = e.vectors.rowwise().reverse();
    const auto rows = single_layer::loss_perturbation_probe(d, sol.w_star, v, grid);
    Res out{e.values.reverse(), Matrix(v.cols(), static_cast<Index>(grid.size()))};
    for (const auto& row : rows) {
      const auto g = static_cast<Index>(std::find(grid.begin(), grid.end(), row.theta) - grid.begin());
      out.delta(row.mode, g) = row.delta_loss;
    }
    return out;
  });
  Matrix delta = Matrix::Zero(res.front().delta.rows(), res.front().delta.cols());
  Vector eig = Vector::Zero(res.front().cov_eig.size());
  for (const auto& x : res) {
    delta += x.delta / c.realizations;
    eig += x.cov_eig / c.realizations;
  }
  csv::Writer w = ctx.writer("loss_pert.csv", {"source_tag", "mode", "theta", "delta_loss", "delta_over_theta2"});
  for (Index k = 0; k < delta.rows(); ++k)
    for (std::size_t g = 0; g < grid.size(); ++g) {
      const double th = grid[g];
      const double dl = delta(k, static_cast<Index>(g));
      w.row("sgd", k, th, dl, th == 0.0 ? 0.0 : dl / (th * th));
    }
  const double pred = 0.5 * c.data.input_variance();
  csv::Writer sw = ctx.writer("loss_pert_summary.csv", {"mode", "covariance_eigenvalue", "delta_over_theta2",
                                                        "prediction", "relative_deviation"});
  const Index last = static_cast<Index>(grid.size()) - 1;
  Vector r2(delta.rows());
  for (Index k = 0; k < delta.rows(); ++k) {
    r2(k) = delta(k, last) / (grid.back() * grid.back());
    sw.row(k, eig(k), r2(k), pred, r2(k) / pred - 1.0);
  }
  const Vector rel = r2.array() / pred - 1.0;
  ctx.summary["prediction"] = pred;
  ctx.summary["mean_delta_over_theta2"] = r2.mean();
  ctx.summary["rms_relative_deviation"] = std::sqrt(rel.squaredNorm() / static_cast<double>(rel.size()));
  ctx.summary["max_relative_deviation"] = rel.cwiseAbs().maxCoeff();
  ctx.summary["relative_spread"] = (r2.maxCoeff() - r2.minCoeff()) / r2.mean();
}

// ---------------------------------------------------------------------------
// two-layer pipelines

struct TwoLayerSetup {
  DataSet d;
  TwoLayerWeights w0;
  TrainConfig train;
  two_layer::NoiseStats st;
};

TwoLayerSetup two_layer_setup(const ExperimentConfig& c, int r) {
  TwoLayerSetup s;
  s.d = datagen::generate(realization_spec(c, r));
  s.train = realization_train(c, r);
  s.w0 = init_weights(c, s.train.seed);
  s.st = two_layer::noise_stats(s.d, s.train.learning_rate, s.train.batch_size);
  return s;
}

two_layer::TwoLayerCovariance theory_at(const TwoLayerWeights& w, const two_layer::NoiseStats& st) {
  const two_layer::ReferenceSvd r = two_layer::reference_svd(w);
  return two_layer::stationary_covariance_2l(two_layer::drift_diffusion(r, st.x_var, st.sigma_R2()), r);
}

void run_two_layer_cov(const ExperimentConfig& c, Context& ctx) {
  const int segments = parse_number<int>("segments", c.get("segments", "10"));
  const Index n1 = c.n_hidden * c.data.n_input, n2 = c.data.n_output * c.n_hidden;
  struct Res {
    Vector sgd_w2, th_w2, sgd_w1, th_w1, iid_w2, iid_w1;
    std::optional<sgd::LocalModeVariances> modes;
    double y_sq = 0, d2_first = 0, d2_last = 0;
  };
  const auto res = parallel_map<Res>(ctx.jobs, c.realizations, [&](int r) {
    const TwoLayerSetup s = two_layer_setup(c, r);
    const sgd::SegmentedRun run =
        sgd::segmented_run(s.w0, s.train, segments, [&](const TwoLayerWeights& w, const TrainConfig& t) {
          return sgd::sgd_run_two_layer(s.d, w, t, sgd::Scope::both);
        });
    std::vector<Vector> a, b, e, f;
    for (std::size_t k = 0; k < run.means.size(); ++k) {
      const auto& snaps = run.snapshots[k];
      std::vector<Vector> w1, w2;
      for (const auto& x : snaps) {
        w1.push_back(x.head(n1));
        w2.push_back(x.tail(n2));
      }
      a.push_back(sym_values_desc(sgd::detrended_covariance(w2, 0, w2.size())));
      e.push_back(sym_values_desc(sgd::detrended_covariance(w1, 0, w1.size())));
      const two_layer::TwoLayerCovariance th = theory_at(run.means[k], s.st);
      b.push_back(sym_values_desc(th.cov_dw2));
      f.push_back(sym_values_desc(th.cov_dw1));
    }
    Res out;
    out.sgd_w2 = mean_of(a);
    out.th_w2 = mean_of(b);
    out.sgd_w1 = mean_of(e);
    out.th_w1 = mean_of(f);
    const two_layer::TwoLayerCovariance iid = theory_at(init_weights(c, mix64(s.train.seed)), s.st);
    out.iid_w2 = sym_values_desc(iid.cov_dw2);
    out.iid_w1 = sym_values_desc(iid.cov_dw1);
    out.y_sq = s.st.y_sq;
    out.d2_first = two_layer::reference_svd(run.means.front()).d2(0);
    out.d2_last = two_layer::reference_svd(run.means.back()).d2(0);
    if (c.data.n_output == 1 && segments >= 2) {
      const double lambda = s.train.learning_rate;
      const int batch = s.train.batch_size;
      out.modes = sgd::local_second_layer_variances(run, [&](const two_layer::ReferenceSvd& ref) {
        return two_layer::m22_closed_form(ref, lambda, s.st.y_sq, batch).exact;
      });
    }
    return out;
  });
  auto avg = [&](auto member) {
    std::vector<Vector> v;
    for (const auto& x : res) v.push_back(x.*member);
    return mean_of(v);
  };
  double y_sq = 0;
  for (const auto& x : res) y_sq += x.y_sq / c.realizations;
  const double norm = c.train.learning_rate * y_sq / (2.0 * c.train.batch_size);
  csv::Writer w = ctx.writer("two_layer_cov.csv", single_layer::spectrum_columns());
  const Vector sw2 = avg(&Res::sgd_w2), tw2 = avg(&Res::th_w2);
  single_layer::write_spectrum_rows(w, sw2, norm, "sgd_w2");
  single_layer::write_spectrum_rows(w, tw2, norm, "theory_m22");
  single_layer::write_spectrum_rows(w, avg(&Res::iid_w2), norm, "theory_m22_iid_init");
  const Vector sw1 = avg(&Res::sgd_w1), tw1 = avg(&Res::th_w1);
  single_layer::write_spectrum_rows(w, sw1, norm, "sgd_w1");
  single_layer::write_spectrum_rows(w, tw1, norm, "theory_m11");
  single_layer::write_spectrum_rows(w, avg(&Res::iid_w1), norm, "theory_m11_iid_init");
  ctx.summary["top_w2_ratio"] = sw2(0) / tw2(0);
  ctx.summary["top_w1_ratio"] = sw1(0) / tw1(0);
  ctx.summary["d2_first_segment"] = res.front().d2_first;
  ctx.summary["d2_last_segment"] = res.front().d2_last;
  if (res.front().modes) {
    const auto& lv = *res.front().modes;
    csv::Writer mw = ctx.writer("two_layer_modes.csv", {"mode", "d1", "variance_sgd", "variance_theory", "ratio",
                                                        "ratio_stderr"});
    const Vector d1 = [&] {
      Vector v = Vector::Zero(lv.measured.cols());
      for (const auto& r : lv.references) v += r.d1;
      return Vector(v / static_cast<double>(lv.references.size()));
    }();
    for (Index k = 0; k < lv.measured.cols(); ++k)
      mw.row(k, d1(k), lv.measured.col(k).mean(), lv.theory.col(k).mean(), lv.mean_ratio(k), lv.ratio_stderr(k));
    ctx.summary["leading_mode_ratio"] = lv.mean_ratio(0);
    ctx.summary["leading_mode_ratio_stderr"] = lv.ratio_stderr(0);
  }
}

void run_ivfr(const ExperimentConfig& c, Context& ctx) {
  const int segments = parse_number<int>("segments", c.get("segments", "6"));
  const double theta_max = parse_number<double>("ivfr.theta_max", c.get("ivfr.theta_max", "0.1"));
  const int points = parse_number<int>("ivfr.points", c.get("ivfr.points", "9"));
  const double max_ratio = parse_number<double>("ivfr.max_d1_over_d2", c.get("ivfr.max_d1_over_d2", "1"));
  const std::vector<double> grid = linspace(-theta_max, theta_max, points);
  struct Res {
    Vector variance, se2, curvature, d1;
    double d2 = 0;
    two_layer::IvfrResult approx, exact;
  };
  const auto res = parallel_map<Res>(ctx.jobs, c.realizations, [&](int r) {
    const TwoLayerSetup s = two_layer_setup(c, r);
    const double lambda = s.train.learning_rate;
    const int batch = s.train.batch_size;
    const sgd::SegmentedRun run =
        sgd::segmented_run(s.w0, s.train, segments, [&](const TwoLayerWeights& w, const TrainConfig& t) {
          return sgd::sgd_run_two_layer(s.d, w, t, sgd::Scope::w2);
        });
    const sgd::LocalModeVariances lv = sgd::local_second_layer_variances(run, [&](const two_layer::ReferenceSvd& ref) {
      return two_layer::m22_closed_form(ref, lambda, s.st.y_sq, batch).exact;
    });
    const Index nh = c.n_hidden;
    Res out{Vector::Zero(nh), Vector::Zero(nh), Vector::Zero(nh), Vector::Zero(nh), 0.0, {}, {}};
    const double nb = static_cast<double>(run.means.size());
    for (std::size_t b = 0; b < run.means.size(); ++b) {
      const auto& ref = lv.references[b];
      const Vector measured = lv.measured.row(static_cast<Index>(b)).transpose();
      const two_layer::IvfrResult p = two_layer::ivfr_probe(run.means[b], ref, s.d, grid, measured);
      for (Index k = 0; k < nh; ++k) out.curvature(k) += p.rows[static_cast<std::size_t>(k)].curvature / nb;
      out.variance += measured / nb;
      out.se2 += lv.measured_se.row(static_cast<Index>(b)).transpose().cwiseAbs2() / (nb * nb);
      out.d1 += ref.d1 / nb;
      out.d2 += ref.d2(0) / nb;
    }
    const TwoLayerWeights& last = run.means.back();
    const two_layer::ReferenceSvd rl = two_layer::reference_svd(last);
    out.approx = two_layer::ivfr_probe(last, rl, s.d, grid, lambda, s.st.y_sq, batch, true);
    out.exact = two_layer::ivfr_probe(last, rl, s.d, grid, lambda, s.st.y_sq, batch, false);
    return out;
  });
  const Index nh = c.n_hidden;
  Vector var = Vector::Zero(nh), se2 = Vector::Zero(nh), curv = Vector::Zero(nh), d1 = Vector::Zero(nh);
  double d2 = 0;
  const double nr = static_cast<double>(res.size());
  for (const auto& x : res) {
    var += x.variance / nr;
    se2 += x.se2 / (nr * nr);
    curv += x.curvature / nr;
    d1 += x.d1 / nr;
    d2 += x.d2 / nr;
  }
  const Vector se = se2.cwiseSqrt();
  std::vector<two_layer::IvfrRow> rows;
  std::vector<bool> use;
  for (Index k = 0; k < nh; ++k) {
    const double f = curv(k) > 0.0 ? 1.0 / std::sqrt(curv(k)) : std::numeric_limits<double>::infinity();
    rows.push_back({k, d1(k), var(k), curv(k), f});
    use.push_back(d1(k) < max_ratio * d2);
  }
  auto fit_or_nan = [&](const std::vector<bool>& mask, const std::string& what) {
    try {
      return two_layer::fit_ivfr(rows, se, mask);
    } catch (const InsufficientSpread& e) {
      ctx.diagnostics.push_back({"warning", "insufficient_spread", what + ": " + e.what()});
      two_layer::IvfrResult r;
      r.rows = rows;
      r.psi = r.psi_stderr = std::nan("");
      return r;
    }
  };
  const two_layer::IvfrResult fit = fit_or_nan(use, "fit over modes with d1 < d2");
  const two_layer::IvfrResult all = fit_or_nan({}, "fit over all modes");
  csv::Writer w = ctx.writer("ivfr.csv", {"mode", "variance", "curvature", "flatness", "psi_fit", "variance_stderr",
                                          "d1", "used"});
  for (Index k = 0; k < nh; ++k) {
    const auto& row = fit.rows[static_cast<std::size_t>(k)];
    w.row(k, row.variance, row.curvature, row.flatness, fit.psi, se(k), row.d1, use[static_cast<std::size_t>(k)] ? 1 : 0);
  }
  csv::Writer tw = ctx.writer("ivfr_theory.csv", {"source", "mode", "variance", "curvature", "flatness", "psi_fit"});
  for (const auto* t : {&res.front().approx, &res.front().exact}) {
    const std::string src = t == &res.front().approx ? "approx" : "exact";
    for (const auto& row : t->rows) tw.row(src, row.mode, row.variance, row.curvature, row.flatness, t->psi);
  }
  ctx.summary["psi_fit"] = fit.psi;
  ctx.summary["psi_stderr"] = fit.psi_stderr;
  ctx.summary["modes_used"] = fit.modes_used;
  ctx.summary["psi_all_modes"] = all.psi;
  ctx.summary["psi_all_modes_stderr"] = all.psi_stderr;
  ctx.summary["psi_theory_approx"] = res.front().approx.psi;
  ctx.summary["psi_theory_exact"] = res.front().exact.psi;
  ctx.summary["d2_mean"] = d2;
}

void run_w1_pert(const ExperimentConfig& c, Context& ctx) {
  const double theta = parse_number<double>("probe.theta", c.get("probe.theta", "0.1"));
  const bool with_sgf = parse_bool("sgf", c.get("sgf", "true"));
  using Rows = std::vector<two_layer::W1PerturbationRow>;
  struct Res {
    Rows sgd, theory, sgf;
  };
  const auto res = parallel_map<Res>(ctx.jobs, c.realizations, [&](int r) {
    const TwoLayerSetup s = two_layer_setup(c, r);
    TrainConfig t = s.train;
    t.keep_snapshots = true;
    t.steps = s.train.steps + s.train.burn_in_steps;
    Res out;
    {
      const sgd::Trajectory tr = sgd::sgd_run_two_layer(s.d, s.w0, t, sgd::Scope::w1);
      const Matrix cov = sgd::detrended_covariance(tr.snapshots, 0, tr.snapshots.size());
      out.sgd = two_layer::w1_perturbation_probe(tr.mean_weights, cov, s.d, theta);
      out.theory = two_layer::w1_perturbation_probe(tr.mean_weights, theory_at(tr.mean_weights, s.st).cov_dw1, s.d,
                                                    theta);
    }
    if (with_sgf) {
      const sgd::Trajectory tr = sgd::sgf_run_two_layer(s.d, s.w0, t, {}, sgd::Scope::w1);
      const Matrix cov = sgd::detrended_covariance(tr.snapshots, 0, tr.snapshots.size());
      out.sgf = two_layer::w1_perturbation_probe(tr.mean_weights, cov, s.d, theta);
    }
    return out;
  });
  csv::Writer w = ctx.writer("w1_pert.csv", {"source_tag", "mode", "eigenvalue", "delta_loss", "delta_over_theta2",
                                             "beyond_input_dim"});
  json per = json::object();
  auto emit = [&](const std::string& tag, Rows Res::*member) {
    const Rows& first = res.front().*member;
    if (first.empty()) return;
    double in = 0, out = 0;
    long nin = 0, nout = 0;
    for (std::size_t k = 0; k < first.size(); ++k) {
      double ev = 0, dl = 0, q = 0;
      for (const auto& x : res) {
        const auto& row = (x.*member)[k];
        ev += row.eigenvalue / static_cast<double>(res.size());
        dl += row.delta_loss / static_cast<double>(res.size());
        q += row.delta_over_theta2 / static_cast<double>(res.size());
      }
      w.row(tag, first[k].mode, ev, dl, q, first[k].beyond_input_dim ? 1 : 0);
      if (first[k].beyond_input_dim) {
        out += q;
        ++nout;
      } else {
        in += q;
        ++nin;
      }
    }
    per[tag] = {{"mean_within_input_dim", nin ? in / nin : 0.0}, {"mean_beyond_input_dim", nout ? out / nout : 0.0}};
  };
  emit("sgd", &Res::sgd);
  emit("theory", &Res::theory);
  emit("sgf", &Res::sgf);
  ctx.summary["delta_over_theta2"] = per;
}

using Pipeline = void (*)(const ExperimentConfig&, Context&);

const std::map<std::string, Pipeline>& pipelines() {
  static const std::map<std::string, Pipeline> m{
      {"projector-stats", run_projector_stats}, {"noise-spectrum", run_noise_spectrum},
      {"relaxation", run_relaxation},           {"weight-fluct", run_weight_fluct},
      {"loss-pert-1l", run_loss_pert_1l},       {"two-layer-cov", run_two_layer_cov},
      {"ivfr", run_ivfr},                       {"w1-pert", run_w1_pert}};
  return m;
}

json diagnostics_json(const std::vector<Diagnostic>& d) {
  json a = json::array();
  for (const auto& x : d) a.push_back({{"severity", x.severity}, {"code", x.code}, {"message", x.message}});
  return a;
}

}  // namespace

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::string t = trim(item);
    if (t.empty()) continue;
    out.push_back(parse_number<double>("list", t));
  }
  return out;
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig c;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto h = line.find('#'); h != std::string_view::npos) line = line.substr(0, h);
    const std::string l = trim(line);
    if (l.empty()) {
      if (end == text.size()) break;
      continue;
    }
    const auto eq = l.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(std::string_view(l).substr(0, eq));
    const std::string value = trim(std::string_view(l).substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    if (!seen.insert(key).second) throw ConfigError("duplicate key " + key);
    const auto& fields = core_fields();
    if (const auto it = fields.find(key); it != fields.end()) {
      it->second.set(c, key, value);
    } else if (is_core_prefix(key)) {
      throw ConfigError("unknown key " + key);
    } else {
      c.extra[key] = value;
    }
    if (end == text.size()) break;
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const ExperimentConfig& c) {
  std::map<std::string, std::string> kv;
  for (const auto& [k, f] : core_fields())
    if (auto v = f.get(c)) kv[k] = *v;
  for (const auto& [k, v] : c.extra) kv[k] = v;
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

std::uint64_t config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : format_config(c)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

const std::vector<std::string>& registry() {
  static const std::vector<std::string> r{"projector-stats", "noise-spectrum", "relaxation", "weight-fluct",
                                          "loss-pert-1l",    "two-layer-cov",  "ivfr",       "w1-pert"};
  return r;
}

const std::vector<std::string>& extra_keys(const std::string& experiment) {
  static const std::map<std::string, std::vector<std::string>> m{
      {"projector-stats", {"sweep.ratios", "sweep.n_values", "k.samples"}},
      {"noise-spectrum", {"sweep.ratios", "sgd.measure", "sgd.draws"}},
      {"relaxation", {"modes", "init.var"}},
      {"weight-fluct", {"sweep.n_min", "sweep.n_max", "sweep.n_step", "test.samples", "init"}},
      {"loss-pert-1l", {"probe.theta_max", "probe.points"}},
      {"two-layer-cov", {"segments"}},
      {"ivfr", {"segments", "ivfr.theta_max", "ivfr.points", "ivfr.max_d1_over_d2"}},
      {"w1-pert", {"probe.theta", "sgf"}}};
  static const std::vector<std::string> none;
  const auto it = m.find(experiment);
  return it == m.end() ? none : it->second;
}

ExperimentConfig default_config(const std::string& e) {
  ExperimentConfig c;
  c.experiment = e;
  c.output_dir = "out/" + e;
  c.data.seed = 1;
  c.train.seed = 2;
  c.train.learning_rate = 0.1;
  c.train.batch_size = 10;
  if (e == "projector-stats") {
    c.data.n_input = 50;
    c.data.samples = 100;
    c.data.label_noise_var = 0.01;
    c.realizations = 20;
    c.extra = {{"sweep.ratios", "2,4,8,16"}, {"sweep.n_values", "25,50,100"}, {"k.samples", "70,100,200,500,1000,10000"}};
  } else if (e == "noise-spectrum") {
    c.data.n_input = 100;
    c.data.samples = 200;
    c.data.label_noise_var = 0.01;
    c.realizations = 20;
    c.train.steps = 50000;
    c.extra = {{"sweep.ratios", "1.1,2,50"}, {"sgd.measure", "true"}, {"sgd.draws", "2000"}};
  } else if (e == "relaxation") {
    c.data.n_input = 50;
    c.data.samples = 52;
    c.data.label_noise_var = 0.01;
    c.train.steps = 200000;
    c.train.record_every = 100;
    c.extra = {{"modes", "0,1,5,25"}};
  } else if (e == "weight-fluct") {
    c.data.n_input = 20;
    c.data.samples = 200;
    c.data.label_noise_var = 0.25;
    c.train.steps = 300000;
    c.train.burn_in_steps = 100000;
    c.extra = {{"sweep.n_min", "20"}, {"sweep.n_max", "400"}, {"sweep.n_step", "20"}, {"test.samples", "2000"}, {"init", "solution"}};
  } else if (e == "loss-pert-1l") {
    c.data.n_input = 100;
    c.data.samples = 2000;
    c.data.label_noise_var = 0.25;
    c.train.steps = 1000000;
    c.train.burn_in_steps = 20000;
    c.extra = {{"probe.theta_max", "1"}, {"probe.points", "11"}};
  } else if (e == "two-layer-cov") {
    c.data.covariance_kind = datagen::CovarianceKind::whitened;
    c.data.n_input = 30;
    c.data.samples = 1000;
    c.data.teacher_var = 0.0;
    c.data.label_noise_var = 0.1;
    c.n_hidden = 20;
    c.init_var_w1 = 1e-4 / 30.0;
    c.init_var_w2 = 1e-4 / 20.0;
    c.train.steps = 50000;
    c.train.burn_in_steps = 100000;
    c.extra = {{"segments", "10"}};
  } else if (e == "ivfr") {
    c.data.covariance_kind = datagen::CovarianceKind::whitened;
    c.data.n_input = 50;
    c.data.samples = 5000;
    c.data.teacher_var = 0.0;
    c.data.label_noise_var = 1.0;
    c.n_hidden = 40;
    c.train.steps = 300000;
    c.train.burn_in_steps = 200000;
    c.train.record_every = 50;
    c.extra = {{"segments", "6"}, {"ivfr.theta_max", "0.1"}, {"ivfr.points", "9"}, {"ivfr.max_d1_over_d2", "1"}};
  } else if (e == "w1-pert") {
    c.data.covariance_kind = datagen::CovarianceKind::whitened;
    c.data.n_input = 30;
    c.data.samples = 1000;
    c.data.teacher_var = 0.0;
    c.data.label_noise_var = 1.0;
    c.n_hidden = 20;
    c.train.steps = 200000;
    c.train.burn_in_steps = 100000;
    c.train.record_every = 20;
    c.extra = {{"probe.theta", "0.1"}, {"sgf", "true"}};
  } else {
    throw ConfigError("unknown experiment '" + e + "'");
  }
  return c;
}

std::vector<Diagnostic> validate(const ExperimentConfig& c) {
  std::vector<Diagnostic> out;
  auto error = [&](const std::string& code, const std::string& msg) { out.push_back({"error", code, msg}); };
  const auto& reg = registry();
  if (std::find(reg.begin(), reg.end(), c.experiment) == reg.end()) {
    error("unknown_experiment", "unknown experiment '" + c.experiment + "'");
    return out;
  }
  if (c.realizations < 1) error("realizations", "run.realizations must be at least 1");
  try {
    c.data.validate();
  } catch (const Error& e) {
    error("data", e.what());
  }
  try {
    c.train.validate(c.data.samples);
  } catch (const Error& e) {
    error("train", e.what());
  }
  const auto& allowed = extra_keys(c.experiment);
  for (const auto& [k, v] : c.extra) {
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
      error("unknown_key", "key " + k + " is not used by " + c.experiment);
      continue;
    }
    try {
      if (k == "sgd.measure" || k == "sgf") {
        parse_bool(k, v);
      } else if (k == "init") {
        if (v != "solution" && v != "zero") error("bad_value", "init must be 'solution' or 'zero'");
      } else {
        const auto list = parse_list(v);
        if (list.empty()) error("bad_value", "empty value for " + k);
      }
    } catch (const Error& e) {
      error("bad_value", e.what());
    }
  }
  if (!out.empty()) return out;

  const bool two = two_layer_experiments().count(c.experiment) > 0;
  const Index p = c.data.samples, n = c.data.n_input;
  if (two) {
    if (c.n_hidden < 1) error("model", "model.n_hidden must be positive");
    if (n >= p) {
      error("two_layer_regime", "two-layer stationarity requires N_i < P (N_i = " + std::to_string(n) +
                                    ", P = " + std::to_string(p) + ")");
    }
    if ((c.experiment == "ivfr" || c.experiment == "two-layer-cov") && c.data.n_output != 1)
      error("model", c.experiment + " requires data.n_output = 1");
    if (c.experiment == "ivfr" && c.n_hidden > n) error("model", "ivfr requires N_h <= N_i");
    if (c.n_hidden < c.data.n_output) error("model", "N_o must not exceed N_h");
    if (c.init_var_w1 < 0.0 || c.init_var_w2 < 0.0) error("model", "initial variances must be non-negative");
    if (c.experiment != "w1-pert") {
      const int seg = static_cast<int>(parse_list(c.get("segments", "2")).front());
      if (seg < 2) error("segments", "segments must be at least 2");
    }
  } else if (c.data.n_output != 1) {
    error("model", c.experiment + " is a single-output experiment");
  }
  if (c.experiment == "projector-stats" || c.experiment == "noise-spectrum") {
    for (double r : parse_list(c.get("sweep.ratios", "2")))
      if (!(r > 1.0)) error("sweep", "sweep.ratios entries must exceed 1 (P > N)");
  }
  if (c.experiment == "projector-stats") {
    for (double k : parse_list(c.get("k.samples", "70")))
      if (!(k > static_cast<double>(n))) error("sweep", "k.samples entries must exceed data.n_input");
  }
  if ((c.experiment == "relaxation" || c.experiment == "loss-pert-1l") && n >= p)
    error("regime", c.experiment + " requires N < P");
  if (c.experiment == "relaxation") {
    for (double m : parse_list(c.get("modes", "0")))
      if (m < 0 || m >= static_cast<double>(n)) error("modes", "mode index out of range");
  }
  if (c.experiment == "weight-fluct") {
    const auto lo = parse_list(c.get("sweep.n_min", "20")).front(), hi = parse_list(c.get("sweep.n_max", "400")).front();
    const auto st = parse_list(c.get("sweep.n_step", "20")).front();
    if (!(lo >= 1 && hi >= lo && st >= 1)) error("sweep", "need 1 <= sweep.n_min <= sweep.n_max and sweep.n_step >= 1");
  }
  if (c.train.steps <= c.train.burn_in_steps && c.experiment != "relaxation" && c.experiment != "projector-stats" &&
      !two && c.experiment != "noise-spectrum") {
    error("train", "train.steps must exceed train.burn_in_steps");
  }
  if (!out.empty() || c.experiment == "projector-stats") return out;

  // Linear stability estimate from a sampled Hessian at the largest N/P used.
  DataSpec s = c.data;
  if (c.experiment == "weight-fluct") s.n_input = static_cast<Index>(parse_list(c.get("sweep.n_max", "400")).front());
  if (c.experiment == "noise-spectrum") {
    const auto r = parse_list(c.get("sweep.ratios", "2"));
    s.samples = static_cast<Index>(std::llround(*std::min_element(r.begin(), r.end()) * static_cast<double>(n)));
  }
  const DataSet d = datagen::generate(s);
  const double wmax = numlin::sym_eig(d.sigma_xx()).values.maxCoeff();
  if (c.train.learning_rate > 2.0 / wmax) {
    out.push_back({"warning", "instability",
                   "learning rate " + csv::cell(c.train.learning_rate) + " exceeds the stability estimate 2/omega_max = " +
                       csv::cell(2.0 / wmax)});
  }
  return out;
}

json RunManifest::to_json() const {
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(config_hash));
  return {{"experiment", experiment}, {"config_hash", hex},        {"seed", seed},
          {"version", version},       {"wall_time_s", wall_time_s}, {"files", files},
          {"diagnostics", diagnostics_json(diagnostics)},           {"summary", summary}};
}

RunManifest run_experiment(const ExperimentConfig& c, const RunOptions& opt) {
  const std::vector<Diagnostic> diags = validate(c);
  std::string msg;
  for (const auto& d : diags)
    if (d.severity == "error") msg += (msg.empty() ? "" : "; ") + d.message;
  if (!msg.empty()) throw ConfigError(msg);
  const auto t0 = std::chrono::steady_clock::now();
  Context ctx;
  ctx.dir = opt.out ? *opt.out : std::filesystem::path(c.output_dir);
  ctx.jobs = std::max(1, opt.jobs);
  std::filesystem::create_directories(ctx.dir);
  {
    std::ofstream(ctx.dir / "config.cfg", std::ios::binary) << format_config(c);
    ctx.files.push_back("config.cfg");
  }
  pipelines().at(c.experiment)(c, ctx);
  RunManifest m;
  m.experiment = c.experiment;
  m.config_hash = config_hash(c);
  m.seed = c.data.seed;
  m.version = SGFLAB_VERSION;
  m.files = ctx.files;
  m.diagnostics = diags;
  m.diagnostics.insert(m.diagnostics.end(), ctx.diagnostics.begin(), ctx.diagnostics.end());
  m.summary = ctx.summary;
  m.output_dir = ctx.dir;
  m.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ofstream(ctx.dir / "manifest.json", std::ios::binary) << m.to_json().dump(2) << '\n';
  return m;
}

}  // namespace sgflab::expcli
