#pragma once

// Data generators for the four benchmark scenarios, the moment-matching
// and iterative calibrations that pin the external-control coefficient
// limits, the marginal-truth oracle, and the Monte Carlo engine that
// aggregates bias / SD / coverage per method.
//
// Common structure: three covariates, X ~ N3(0, I) in the trial and
// N3((-0.2, 0.4, 1)', I) in the external source, 1:1 Bernoulli
// treatment assignment inside the trial, and an outcome law that never
// depends on treatment, so the true effect is zero on every scale.
//   A: linear,   y = (1,x)'beta + (1-z)(1,x)'gamma + eps
//   B: linear plus curvature 0.5*x1*x2 + 0.25*(x3^2 - 1), with gamma
//      moment-matched so the external-minus-internal coefficient limit
//      stays (0...,0.75...)
//   C: logistic with the Scenario-A linear predictor
//   D: logistic with the Scenario-B curvature, gamma calibrated
//      numerically on large simulated samples

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "gcvs/common.hpp"
#include "gcvs/data_model.hpp"
#include "gcvs/estimators.hpp"
#include "gcvs/inference.hpp"
#include "gcvs/rng.hpp"

namespace gcvs {

// First 4-m entries zero, last m entries 0.75: the intercept shift is
// the first interaction coordinate, so small m perturbs covariate
// slopes before the intercept.
inline Eigen::Vector4d interaction_target(int m) {
  if (m < 0 || m > 4) throw ConfigError("m must be in 0..4");
  Eigen::Vector4d g = Eigen::Vector4d::Zero();
  for (int j = 4 - m; j < 4; ++j) g[j] = 0.75;
  return g;
}

struct ScenarioSpec {
  char scenario = 'A';
  int m = 0;
  int n1 = 200;
  int n0 = 200;
  double pi = 0.5;
  OutcomeKind outcome_kind = OutcomeKind::continuous;
  Link link = Link::identity();
  Eigen::Vector3d nu1{0.0, 0.0, 0.0};
  Eigen::Vector3d nu0{-0.2, 0.4, 1.0};
  Eigen::Vector4d beta{0.5, -0.5, 0.5, -0.5};
  Eigen::Vector4d gamma_target = Eigen::Vector4d::Zero();
  Eigen::Vector4d gamma = Eigen::Vector4d::Zero();  // generator coefficients
  bool gamma_calibrated = false;
  double noise_sd = 0.2;      // continuous scenarios
  double xprod_coef = 0.0;    // coefficient on x1*x2 (B, D)
  double xsq_coef = 0.0;      // coefficient on x3^2 - 1 (B, D)

  bool needs_calibration() const { return scenario == 'B' || scenario == 'D'; }
};

inline ScenarioSpec make_scenario(char scenario, int m, int n1, int n0) {
  if (scenario != 'A' && scenario != 'B' && scenario != 'C' && scenario != 'D') {
    throw ConfigError("scenario must be one of A, B, C, D");
  }
  if (n1 < 1 || n0 < 0) throw ConfigError("need n1 >= 1 and n0 >= 0");
  ScenarioSpec s;
  s.scenario = scenario;
  s.m = m;
  s.n1 = n1;
  s.n0 = n0;
  s.gamma_target = interaction_target(m);
  const bool binary = scenario == 'C' || scenario == 'D';
  s.outcome_kind = binary ? OutcomeKind::binary : OutcomeKind::continuous;
  s.link = binary ? Link::logit() : Link::identity();
  if (scenario == 'B' || scenario == 'D') {
    s.xprod_coef = 0.5;
    s.xsq_coef = 0.25;
    s.gamma = s.gamma_target;  // placeholder until calibrated
    s.gamma_calibrated = false;
  } else {
    s.gamma = s.gamma_target;
    s.gamma_calibrated = true;
  }
  return s;
}

namespace detail {

inline double scenario_eta(const ScenarioSpec& s, const double* x, int z) {
  double eta = s.beta[0] + s.beta[1] * x[0] + s.beta[2] * x[1] +
               s.beta[3] * x[2];
  if (z == 0) {
    eta += s.gamma[0] + s.gamma[1] * x[0] + s.gamma[2] * x[1] +
           s.gamma[3] * x[2];
  }
  eta += s.xprod_coef * x[0] * x[1] + s.xsq_coef * (x[2] * x[2] - 1.0);
  return eta;
}

}  // namespace detail

// Internal rows are drawn first, and each row consumes a fixed number
// of stream values, so internal data are bit-identical across choices
// of the interaction vector under a shared seed.
inline StudyDataset generate(const ScenarioSpec& s, RngStream& rng) {
  if (s.needs_calibration() && !s.gamma_calibrated) {
    throw ConfigError("scenario requires calibrated gamma before generation");
  }
  std::vector<StudyRow> rows;
  rows.reserve(static_cast<std::size_t>(s.n1 + s.n0));
  const bool binary = s.outcome_kind == OutcomeKind::binary;
  for (int i = 0; i < s.n1 + s.n0; ++i) {
    const bool internal = i < s.n1;
    StudyRow r;
    r.z = internal ? 1 : 0;
    r.x.resize(3);
    const Eigen::Vector3d& nu = internal ? s.nu1 : s.nu0;
    for (int k = 0; k < 3; ++k) r.x[static_cast<std::size_t>(k)] = nu[k] + rng.normal();
    r.a = internal && rng.bernoulli(s.pi) ? 1 : 0;
    const double eta = detail::scenario_eta(s, r.x.data(), r.z);
    if (binary) {
      r.y = rng.uniform() < expit(eta) ? 1.0 : 0.0;
    } else {
      r.y = eta + s.noise_sd * rng.normal();
    }
    rows.push_back(std::move(r));
  }
  return StudyDataset(std::move(rows), s.outcome_kind);
}

struct GammaBResult {
  Eigen::Vector4d gamma_b;
  Eigen::Vector4d correction_closed;  // E[dd'|ext]^{-1} E[q(x) d|ext]
  Eigen::Vector4d correction_mc;
  double max_check_diff = 0.0;
  std::uint64_t oracle_seed = 0;
};

inline constexpr std::uint64_t kGammaBOracleSeed = 0x5CA1AB1E0001ull;

// Moment-matching for the curved continuous scenario: subtract from the
// interaction target the population regression of the curvature terms
// on (1, x') within the external source, computed in closed form from
// Gaussian moments and cross-checked against a Monte Carlo evaluation.
inline GammaBResult calibrate_gamma_B(int m,
                                      std::int64_t mc_draws = 10'000'000,
                                      std::uint64_t oracle_seed =
                                          kGammaBOracleSeed,
                                      double xprod_coef = 0.5,
                                      double xsq_coef = 0.25) {
  const Eigen::Vector3d nu{-0.2, 0.4, 1.0};

  // E[(1,x)'(1,x)] for x ~ N(nu, I)
  Eigen::Matrix4d mom = Eigen::Matrix4d::Zero();
  mom(0, 0) = 1.0;
  for (int k = 0; k < 3; ++k) {
    mom(0, 1 + k) = mom(1 + k, 0) = nu[k];
    for (int l = 0; l < 3; ++l) {
      mom(1 + k, 1 + l) = nu[k] * nu[l] + (k == l ? 1.0 : 0.0);
    }
  }

  // E[q(x) (1,x)'] with q = c12*x1*x2 + c3*(x3^2 - 1); third and higher
  // Gaussian moments with identity covariance
  Eigen::Vector4d cross;
  cross[0] = xprod_coef * nu[0] * nu[1] + xsq_coef * nu[2] * nu[2];
  cross[1] = xprod_coef * (nu[0] * nu[0] + 1.0) * nu[1] +
             xsq_coef * nu[2] * nu[2] * nu[0];
  cross[2] = xprod_coef * nu[0] * (nu[1] * nu[1] + 1.0) +
             xsq_coef * nu[2] * nu[2] * nu[1];
  cross[3] = xprod_coef * nu[0] * nu[1] * nu[2] +
             xsq_coef * (nu[2] * nu[2] * nu[2] + 2.0 * nu[2]);

  GammaBResult out;
  out.oracle_seed = oracle_seed;
  out.correction_closed = mom.ldlt().solve(cross);

  // Monte Carlo oracle for the same two moments
  Eigen::Matrix4d mom_mc = Eigen::Matrix4d::Zero();
  Eigen::Vector4d cross_mc = Eigen::Vector4d::Zero();
  RngStream rng(oracle_seed);
  for (std::int64_t i = 0; i < mc_draws; ++i) {
    Eigen::Vector4d dvec;
    dvec[0] = 1.0;
    for (int k = 0; k < 3; ++k) dvec[1 + k] = nu[k] + rng.normal();
    const double q = xprod_coef * dvec[1] * dvec[2] +
                     xsq_coef * (dvec[3] * dvec[3] - 1.0);
    mom_mc.noalias() += dvec * dvec.transpose();
    cross_mc.noalias() += q * dvec;
  }
  mom_mc /= static_cast<double>(mc_draws);
  cross_mc /= static_cast<double>(mc_draws);
  if (std::fabs(mom_mc.determinant()) < 1e-12) {
    throw CalibrationError("singular moment matrix in gamma_B oracle");
  }
  out.correction_mc = mom_mc.ldlt().solve(cross_mc);

  out.max_check_diff =
      (out.correction_closed - out.correction_mc).cwiseAbs().maxCoeff();
  if (out.max_check_diff > 1e-3) {
    throw CalibrationError(
        "gamma_B closed-form and Monte Carlo moments disagree (max diff " +
        std::to_string(out.max_check_diff) + ")");
  }
  out.gamma_b = interaction_target(m) - out.correction_closed;
  return out;
}

inline void apply_gamma_B(ScenarioSpec& s, const GammaBResult& r) {
  if (s.scenario != 'B') throw ConfigError("gamma_B applies to scenario B");
  s.gamma = r.gamma_b;
  s.gamma_calibrated = true;
}

struct GammaDResult {
  Eigen::Vector4d gamma_d;
  Eigen::Vector4d achieved_gamma_star;  // from the final simulated fit
  int iterations = 0;
  bool converged = false;
};

// Simulates one large control group per source under the scenario's
// generator (sample sizes overridden by n_cal) and returns the
// difference of the separate ML fits, a finite-sample probe of the
// coefficient-limit gap. Used by the iterative calibration and as a
// verification fit.
inline Eigen::Vector4d gamma_star_probe(const ScenarioSpec& s,
                                        std::int64_t n_cal, RngStream& rng) {
  const bool binary = s.outcome_kind == OutcomeKind::binary;
  const auto simulate_fit = [&](bool internal) {
    Eigen::MatrixXd X(n_cal, 4);
    Eigen::VectorXd y(n_cal);
    double x[3];
    for (std::int64_t i = 0; i < n_cal; ++i) {
      const Eigen::Vector3d& nu = internal ? s.nu1 : s.nu0;
      for (int k = 0; k < 3; ++k) x[k] = nu[k] + rng.normal();
      const double eta = detail::scenario_eta(s, x, internal ? 1 : 0);
      X(i, 0) = 1.0;
      X(i, 1) = x[0];
      X(i, 2) = x[1];
      X(i, 3) = x[2];
      if (binary) {
        y[i] = rng.uniform() < expit(eta) ? 1.0 : 0.0;
      } else {
        y[i] = eta + s.noise_sd * rng.normal();
      }
    }
    return detail::fit_glm_matrix(X, y, s.link, "calibration probe").coef;
  };
  const Eigen::VectorXd internal_coef = simulate_fit(true);
  const Eigen::VectorXd external_coef = simulate_fit(false);
  return Eigen::Vector4d(external_coef - internal_coef);
}

// Fixed-point iteration for the curved logistic scenario: nudge gamma_d
// by the miss between the probed coefficient difference and the target
// until the probe lands within tol.
inline GammaDResult calibrate_gamma_D(int m, std::int64_t n_cal,
                                      RngStream& rng, double tol = 0.005,
                                      int max_iter = 20,
                                      double xprod_coef = 0.5,
                                      double xsq_coef = 0.25) {
  if (n_cal < 1000) throw ConfigError("calibration sample too small");
  const Eigen::Vector4d target = interaction_target(m);
  const Eigen::Vector4d beta{0.5, -0.5, 0.5, -0.5};
  const Eigen::Vector3d nu0{-0.2, 0.4, 1.0};

  ScenarioSpec probe_spec;
  probe_spec.scenario = 'D';
  probe_spec.m = m;
  probe_spec.outcome_kind = OutcomeKind::binary;
  probe_spec.link = Link::logit();
  probe_spec.beta = beta;
  probe_spec.nu0 = nu0;
  probe_spec.xprod_coef = xprod_coef;
  probe_spec.xsq_coef = xsq_coef;
  probe_spec.gamma_calibrated = true;

  GammaDResult out;
  out.gamma_d = target;
  for (int iter = 1; iter <= max_iter; ++iter) {
    out.iterations = iter;
    probe_spec.gamma = out.gamma_d;
    out.achieved_gamma_star = gamma_star_probe(probe_spec, n_cal, rng);
    out.gamma_d += target - out.achieved_gamma_star;
    if ((out.achieved_gamma_star - target).cwiseAbs().maxCoeff() < tol) {
      out.converged = true;
      return out;
    }
  }
  throw CalibrationError("gamma_D calibration did not converge");
}

inline void apply_gamma_D(ScenarioSpec& s, const GammaDResult& r) {
  if (s.scenario != 'D') throw ConfigError("gamma_D applies to scenario D");
  s.gamma = r.gamma_d;
  s.gamma_calibrated = true;
}

inline constexpr std::uint64_t kTruthOracleSeed = 0x7123456789ABCDull;

// True mu0 = E[(mean of y under control) | z=1]. Exactly 0.5 for the
// continuous scenarios (the curvature terms are mean-zero under the
// internal covariate law); a chunked Monte Carlo oracle for the
// logistic ones. Chunk c draws from stream (seed, c) and partial sums
// are reduced in chunk order, so the value is a pure function of
// (scenario, draws, seed) no matter how many threads run.
inline double true_mu0(const ScenarioSpec& s,
                       std::int64_t draws = 100'000'000,
                       std::uint64_t oracle_seed = kTruthOracleSeed,
                       int threads = 0) {
  if (s.outcome_kind == OutcomeKind::continuous) return 0.5;
  const std::int64_t chunk = 1'000'000;
  const std::int64_t n_chunks = (draws + chunk - 1) / chunk;
  std::vector<double> partial(static_cast<std::size_t>(n_chunks), 0.0);
  parallel_for(n_chunks, threads, [&](std::int64_t c) {
    RngStream rng(oracle_seed, static_cast<std::uint64_t>(c));
    const std::int64_t lo = c * chunk;
    const std::int64_t hi = std::min(draws, lo + chunk);
    double acc = 0.0;
    for (std::int64_t i = lo; i < hi; ++i) {
      double x[3];
      for (int k = 0; k < 3; ++k) x[k] = s.nu1[k] + rng.normal();
      acc += expit(detail::scenario_eta(s, x, /*z=*/1));
    }
    partial[static_cast<std::size_t>(c)] = acc;
  });
  double total = 0.0;
  for (double v : partial) total += v;
  return total / static_cast<double>(draws);
}

struct McRow {
  MethodKind method;
  std::string estimand;  // mu0, mu1, delta
  double bias = 0.0;
  double sd = 0.0;  // NaN when fewer than 2 successful replicates
  double cp = 0.0;
  double mean_se = 0.0;  // mean analytic SE across successful replicates
  int reps = 0;          // successful replicates
  int failures = 0;
};

struct McSummary {
  char scenario = 'A';
  int m = 0;
  int n1 = 0;
  int n0 = 0;
  int requested_reps = 0;
  double truth_mu0 = 0.0;
  std::uint64_t master_seed = 0;
  std::vector<McRow> rows;

  const McRow& row(MethodKind method, const std::string& estimand) const {
    for (const McRow& r : rows) {
      if (r.method == method && r.estimand == estimand) return r;
    }
    throw ConfigError("no such summary row");
  }
};

struct McOptions {
  int threads = 0;  // 0 = default_threads()
  double alpha = 0.05;
  double abort_fail_frac = 0.01;
  GcvsOptions gcvs;
  std::function<void(int done, int total)> progress;
};

// Replicate r draws everything (data, CV folds) from stream
// (master_seed, r); aggregation is a deterministic reduction over the
// replicate index, independent of thread count.
inline McSummary run_mc(const ScenarioSpec& s,
                        const std::vector<MethodKind>& methods,
                        EffectMeasure effect, int reps,
                        std::uint64_t master_seed,
                        double truth_mu0_value =
                            std::numeric_limits<double>::quiet_NaN(),
                        const McOptions& opts = {}) {
  if (reps < 1) throw ConfigError("need at least one replication");
  if (methods.empty()) throw ConfigError("no methods requested");
  if (s.needs_calibration() && !s.gamma_calibrated) {
    throw ConfigError("calibration missing for scenario " +
                      std::string(1, s.scenario));
  }
  const double truth = std::isnan(truth_mu0_value)
                           ? true_mu0(s, 100'000'000, kTruthOracleSeed,
                                      opts.threads)
                           : truth_mu0_value;

  const std::size_t n_methods = methods.size();
  // per replicate and method: mu0, mu1, delta + CI bounds
  struct Cell {
    double est[3];
    double se[3];
    double lo[3];
    double hi[3];
    bool ok = false;
  };
  std::vector<Cell> cells(static_cast<std::size_t>(reps) * n_methods);
  std::atomic<int> done{0};

  parallel_for(reps, opts.threads, [&](std::int64_t r) {
    RngStream stream(master_seed, static_cast<std::uint64_t>(r));
    const StudyDataset data = generate(s, stream);
    for (std::size_t mi = 0; mi < n_methods; ++mi) {
      Cell& cell = cells[static_cast<std::size_t>(r) * n_methods + mi];
      try {
        const PointEstimates pts =
            run_method(data, methods[mi], effect, s.link, stream, opts.gcvs);
        const InferenceReport rep = analytic_inference(data, pts, opts.alpha);
        cell.est[0] = pts.mu0;
        cell.est[1] = pts.mu1;
        cell.est[2] = pts.delta;
        cell.se[0] = rep.se_mu0;
        cell.se[1] = rep.se_mu1;
        cell.se[2] = rep.se_delta;
        cell.lo[0] = rep.ci_mu0.first;
        cell.hi[0] = rep.ci_mu0.second;
        cell.lo[1] = rep.ci_mu1.first;
        cell.hi[1] = rep.ci_mu1.second;
        cell.lo[2] = rep.ci_delta.first;
        cell.hi[2] = rep.ci_delta.second;
        cell.ok = true;
      } catch (const FitError&) {
        cell.ok = false;
      }
    }
    if (opts.progress) {
      opts.progress(done.fetch_add(1) + 1, reps);
    }
  });

  McSummary out;
  out.scenario = s.scenario;
  out.m = s.m;
  out.n1 = s.n1;
  out.n0 = s.n0;
  out.requested_reps = reps;
  out.truth_mu0 = truth;
  out.master_seed = master_seed;

  const char* estimands[3] = {"mu0", "mu1", "delta"};
  const double truths[3] = {truth, truth, 0.0};
  for (std::size_t mi = 0; mi < n_methods; ++mi) {
    std::vector<double> est[3], se[3];
    int covered[3] = {0, 0, 0};
    int failures = 0;
    for (int r = 0; r < reps; ++r) {
      const Cell& cell = cells[static_cast<std::size_t>(r) * n_methods + mi];
      if (!cell.ok) {
        ++failures;
        continue;
      }
      for (int e = 0; e < 3; ++e) {
        est[e].push_back(cell.est[e]);
        se[e].push_back(cell.se[e]);
        if (cell.lo[e] <= truths[e] && truths[e] <= cell.hi[e]) ++covered[e];
      }
    }
    if (failures > opts.abort_fail_frac * reps) {
      throw FitError(std::string("replicate failure rate above threshold for ") +
                     method_name(methods[mi]) + " (" +
                     std::to_string(failures) + "/" + std::to_string(reps) +
                     ")");
    }
    for (int e = 0; e < 3; ++e) {
      McRow row;
      row.method = methods[mi];
      row.estimand = estimands[e];
      row.reps = static_cast<int>(est[e].size());
      row.failures = failures;
      row.bias = sample_mean(est[e]) - truths[e];
      row.sd = sample_sd(est[e]);
      row.mean_se = sample_mean(se[e]);
      row.cp = row.reps > 0 ? static_cast<double>(covered[e]) / row.reps : 0.0;
      out.rows.push_back(std::move(row));
    }
  }
  return out;
}

// Summary CSV mirroring the benchmark-table layout; numbers carry four
// decimals, SD prints NA when undefined.
inline void write_mc_csv(const McSummary& s, std::ostream& out) {
  out << "scenario,m,n1,n0,method,estimand,bias,sd,cp,reps\n";
  out << std::fixed << std::setprecision(4);
  for (const McRow& r : s.rows) {
    out << s.scenario << ',' << s.m << ',' << s.n1 << ',' << s.n0 << ','
        << method_name(r.method) << ',' << r.estimand << ',' << r.bias << ',';
    if (std::isnan(r.sd)) {
      out << "NA";
    } else {
      out << r.sd;
    }
    out << ',' << r.cp << ',' << r.reps << "\n";
  }
}

}  // namespace gcvs
