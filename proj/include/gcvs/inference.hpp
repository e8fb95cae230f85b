#pragma once

// Standard errors and confidence intervals. Analytic SEs stack, per
// subject, the standardization residual z*(h((1,x')coef) - mu)/tau with
// the model-fit contribution r' M^{-1} U, where U is the estimating
// equation score, M the expected information scaled by n, and r the
// internal-population mean of hdot((1,x')coef)*(1,x')'. The SE is the
// sample SD of that per-subject contribution over sqrt(n). A stratified
// nonparametric bootstrap that reruns the entire pipeline (including
// the variable-selection cross-validation) is available as a check.

#include <Eigen/Dense>
#include <cmath>
#include <utility>
#include <vector>

#include "gcvs/common.hpp"
#include "gcvs/data_model.hpp"
#include "gcvs/estimators.hpp"
#include "gcvs/glm.hpp"
#include "gcvs/rng.hpp"

namespace gcvs {

// Per-subject influence rows for the main-effect block of a converged
// fit: psi_i = [Mhat^{-1} U_i]_{first p+1 coords}, U_i = 1{stratum} *
// (y_i - h(d_i'coef)) * d_i, Mhat = info_matrix / n. The fit's design
// decides the variant: internal controls (RCT-only model), all controls
// without interactions, or all controls with the selected interaction
// set (the refit behind GC-VS standard errors).
inline Eigen::MatrixXd influence_psi(const StudyDataset& d, const GlmFit& fit) {
  const int n = d.n();
  const int w = static_cast<int>(fit.coef.size());
  const int head = d.p() + 1;
  const Eigen::MatrixXd m_hat = fit.info_matrix / static_cast<double>(n);
  const auto solver = m_hat.ldlt();
  if (solver.info() != Eigen::Success) {
    throw FitError("singular scaled information matrix");
  }
  Eigen::MatrixXd psi = Eigen::MatrixXd::Zero(n, head);
  Eigen::RowVectorXd row(w);
  for (int i = 0; i < n; ++i) {
    const StudyRow& r = d.rows()[static_cast<std::size_t>(i)];
    if (!fit.design.in_stratum(r)) continue;
    fit.design.build_row(r, row);
    const double resid = r.y - fit.link.h(row.dot(fit.coef));
    const Eigen::VectorXd u = resid * row.transpose();
    psi.row(i) = solver.solve(u).head(head).transpose();
  }
  return psi;
}

// r(coef) = (1/n1) sum_{z=1} hdot((1,x')coef) (1,x')'
inline Eigen::VectorXd standardization_gradient(const StudyDataset& d,
                                                const GlmFit& fit) {
  const int head = d.p() + 1;
  Eigen::VectorXd r_vec = Eigen::VectorXd::Zero(head);
  Eigen::VectorXd xi(head);
  int n1 = 0;
  for (const StudyRow& r : d.rows()) {
    if (r.z != 1) continue;
    xi[0] = 1.0;
    for (int k = 0; k < d.p(); ++k) xi[1 + k] = r.x[static_cast<std::size_t>(k)];
    const double eta = xi.dot(fit.coef.head(head));
    r_vec += fit.link.hdot(eta) * xi;
    ++n1;
  }
  return r_vec / static_cast<double>(n1);
}

struct InfluenceIngredients {
  double tau_hat = 0.0;          // n1 / n
  Eigen::VectorXd r_beta;        // empty for unadjusted methods
  Eigen::VectorXd r_alpha;
  Eigen::MatrixXd m_inv_beta;    // inverse scaled information, control model
  Eigen::MatrixXd m_inv_alpha;   // inverse scaled information, treated model
  Eigen::MatrixXd psi;           // n x (p+1) rows for the control model
  Eigen::MatrixXd phi;           // n x (p+1) rows for the treated model
  std::vector<double> c0;        // per-subject contribution for mu0
  std::vector<double> c1;        // per-subject contribution for mu1
  // GC averages evaluated at the fits behind psi/phi; these make the
  // contributions mean-zero exactly (for GC-VS they may differ slightly
  // from the reported penalized point estimate).
  double mu0_centering = 0.0;
  double mu1_centering = 0.0;
};

namespace detail {

// Closed-form contribution for a stratum mean: 1{stratum}(y - mu)/phat.
inline std::vector<double> mean_contribution(const StudyDataset& d,
                                             bool need_z1, int a, double mu) {
  const int n = d.n();
  int count = 0;
  for (const StudyRow& r : d.rows()) {
    if ((!need_z1 || r.z == 1) && r.a == a) ++count;
  }
  const double phat = static_cast<double>(count) / n;
  std::vector<double> c(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    const StudyRow& r = d.rows()[static_cast<std::size_t>(i)];
    if ((!need_z1 || r.z == 1) && r.a == a) {
      c[static_cast<std::size_t>(i)] = (r.y - mu) / phat;
    }
  }
  return c;
}

// GC contribution: z*(h((1,x')coef) - average)/tau + r'psi.
inline std::vector<double> gc_contribution(const StudyDataset& d,
                                           const GlmFit& fit,
                                           const Eigen::MatrixXd& psi,
                                           const Eigen::VectorXd& r_vec,
                                           double centering, double tau_hat) {
  const int n = d.n();
  std::vector<double> c(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    const StudyRow& r = d.rows()[static_cast<std::size_t>(i)];
    double v = psi.row(i).dot(r_vec);
    if (r.z == 1) {
      v += (fitted_mean(fit, r.x) - centering) / tau_hat;
    }
    c[static_cast<std::size_t>(i)] = v;
  }
  return c;
}

}  // namespace detail

// Builds every sandwich ingredient for the method behind `pts`.
inline InfluenceIngredients influence_ingredients(const StudyDataset& d,
                                                  const PointEstimates& pts) {
  InfluenceIngredients ing;
  ing.tau_hat = static_cast<double>(d.n1()) / d.n();

  if (!is_gc(pts.method)) {
    const bool rct_only = pts.method == MethodKind::ua_rct;
    ing.c0 = detail::mean_contribution(d, rct_only, 0, pts.mu0);
    ing.c1 = detail::mean_contribution(d, true, 1, pts.mu1);
    ing.mu0_centering = pts.mu0;
    ing.mu1_centering = pts.mu1;
    return ing;
  }

  if (!pts.mu0_fit || !pts.mu1_fit) {
    throw ConfigError("GC inference requires the fits used for estimation");
  }
  const GlmFit& beta_fit = *pts.mu0_fit;
  const GlmFit& alpha_fit = *pts.mu1_fit;

  ing.psi = influence_psi(d, beta_fit);
  ing.phi = influence_psi(d, alpha_fit);
  ing.r_beta = standardization_gradient(d, beta_fit);
  ing.r_alpha = standardization_gradient(d, alpha_fit);
  ing.m_inv_beta =
      (beta_fit.info_matrix / static_cast<double>(d.n()))
          .ldlt()
          .solve(Eigen::MatrixXd::Identity(beta_fit.info_matrix.rows(),
                                           beta_fit.info_matrix.cols()));
  ing.m_inv_alpha =
      (alpha_fit.info_matrix / static_cast<double>(d.n()))
          .ldlt()
          .solve(Eigen::MatrixXd::Identity(alpha_fit.info_matrix.rows(),
                                           alpha_fit.info_matrix.cols()));
  ing.mu0_centering = gc_average(d, beta_fit);
  ing.mu1_centering = gc_average(d, alpha_fit);
  ing.c0 = detail::gc_contribution(d, beta_fit, ing.psi, ing.r_beta,
                                   ing.mu0_centering, ing.tau_hat);
  ing.c1 = detail::gc_contribution(d, alpha_fit, ing.phi, ing.r_alpha,
                                   ing.mu1_centering, ing.tau_hat);
  return ing;
}

inline double var_mu0(const StudyDataset& d, const PointEstimates&,
                      const InfluenceIngredients& ing) {
  return std::sqrt(sample_variance(ing.c0) / d.n());
}

inline double var_mu1(const StudyDataset& d, const PointEstimates&,
                      const InfluenceIngredients& ing) {
  return std::sqrt(sample_variance(ing.c1) / d.n());
}

inline double var_delta(const StudyDataset& d, const PointEstimates& pts,
                        const InfluenceIngredients& ing) {
  const double g1 = pts.effect.gdot(pts.mu1);
  const double g0 = pts.effect.gdot(pts.mu0);
  std::vector<double> c(ing.c0.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    c[i] = g1 * ing.c1[i] - g0 * ing.c0[i];
  }
  return std::sqrt(sample_variance(c) / d.n());
}

inline std::pair<double, double> wald_ci(double est, double se, double alpha) {
  if (se < 0.0) throw ConfigError("standard error must be nonnegative");
  const double z = z_value(alpha);
  return {est - z * se, est + z * se};
}

struct InferenceReport {
  enum class SeMethod { analytic, bootstrap };

  double se_mu0 = 0.0;
  double se_mu1 = 0.0;
  double se_delta = 0.0;
  std::pair<double, double> ci_mu0{0.0, 0.0};
  std::pair<double, double> ci_mu1{0.0, 0.0};
  std::pair<double, double> ci_delta{0.0, 0.0};
  SeMethod se_method = SeMethod::analytic;
  double alpha = 0.05;
  int boot_reps = 0;      // successful replicates, when bootstrapped
  int boot_failures = 0;
};

inline InferenceReport analytic_inference(const StudyDataset& d,
                                          const PointEstimates& pts,
                                          double alpha = 0.05) {
  const InfluenceIngredients ing = influence_ingredients(d, pts);
  InferenceReport rep;
  rep.se_method = InferenceReport::SeMethod::analytic;
  rep.alpha = alpha;
  rep.se_mu0 = var_mu0(d, pts, ing);
  rep.se_mu1 = var_mu1(d, pts, ing);
  rep.se_delta = var_delta(d, pts, ing);
  rep.ci_mu0 = wald_ci(pts.mu0, rep.se_mu0, alpha);
  rep.ci_mu1 = wald_ci(pts.mu1, rep.se_mu1, alpha);
  rep.ci_delta = wald_ci(pts.delta, rep.se_delta, alpha);
  return rep;
}

// One full pipeline evaluation, used by the bootstrap and the Monte
// Carlo engine: runs variable selection when the method needs it.
inline PointEstimates run_method(const StudyDataset& d, MethodKind method,
                                 EffectMeasure effect, Link link,
                                 RngStream rng, const GcvsOptions& opts = {}) {
  std::shared_ptr<const PenalizedFit> pen;
  if (method == MethodKind::gc_vs) {
    pen = std::make_shared<PenalizedFit>(fit_gcvs(d, link, rng, opts));
  }
  return estimate(d, method, effect, link, std::move(pen));
}

// Nonparametric bootstrap, resampling with replacement independently
// within the (z=1,a=1), (z=1,a=0) and (z=0) strata so the design's arm
// sizes are preserved. Replicate r draws from the child stream
// rng.split(r); results do not depend on thread scheduling. Replicates
// whose fits fail are skipped; more than 5% failures is an error.
inline InferenceReport bootstrap_inference(const StudyDataset& d,
                                           MethodKind method,
                                           EffectMeasure effect, Link link,
                                           int b_reps, RngStream rng,
                                           double alpha = 0.05,
                                           int threads = 1,
                                           const GcvsOptions& opts = {}) {
  if (b_reps < 2) throw ConfigError("bootstrap needs at least 2 replicates");

  std::vector<int> trt, ic, ec;
  for (int i = 0; i < d.n(); ++i) {
    const StudyRow& r = d.rows()[static_cast<std::size_t>(i)];
    if (r.z == 1 && r.a == 1) trt.push_back(i);
    else if (r.z == 1) ic.push_back(i);
    else ec.push_back(i);
  }

  // original estimates from a stream no replicate uses
  const PointEstimates pts0 =
      run_method(d, method, effect, link,
                 rng.split(static_cast<std::uint64_t>(b_reps)), opts);

  std::vector<double> mu0(static_cast<std::size_t>(b_reps)),
      mu1(static_cast<std::size_t>(b_reps)),
      delta(static_cast<std::size_t>(b_reps));
  std::vector<char> ok(static_cast<std::size_t>(b_reps), 0);

  parallel_for(b_reps, threads, [&](std::int64_t b) {
    RngStream rep = rng.split(static_cast<std::uint64_t>(b));
    std::vector<StudyRow> rows;
    rows.reserve(static_cast<std::size_t>(d.n()));
    for (const std::vector<int>* stratum : {&trt, &ic, &ec}) {
      const std::size_t m = stratum->size();
      for (std::size_t j = 0; j < m; ++j) {
        rows.push_back(
            d.rows()[static_cast<std::size_t>((*stratum)[rep.below(m)])]);
      }
    }
    try {
      const StudyDataset db(std::move(rows), d.outcome_kind());
      const PointEstimates pts = run_method(db, method, effect, link, rep, opts);
      mu0[static_cast<std::size_t>(b)] = pts.mu0;
      mu1[static_cast<std::size_t>(b)] = pts.mu1;
      delta[static_cast<std::size_t>(b)] = pts.delta;
      ok[static_cast<std::size_t>(b)] = 1;
    } catch (const FitError&) {
      // recorded below
    } catch (const DataError&) {
    }
  });

  std::vector<double> m0, m1, dl;
  for (int b = 0; b < b_reps; ++b) {
    if (!ok[static_cast<std::size_t>(b)]) continue;
    m0.push_back(mu0[static_cast<std::size_t>(b)]);
    m1.push_back(mu1[static_cast<std::size_t>(b)]);
    dl.push_back(delta[static_cast<std::size_t>(b)]);
  }
  const int failures = b_reps - static_cast<int>(m0.size());
  if (failures > 0.05 * b_reps) {
    throw FitError("bootstrap failure rate above 5% (" +
                   std::to_string(failures) + "/" + std::to_string(b_reps) +
                   ")");
  }

  InferenceReport rep;
  rep.se_method = InferenceReport::SeMethod::bootstrap;
  rep.alpha = alpha;
  rep.boot_reps = static_cast<int>(m0.size());
  rep.boot_failures = failures;
  rep.se_mu0 = sample_sd(m0);
  rep.se_mu1 = sample_sd(m1);
  rep.se_delta = sample_sd(dl);
  rep.ci_mu0 = wald_ci(pts0.mu0, rep.se_mu0, alpha);
  rep.ci_mu1 = wald_ci(pts0.mu1, rep.se_mu1, alpha);
  rep.ci_delta = wald_ci(pts0.delta, rep.se_delta, alpha);
  return rep;
}

}  // namespace gcvs
