#pragma once

// Maximum-likelihood fitting of canonical-link GLMs (identity/Gaussian,
// logit/Bernoulli) on dataset strata. Fits expose the score and expected
// information so sandwich variances can be assembled downstream.

#include <Eigen/Dense>
#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gcvs/common.hpp"
#include "gcvs/data_model.hpp"

namespace gcvs {

struct Link {
  enum class Kind { identity, logit };
  Kind kind = Kind::identity;

  static Link identity() { return {Kind::identity}; }
  static Link logit() { return {Kind::logit}; }

  // inverse link
  double h(double u) const {
    return kind == Kind::identity ? u : expit(u);
  }
  // derivative of the inverse link
  double hdot(double u) const {
    if (kind == Kind::identity) return 1.0;
    const double m = expit(u);
    return m * (1.0 - m);
  }
  const char* name() const {
    return kind == Kind::identity ? "identity" : "logit";
  }
};

// A design is a stratum selector plus a column map. All designs start
// with the main-effect block (1, x'); pooled-control designs may append
// source-interaction columns (1-z)*(1, x')_J for an index set J over
// {0..p} (0 = intercept shift, k = shift on x_k).
struct DesignSpec {
  enum class Stratum { internal_control, external_control, internal_treated,
                       all_controls };

  Stratum stratum = Stratum::internal_control;
  std::vector<int> j_set;  // sorted, empty means no interaction block
  int p = 0;

  int width() const { return p + 1 + static_cast<int>(j_set.size()); }

  bool in_stratum(const StudyRow& r) const {
    switch (stratum) {
      case Stratum::internal_control: return r.z == 1 && r.a == 0;
      case Stratum::external_control: return r.z == 0;
      case Stratum::internal_treated: return r.z == 1 && r.a == 1;
      case Stratum::all_controls: return r.a == 0;
    }
    return false;
  }

  void build_row(const StudyRow& r,
                 Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> out)
      const {
    out[0] = 1.0;
    for (int k = 0; k < p; ++k) out[1 + k] = r.x[static_cast<std::size_t>(k)];
    const double ext = 1.0 - r.z;
    for (std::size_t s = 0; s < j_set.size(); ++s) {
      const int j = j_set[s];
      out[p + 1 + static_cast<int>(s)] =
          ext * (j == 0 ? 1.0 : r.x[static_cast<std::size_t>(j - 1)]);
    }
  }

  const char* stratum_name() const {
    switch (stratum) {
      case Stratum::internal_control: return "internal controls";
      case Stratum::external_control: return "external controls";
      case Stratum::internal_treated: return "internal treated";
      case Stratum::all_controls: return "all controls";
    }
    return "?";
  }

  friend bool operator==(const DesignSpec&, const DesignSpec&) = default;
};

inline DesignSpec design_internal_control(const StudyDataset& d) {
  return {DesignSpec::Stratum::internal_control, {}, d.p()};
}
inline DesignSpec design_external_control(const StudyDataset& d) {
  return {DesignSpec::Stratum::external_control, {}, d.p()};
}
inline DesignSpec design_internal_treated(const StudyDataset& d) {
  return {DesignSpec::Stratum::internal_treated, {}, d.p()};
}
inline DesignSpec design_pooled_control_ni(const StudyDataset& d) {
  return {DesignSpec::Stratum::all_controls, {}, d.p()};
}
// J indexes interaction columns 0..p; must be sorted and within range.
inline DesignSpec design_oracle(const StudyDataset& d, std::vector<int> j_set) {
  std::sort(j_set.begin(), j_set.end());
  for (std::size_t s = 0; s < j_set.size(); ++s) {
    if (j_set[s] < 0 || j_set[s] > d.p() ||
        (s > 0 && j_set[s] == j_set[s - 1])) {
      throw ConfigError("oracle index set must be distinct indices in 0..p");
    }
  }
  return {DesignSpec::Stratum::all_controls, std::move(j_set), d.p()};
}
inline DesignSpec design_pooled_control_full(const StudyDataset& d) {
  std::vector<int> all(static_cast<std::size_t>(d.p() + 1));
  for (int j = 0; j <= d.p(); ++j) all[static_cast<std::size_t>(j)] = j;
  return {DesignSpec::Stratum::all_controls, std::move(all), d.p()};
}

struct GlmFit {
  Eigen::VectorXd coef;
  Link link;
  DesignSpec design;
  bool converged = false;
  int n_iter = 0;
  double deviance = 0.0;
  // Expected information at the solution: sum over the stratum of
  // hdot(d'coef) * d d'. Symmetric positive definite for full-rank designs.
  Eigen::MatrixXd info_matrix;
  std::vector<int> stratum_rows;
  // max_j |score_j| / n_stratum at the returned coefficients
  double score_sup = 0.0;
  std::vector<double> deviance_trace;
};

namespace detail {

// Kahan-compensated sums: million-row deviances must stay accurate
// enough for line-search acceptance decisions.
inline double glm_deviance(const Eigen::VectorXd& eta, const Eigen::VectorXd& y,
                           Link link) {
  double dev = 0.0, carry = 0.0;
  const auto add = [&](double term) {
    const double t = term - carry;
    const double s = dev + t;
    carry = (s - dev) - t;
    dev = s;
  };
  if (link.kind == Link::Kind::identity) {
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      const double e = y[i] - eta[i];
      add(e * e);
    }
    return dev;
  }
  // Bernoulli: 2 * sum[log(1+e^eta) - y*eta], stable in eta
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const double e = eta[i];
    const double log1pexp = e > 0 ? e + std::log1p(std::exp(-e))
                                  : std::log1p(std::exp(e));
    add(2.0 * (log1pexp - y[i] * e));
  }
  return dev;
}

struct RawGlmFit {
  Eigen::VectorXd coef;
  bool converged = false;
  int n_iter = 0;
  double deviance = 0.0;
  Eigen::MatrixXd info;
  double score_sup = 0.0;
  std::vector<double> deviance_trace;
};

// IRLS (Newton with step halving) for a canonical-link GLM on an
// explicit design matrix. Identity link solves in one step. Throws on
// rank deficiency, separation (logit) and non-convergence.
inline RawGlmFit fit_glm_matrix(const Eigen::MatrixXd& X,
                                const Eigen::VectorXd& y, Link link,
                                const std::string& what) {
  const Eigen::Index ns = X.rows();
  const Eigen::Index w = X.cols();
  if (ns == 0) throw FitError("empty stratum: " + what);

  {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    qr.setThreshold(1e-10);
    if (qr.rank() < w) {
      throw FitError("rank-deficient design: " + what);
    }
  }

  RawGlmFit out;
  const double ns_d = static_cast<double>(ns);
  constexpr double kScoreTol = 1e-11;       // scaled by stratum size
  constexpr double kDevTol = 1e-8;          // relative deviance change
  constexpr double kDivergenceBound = 30.0; // logit separation guard
  constexpr int kMaxIter = 100;

  if (link.kind == Link::Kind::identity) {
    const Eigen::MatrixXd xtx = X.transpose() * X;
    out.coef = xtx.ldlt().solve(X.transpose() * y);
    out.deviance = glm_deviance(X * out.coef, y, link);
    out.deviance_trace = {out.deviance};
    out.info = xtx;
    out.n_iter = 1;
    out.score_sup =
        (X.transpose() * (y - X * out.coef)).cwiseAbs().maxCoeff() / ns_d;
    out.converged = out.score_sup <= 1e-8;
    if (!out.converged) throw FitError("least-squares solve failed: " + what);
    return out;
  }

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(w);
  Eigen::VectorXd eta = Eigen::VectorXd::Zero(ns);
  double dev = glm_deviance(eta, y, link);
  out.deviance_trace.push_back(dev);

  for (int iter = 1; iter <= kMaxIter; ++iter) {
    Eigen::VectorXd mu(ns), wgt(ns);
    for (Eigen::Index i = 0; i < ns; ++i) {
      mu[i] = expit(eta[i]);
      wgt[i] = std::max(mu[i] * (1.0 - mu[i]), 1e-12);
    }
    const Eigen::VectorXd score = X.transpose() * (y - mu);
    out.score_sup = score.cwiseAbs().maxCoeff() / ns_d;
    if (out.score_sup <= kScoreTol) {
      out.converged = true;
      out.n_iter = iter - 1;
      break;
    }
    const Eigen::MatrixXd info =
        X.transpose() * wgt.asDiagonal() * X;
    const Eigen::VectorXd step = info.ldlt().solve(score);
    if (!step.allFinite()) throw FitError("singular information: " + what);

    // acceptance threshold is relative so rounding noise in huge
    // deviances cannot stall the search
    const double accept = dev + 1e-9 * (std::fabs(dev) + 1.0);
    double t = 1.0;
    Eigen::VectorXd theta_new, eta_new;
    double dev_new = dev;
    for (int half = 0; half < 40; ++half) {
      theta_new = theta + t * step;
      eta_new = X * theta_new;
      dev_new = glm_deviance(eta_new, y, link);
      if (dev_new <= accept) break;
      t *= 0.5;
    }
    if (dev_new > accept) {
      throw FitError("line search failed: " + what);
    }
    theta = theta_new;
    eta = eta_new;
    const double rel = std::fabs(dev - dev_new) / (std::fabs(dev) + 0.1);
    dev = dev_new;
    out.deviance_trace.push_back(dev);
    if (theta.cwiseAbs().maxCoeff() > kDivergenceBound) {
      throw FitError("separation detected (diverging coefficients): " + what);
    }
    out.n_iter = iter;
    if (rel < kDevTol && out.score_sup <= 1e-9) {
      out.converged = true;
      break;
    }
  }

  // final score/information at the returned coefficients
  Eigen::VectorXd mu(ns), wgt(ns);
  for (Eigen::Index i = 0; i < ns; ++i) {
    mu[i] = expit(eta[i]);
    wgt[i] = mu[i] * (1.0 - mu[i]);
  }
  out.score_sup = (X.transpose() * (y - mu)).cwiseAbs().maxCoeff() / ns_d;
  out.converged = out.score_sup <= 1e-8;
  if (!out.converged) {
    throw FitError("IRLS did not converge after " +
                   std::to_string(kMaxIter) + " iterations: " + what);
  }
  out.coef = theta;
  out.deviance = dev;
  out.info = X.transpose() * wgt.asDiagonal() * X;
  return out;
}

}  // namespace detail

// Assembles the design over its stratum and solves the likelihood
// equations sum_stratum {y_i - h(d_i'theta)} d_i = 0.
inline GlmFit fit_mle(const StudyDataset& d, const DesignSpec& design,
                      Link link) {
  std::vector<int> rows;
  for (int i = 0; i < d.n(); ++i) {
    if (design.in_stratum(d.rows()[static_cast<std::size_t>(i)])) {
      rows.push_back(i);
    }
  }
  const std::string what = std::string(design.stratum_name()) + " / " +
                           link.name() + " link";
  if (rows.empty()) throw FitError("empty stratum: " + what);

  const int w = design.width();
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), w);
  Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const StudyRow& r = d.rows()[static_cast<std::size_t>(rows[k])];
    design.build_row(r, X.row(static_cast<Eigen::Index>(k)));
    y[static_cast<Eigen::Index>(k)] = r.y;
  }

  detail::RawGlmFit raw = detail::fit_glm_matrix(X, y, link, what);
  GlmFit fit;
  fit.coef = std::move(raw.coef);
  fit.link = link;
  fit.design = design;
  fit.converged = raw.converged;
  fit.n_iter = raw.n_iter;
  fit.deviance = raw.deviance;
  fit.info_matrix = std::move(raw.info);
  fit.stratum_rows = std::move(rows);
  fit.score_sup = raw.score_sup;
  fit.deviance_trace = std::move(raw.deviance_trace);
  return fit;
}

// h(d'coef) for d = (1, x', extras...); omitted trailing columns are 0,
// which is exactly the z=1 evaluation of pooled-control designs.
inline double fitted_mean(const GlmFit& fit, std::span<const double> x,
                          std::span<const double> extras = {}) {
  const int p = fit.design.p;
  if (static_cast<int>(x.size()) != p) {
    throw ConfigError("fitted_mean: covariate length mismatch");
  }
  if (static_cast<Eigen::Index>(p + 1 + extras.size()) > fit.coef.size()) {
    throw ConfigError("fitted_mean: too many interaction values");
  }
  double eta = fit.coef[0];
  for (int k = 0; k < p; ++k) eta += fit.coef[1 + k] * x[static_cast<std::size_t>(k)];
  for (std::size_t s = 0; s < extras.size(); ++s) {
    eta += fit.coef[p + 1 + static_cast<Eigen::Index>(s)] * extras[s];
  }
  return fit.link.h(eta);
}

// Mean of h((1,x')beta) over all internal (z=1) rows, the standardization
// step shared by every g-computation estimator. Only the main-effect
// block of the fit is used; interaction columns vanish at z=1.
inline double gc_average(const StudyDataset& d, const GlmFit& fit) {
  double s = 0.0;
  int n1 = 0;
  for (const StudyRow& r : d.rows()) {
    if (r.z != 1) continue;
    s += fitted_mean(fit, r.x);
    ++n1;
  }
  return s / static_cast<double>(n1);
}

}  // namespace gcvs
