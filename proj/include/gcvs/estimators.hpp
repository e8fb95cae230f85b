#pragma once

// The five point estimators of (mu0, mu1, delta). Unadjusted methods
// are stratum means; g-computation methods average a fitted
// conditional-mean model over the internal (z=1) covariate
// distribution. mu1 always comes from the internal treated model: the
// external controls carry no information about the treated arm.

#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "gcvs/adaptive_lasso.hpp"
#include "gcvs/common.hpp"
#include "gcvs/data_model.hpp"
#include "gcvs/glm.hpp"
#include "gcvs/rng.hpp"

namespace gcvs {

enum class MethodKind { ua_rct, ua_pooled, gc_rct, gc_ni, gc_vs };

inline const char* method_name(MethodKind m) {
  switch (m) {
    case MethodKind::ua_rct: return "UA-RCT";
    case MethodKind::ua_pooled: return "UA-pooled";
    case MethodKind::gc_rct: return "GC-RCT";
    case MethodKind::gc_ni: return "GC-NI";
    case MethodKind::gc_vs: return "GC-VS";
  }
  return "?";
}

inline std::optional<MethodKind> parse_method(std::string_view s) {
  if (s == "ua-rct" || s == "ua_rct" || s == "UA-RCT") return MethodKind::ua_rct;
  if (s == "ua-pooled" || s == "ua_pooled" || s == "UA-pooled") {
    return MethodKind::ua_pooled;
  }
  if (s == "gc-rct" || s == "gc_rct" || s == "GC-RCT") return MethodKind::gc_rct;
  if (s == "gc-ni" || s == "gc_ni" || s == "GC-NI") return MethodKind::gc_ni;
  if (s == "gc-vs" || s == "gc_vs" || s == "GC-VS") return MethodKind::gc_vs;
  return std::nullopt;
}

inline bool is_gc(MethodKind m) {
  return m == MethodKind::gc_rct || m == MethodKind::gc_ni ||
         m == MethodKind::gc_vs;
}

struct PointEstimates {
  double mu0 = 0.0;
  double mu1 = 0.0;
  double delta = 0.0;
  MethodKind method = MethodKind::ua_rct;
  EffectMeasure effect;
  // Fits retained for influence-function inference. For GC-VS, mu0_fit
  // is the unpenalized refit of the selected-interactions model, the
  // estimating equation whose sandwich is used for standard errors.
  std::optional<GlmFit> mu1_fit;
  std::optional<GlmFit> mu0_fit;
  std::shared_ptr<const PenalizedFit> pen;
};

namespace detail {

inline double stratum_mean(const StudyDataset& d, bool need_z1, int a,
                           const char* what) {
  double s = 0.0;
  int n = 0;
  for (const StudyRow& r : d.rows()) {
    if (need_z1 && r.z != 1) continue;
    if (r.a != a) continue;
    s += r.y;
    ++n;
  }
  if (n == 0) throw FitError(std::string("empty stratum: ") + what);
  return s / static_cast<double>(n);
}

inline PointEstimates assemble(double mu0, double mu1, MethodKind method,
                               EffectMeasure effect) {
  PointEstimates pts;
  pts.mu0 = mu0;
  pts.mu1 = mu1;
  pts.delta = effect.g(mu1) - effect.g(mu0);
  pts.method = method;
  pts.effect = effect;
  return pts;
}

}  // namespace detail

// mu_a = mean of y over {z=1, a}; randomized-trial data only.
inline PointEstimates ua_rct(const StudyDataset& d, EffectMeasure effect) {
  const double mu0 = detail::stratum_mean(d, true, 0, "internal controls");
  const double mu1 = detail::stratum_mean(d, true, 1, "internal treated");
  return detail::assemble(mu0, mu1, MethodKind::ua_rct, effect);
}

// mu0 pools internal and external controls; mu1 is unchanged (all
// treated subjects are internal).
inline PointEstimates ua_pooled(const StudyDataset& d, EffectMeasure effect) {
  const double mu0 = detail::stratum_mean(d, false, 0, "pooled controls");
  const double mu1 = detail::stratum_mean(d, true, 1, "internal treated");
  return detail::assemble(mu0, mu1, MethodKind::ua_pooled, effect);
}

// Treated-arm model fit on internal treated rows, standardized over all
// internal rows. Shared by every GC method.
inline std::pair<double, GlmFit> gc_mu1(const StudyDataset& d, Link link) {
  GlmFit fit = fit_mle(d, design_internal_treated(d), link);
  const double mu1 = gc_average(d, fit);
  return {mu1, std::move(fit)};
}

inline std::pair<double, GlmFit> gc_mu0_rct(const StudyDataset& d, Link link) {
  GlmFit fit = fit_mle(d, design_internal_control(d), link);
  const double mu0 = gc_average(d, fit);
  return {mu0, std::move(fit)};
}

inline std::pair<double, GlmFit> gc_mu0_ni(const StudyDataset& d, Link link) {
  GlmFit fit = fit_mle(d, design_pooled_control_ni(d), link);
  const double mu0 = gc_average(d, fit);
  return {mu0, std::move(fit)};
}

// mu0 from the penalized fit's main-effect block. The returned GlmFit is
// the unpenalized oracle-style refit at the selected interaction set,
// used downstream for sandwich variances.
inline std::pair<double, GlmFit> gc_mu0_vs(const StudyDataset& d, Link link,
                                           const PenalizedFit& pen) {
  if (static_cast<int>(pen.beta_vs.size()) != d.p() + 1) {
    throw ConfigError("penalized fit does not match dataset dimension");
  }
  double s = 0.0;
  int n1 = 0;
  for (const StudyRow& r : d.rows()) {
    if (r.z != 1) continue;
    double eta = pen.beta_vs[0];
    for (int k = 0; k < d.p(); ++k) {
      eta += pen.beta_vs[1 + k] * r.x[static_cast<std::size_t>(k)];
    }
    s += link.h(eta);
    ++n1;
  }
  const double mu0 = s / static_cast<double>(n1);
  GlmFit refit = fit_mle(d, design_oracle(d, pen.active_set), link);
  return {mu0, std::move(refit)};
}

// Options for the GC-VS pipeline (weights -> path -> cross-validation).
struct GcvsOptions {
  int cv_folds = 10;
  int path_points = 100;
  double lambda_min_ratio = 1e-4;
  CvRule cv_rule = CvRule::min;
};

// Full variable-selection pipeline: adaptive weights from the separate
// internal/external ML fits, lambda path, k-fold CV, refit.
inline PenalizedFit fit_gcvs(const StudyDataset& d, Link link, RngStream& rng,
                             const GcvsOptions& opts = {}) {
  const GlmFit internal = fit_mle(d, design_internal_control(d), link);
  const GlmFit external = fit_mle(d, design_external_control(d), link);
  const Eigen::VectorXd gamma_ml = external.coef - internal.coef;
  const PenaltyWeights weights = adaptive_weights(gamma_ml);
  const LambdaPath path =
      lambda_path(d, link, weights, opts.path_points, opts.lambda_min_ratio);
  return cross_validate(d, link, weights, path, opts.cv_folds, rng,
                        opts.cv_rule);
}

// Assembles (mu0, mu1, delta) for one method. GC methods require the
// outcome-appropriate canonical link; gc_vs requires a penalized fit.
inline PointEstimates estimate(const StudyDataset& d, MethodKind method,
                               EffectMeasure effect, Link link,
                               std::shared_ptr<const PenalizedFit> pen = {}) {
  if (effect.kind == EffectMeasure::Kind::log_odds_ratio &&
      d.outcome_kind() != OutcomeKind::binary) {
    throw ConfigError("log odds ratio requires a binary outcome");
  }
  if (is_gc(method)) {
    const bool ok =
        (d.outcome_kind() == OutcomeKind::continuous &&
         link.kind == Link::Kind::identity) ||
        (d.outcome_kind() == OutcomeKind::binary &&
         link.kind == Link::Kind::logit);
    if (!ok) {
      throw ConfigError(
          "GC methods use the identity link for continuous outcomes and the "
          "logit link for binary outcomes");
    }
  }

  switch (method) {
    case MethodKind::ua_rct:
      return ua_rct(d, effect);
    case MethodKind::ua_pooled:
      return ua_pooled(d, effect);
    default:
      break;
  }

  auto [mu1, mu1_fit] = gc_mu1(d, link);
  double mu0 = 0.0;
  std::optional<GlmFit> mu0_fit;
  if (method == MethodKind::gc_rct) {
    auto [m, f] = gc_mu0_rct(d, link);
    mu0 = m;
    mu0_fit = std::move(f);
  } else if (method == MethodKind::gc_ni) {
    auto [m, f] = gc_mu0_ni(d, link);
    mu0 = m;
    mu0_fit = std::move(f);
  } else {
    if (!pen) throw ConfigError("gc_vs requires a penalized fit");
    auto [m, f] = gc_mu0_vs(d, link, *pen);
    mu0 = m;
    mu0_fit = std::move(f);
  }

  PointEstimates pts = detail::assemble(mu0, mu1, method, effect);
  pts.mu1_fit = std::move(mu1_fit);
  pts.mu0_fit = std::move(mu0_fit);
  pts.pen = std::move(pen);
  return pts;
}

}  // namespace gcvs
