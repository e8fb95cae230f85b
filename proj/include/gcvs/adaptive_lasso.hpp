#pragma once

// Penalized fitting of the pooled-control outcome model with a full
// source-interaction block: eta = (1,x')beta + (1-z)(1,x')gamma. The
// main-effect block is unpenalized; each interaction coefficient j
// carries an L1 weight 1/|gamma_ml_j| taken from the unpenalized fits,
// so interactions the data cannot distinguish from zero are shrunk out
// and exact zeros enable borrowing from the external controls.
//
// Optimization is the standard GLM lasso scheme: an outer IRLS
// quadratic approximation (a single exact quadratic for the identity
// link) and inner cyclic coordinate descent with soft-thresholding,
// warm-started along a decreasing lambda path. The loss is scaled by
// the number of control rows so lambda is stable across sample sizes.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "gcvs/common.hpp"
#include "gcvs/data_model.hpp"
#include "gcvs/glm.hpp"
#include "gcvs/rng.hpp"

namespace gcvs {

struct PenaltyWeights {
  static constexpr double kCap = 1e10;
  static constexpr double kCapBelow = 1e-10;

  Eigen::VectorXd w;  // length p+1, one weight per interaction column

  bool all_capped() const {
    for (Eigen::Index j = 0; j < w.size(); ++j) {
      if (w[j] < kCap) return false;
    }
    return true;
  }
};

// w_j = 1 / |gamma_ml_j|, capped so a zero ML interaction yields a huge
// but finite weight (the coefficient is effectively excluded).
inline PenaltyWeights adaptive_weights(const Eigen::VectorXd& gamma_ml) {
  PenaltyWeights out;
  out.w.resize(gamma_ml.size());
  for (Eigen::Index j = 0; j < gamma_ml.size(); ++j) {
    const double a = std::fabs(gamma_ml[j]);
    out.w[j] = a < PenaltyWeights::kCapBelow ? PenaltyWeights::kCap : 1.0 / a;
  }
  return out;
}

struct CvTrace {
  Eigen::VectorXd lambdas;
  Eigen::VectorXd mean_deviance;  // held-out deviance per control row
  Eigen::VectorXd fold_sd;        // sd across folds of fold-mean deviance
};

struct PenalizedFit {
  Eigen::VectorXd beta_vs;   // length p+1
  Eigen::VectorXd gamma_vs;  // length p+1, exact zeros off the active set
  double lambda = 0.0;
  std::vector<int> active_set;  // indices j in 0..p with gamma_vs[j] != 0
  CvTrace cv_trace;
  double objective = 0.0;  // penalized scaled negative log-likelihood
  bool converged = false;
  int n_iter = 0;
  bool degenerate_path = false;
};

struct LambdaPath {
  Eigen::VectorXd values;
  bool degenerate = false;  // all weights capped: single-point path
};

// How cross-validation picks lambda. min (the default) takes the lambda
// with the smallest mean held-out deviance; one_se takes the largest
// lambda within one standard error of that minimum. one_se drops null
// interactions far more aggressively but over-shrinks the active ones,
// which visibly biases the downstream standardized means; min keeps the
// bias negligible at the cost of retaining an occasional null term.
enum class CvRule { min, one_se };

namespace detail {

inline void extract_active_set(PenalizedFit& fit) {
  fit.active_set.clear();
  for (Eigen::Index j = 0; j < fit.gamma_vs.size(); ++j) {
    if (fit.gamma_vs[j] != 0.0) {
      fit.active_set.push_back(static_cast<int>(j));
    }
  }
}

// Control-row problem with the full interaction design. Columns
// [0, p] are the main-effect block, [p+1, 2p+1] the interaction block.
class PenalizedCore {
 public:
  PenalizedCore(Eigen::MatrixXd design, Eigen::VectorXd y, Link link,
                const PenaltyWeights& weights)
      : D_(std::move(design)), y_(std::move(y)), link_(link) {
    nc_ = static_cast<int>(D_.rows());
    width_ = static_cast<int>(D_.cols());
    head_ = width_ / 2;  // p + 1
    pen_ = Eigen::VectorXd::Zero(width_);
    pen_.tail(head_) = weights.w;
  }

  int n_controls() const { return nc_; }
  int width() const { return width_; }
  int head() const { return head_; }
  const Eigen::MatrixXd& design() const { return D_; }
  const Eigen::VectorXd& outcomes() const { return y_; }

  // Scaled loss: (1/nc) * sum of per-row negative log-likelihoods
  // (Gaussian rows contribute (y - eta)^2 / 2).
  double loss(const Eigen::VectorXd& theta) const {
    return glm_deviance(D_ * theta, y_, link_) / (2.0 * nc_);
  }

  double objective(const Eigen::VectorXd& theta, double lambda) const {
    return loss(theta) + lambda * penalty(theta);
  }

  double penalty(const Eigen::VectorXd& theta) const {
    double s = 0.0;
    for (int j = 0; j < width_; ++j) {
      if (pen_[j] > 0.0 && theta[j] != 0.0) {
        s += pen_[j] * std::fabs(theta[j]);
      }
    }
    return s;
  }

  // gradient of the scaled loss
  Eigen::VectorXd loss_gradient(const Eigen::VectorXd& theta) const {
    const Eigen::VectorXd eta = D_ * theta;
    Eigen::VectorXd resid(nc_);
    for (int i = 0; i < nc_; ++i) resid[i] = y_[i] - link_.h(eta[i]);
    return -(D_.transpose() * resid) / static_cast<double>(nc_);
  }

  // Largest excess over the stationarity conditions at theta: zero
  // gradient for unpenalized coordinates, |grad| <= lambda*w for zero
  // penalized coordinates, grad = -lambda*w*sign for active ones.
  double kkt_violation(const Eigen::VectorXd& theta, double lambda) const {
    const Eigen::VectorXd g = loss_gradient(theta);
    double worst = 0.0;
    for (int j = 0; j < width_; ++j) {
      double v;
      if (pen_[j] == 0.0) {
        v = std::fabs(g[j]);
      } else if (theta[j] == 0.0) {
        v = std::fabs(g[j]) - lambda * pen_[j];
      } else {
        v = std::fabs(g[j] + lambda * pen_[j] * (theta[j] > 0 ? 1.0 : -1.0));
      }
      worst = std::max(worst, v);
    }
    return worst;
  }

  // Unpenalized fit of the main-effect block with gamma fixed at zero;
  // the canonical path start and the lambda_max anchor point.
  Eigen::VectorXd ni_start() const {
    const RawGlmFit ni = fit_glm_matrix(D_.leftCols(head_), y_, link_,
                                        "pooled controls, main block");
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(width_);
    theta.head(head_) = ni.coef;
    return theta;
  }

  double lambda_max(const Eigen::VectorXd& ni_theta, bool* degenerate) const {
    const Eigen::VectorXd g = loss_gradient(ni_theta);
    bool any_uncapped = false;
    double lmax = 0.0;
    for (int j = head_; j < width_; ++j) {
      if (pen_[j] < PenaltyWeights::kCap) any_uncapped = true;
      lmax = std::max(lmax, std::fabs(g[j]) / pen_[j]);
    }
    if (degenerate != nullptr) *degenerate = !any_uncapped;
    // nudge above the exact threshold so the soft-threshold keeps the
    // whole interaction block at bit-exact zero at the path head
    return lmax * (1.0 + 1e-10);
  }

  struct SolveInfo {
    int sweeps = 0;
    int outer = 0;
    bool converged = false;
  };

  Eigen::VectorXd solve(double lambda, Eigen::VectorXd theta,
                        SolveInfo* info = nullptr) const {
    if (lambda < 0.0) throw ConfigError("lambda must be nonnegative");
    SolveInfo local;
    Eigen::VectorXd out =
        link_.kind == Link::Kind::identity
            ? solve_gaussian(lambda, std::move(theta), local)
            : solve_logit(lambda, std::move(theta), local);
    if (info != nullptr) *info = local;
    return out;
  }

  // Cached Gram/moment blocks for the identity link (shared across the
  // whole lambda path).
  void prepare_gaussian() const {
    if (gram_ready_) return;
    gram_ = (D_.transpose() * D_) / static_cast<double>(nc_);
    blin_ = (D_.transpose() * y_) / static_cast<double>(nc_);
    gram_ready_ = true;
  }

 private:
  static double soft(double x, double t) {
    if (x > t) return x - t;
    if (x < -t) return x + t;
    return 0.0;
  }

  // Cyclic CD on the quadratic (1/2) theta'G theta - b'theta + lambda|.|.
  // Returns sweep count; sets *settled when the last sweep moved no
  // coordinate beyond the inner tolerance.
  int coordinate_descent(const Eigen::MatrixXd& G, const Eigen::VectorXd& b,
                         double lambda, Eigen::VectorXd& theta,
                         bool* settled = nullptr) const {
    constexpr double kInnerTol = 1e-9;
    constexpr int kMaxSweeps = 20000;
    Eigen::VectorXd q = G * theta;
    int sweeps = 0;
    bool done = false;
    for (; sweeps < kMaxSweeps && !done; ) {
      ++sweeps;
      double max_change = 0.0;
      for (int k = 0; k < width_; ++k) {
        const double gkk = G(k, k);
        if (gkk <= 0.0) continue;
        const double num = b[k] - q[k] + gkk * theta[k];
        const double thr = lambda * pen_[k];
        const double updated = thr > 0.0 ? soft(num, thr) / gkk : num / gkk;
        const double delta = updated - theta[k];
        if (delta != 0.0) {
          theta[k] = updated;
          q += G.col(k) * delta;
          max_change = std::max(max_change, std::fabs(delta));
        }
      }
      done = max_change <= kInnerTol;
    }
    if (settled != nullptr) *settled = done;
    return sweeps;
  }

  Eigen::VectorXd solve_gaussian(double lambda, Eigen::VectorXd theta,
                                 SolveInfo& info) const {
    prepare_gaussian();
    bool settled = false;
    info.sweeps = coordinate_descent(gram_, blin_, lambda, theta, &settled);
    info.outer = 1;
    info.converged = settled;
    if (!settled) throw FitError("coordinate descent did not converge");
    return theta;
  }

  Eigen::VectorXd solve_logit(double lambda, Eigen::VectorXd theta,
                              SolveInfo& info) const {
    constexpr int kMaxOuter = 200;
    constexpr double kObjTol = 1e-9;
    constexpr double kKktTol = 1e-7;
    constexpr double kDivergenceBound = 30.0;

    double obj = objective(theta, lambda);
    for (int outer = 1; outer <= kMaxOuter; ++outer) {
      info.outer = outer;
      const Eigen::VectorXd eta = D_ * theta;
      Eigen::VectorXd wgt(nc_), work(nc_);
      for (int i = 0; i < nc_; ++i) {
        const double mu = expit(eta[i]);
        const double v = std::max(mu * (1.0 - mu), 1e-10);
        wgt[i] = v;
        work[i] = eta[i] + (y_[i] - mu) / v;
      }
      const Eigen::MatrixXd G =
          D_.transpose() * wgt.asDiagonal() * D_ / static_cast<double>(nc_);
      const Eigen::VectorXd b =
          D_.transpose() * (wgt.cwiseProduct(work)) / static_cast<double>(nc_);

      Eigen::VectorXd proposal = theta;
      info.sweeps += coordinate_descent(G, b, lambda, proposal);

      // guard the quadratic step: fall back toward the current iterate
      // if the true objective got worse
      double obj_new = objective(proposal, lambda);
      for (int half = 0; half < 30 && obj_new > obj + 1e-12; ++half) {
        // averaging keeps exact zeros exact: both endpoints carry
        // soft-thresholded coordinates
        proposal = 0.5 * (proposal + theta);
        obj_new = objective(proposal, lambda);
      }
      const double change = std::fabs(obj - obj_new);
      theta = std::move(proposal);
      obj = obj_new;
      if (theta.cwiseAbs().maxCoeff() > kDivergenceBound) {
        throw FitError(
            "separation detected in penalized fit (diverging coefficients)");
      }
      if (change <= kObjTol * (std::fabs(obj) + 1.0) &&
          kkt_violation(theta, lambda) <= kKktTol) {
        info.converged = true;
        return theta;
      }
    }
    throw FitError("penalized IRLS did not converge");
  }

  Eigen::MatrixXd D_;
  Eigen::VectorXd y_;
  Link link_;
  int nc_ = 0;
  int width_ = 0;
  int head_ = 0;
  Eigen::VectorXd pen_;
  mutable Eigen::MatrixXd gram_;
  mutable Eigen::VectorXd blin_;
  mutable bool gram_ready_ = false;
};

// Assembles the all-controls rows under the full interaction design.
inline PenalizedCore make_core(const StudyDataset& d, Link link,
                               const PenaltyWeights& weights,
                               const std::vector<int>* keep_rows = nullptr) {
  if (weights.w.size() != d.p() + 1) {
    throw ConfigError("penalty weights must have length p+1");
  }
  const DesignSpec full = design_pooled_control_full(d);
  std::vector<int> rows;
  if (keep_rows != nullptr) {
    rows = *keep_rows;
  } else {
    for (int i = 0; i < d.n(); ++i) {
      if (full.in_stratum(d.rows()[static_cast<std::size_t>(i)])) {
        rows.push_back(i);
      }
    }
  }
  if (rows.empty()) throw FitError("no control rows");
  Eigen::MatrixXd D(static_cast<Eigen::Index>(rows.size()), full.width());
  Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const StudyRow& r = d.rows()[static_cast<std::size_t>(rows[k])];
    full.build_row(r, D.row(static_cast<Eigen::Index>(k)));
    y[static_cast<Eigen::Index>(k)] = r.y;
  }
  return PenalizedCore(std::move(D), std::move(y), link, weights);
}

inline void check_unpenalized_rank(const PenalizedCore& core) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(
      core.design().leftCols(core.head()));
  qr.setThreshold(1e-10);
  if (qr.rank() < core.head()) {
    throw FitError("rank deficiency in unpenalized block");
  }
}

inline PenalizedFit finish_fit(const PenalizedCore& core,
                               const Eigen::VectorXd& theta, double lambda,
                               const PenalizedCore::SolveInfo& info) {
  PenalizedFit fit;
  fit.beta_vs = theta.head(core.head());
  fit.gamma_vs = theta.tail(core.head());
  fit.lambda = lambda;
  fit.objective = core.objective(theta, lambda);
  fit.converged = info.converged;
  fit.n_iter = info.sweeps;
  extract_active_set(fit);
  return fit;
}

}  // namespace detail

// Single-lambda solve, cold-started from the no-interaction fit.
inline PenalizedFit fit_penalized(const StudyDataset& d, Link link,
                                  const PenaltyWeights& weights,
                                  double lambda) {
  detail::PenalizedCore core = detail::make_core(d, link, weights);
  detail::check_unpenalized_rank(core);
  detail::PenalizedCore::SolveInfo info;
  const Eigen::VectorXd theta =
      core.solve(lambda, core.ni_start(), &info);
  return detail::finish_fit(core, theta, lambda, info);
}

// 100 log-spaced values from lambda_max down to 1e-4 * lambda_max, where
// lambda_max is the smallest lambda shrinking every interaction to zero.
inline LambdaPath lambda_path(const StudyDataset& d, Link link,
                              const PenaltyWeights& weights,
                              int n_points = 100, double min_ratio = 1e-4) {
  if (n_points < 1) throw ConfigError("lambda path needs at least one point");
  detail::PenalizedCore core = detail::make_core(d, link, weights);
  detail::check_unpenalized_rank(core);
  LambdaPath path;
  const double lmax = core.lambda_max(core.ni_start(), &path.degenerate);
  if (path.degenerate || n_points == 1) {
    path.values = Eigen::VectorXd::Constant(1, lmax);
    path.degenerate = true;
    return path;
  }
  path.values.resize(n_points);
  for (int k = 0; k < n_points; ++k) {
    path.values[k] =
        lmax * std::pow(min_ratio, static_cast<double>(k) / (n_points - 1));
  }
  return path;
}

// K-fold cross-validation over control rows, folds stratified by source
// so both control groups stay represented. Applies the selection rule
// to the mean held-out deviance curve (ties resolve to the larger
// lambda) and returns the all-control-rows fit at the chosen lambda.
inline PenalizedFit cross_validate(const StudyDataset& d, Link link,
                                   const PenaltyWeights& weights,
                                   const LambdaPath& path, int k,
                                   RngStream& rng,
                                   CvRule rule = CvRule::min) {
  if (k < 2) throw ConfigError("cross-validation needs at least 2 folds");
  const Eigen::Index n_lambda = path.values.size();
  if (n_lambda < 1) throw ConfigError("empty lambda path");

  std::vector<int> ic_rows, ec_rows;
  for (int i = 0; i < d.n(); ++i) {
    const StudyRow& r = d.rows()[static_cast<std::size_t>(i)];
    if (r.a != 0) continue;
    (r.z == 1 ? ic_rows : ec_rows).push_back(i);
  }
  const int nc = static_cast<int>(ic_rows.size() + ec_rows.size());
  if (k > nc) throw ConfigError("fold count exceeds number of control rows");

  // stratified fold labels
  rng.shuffle(ic_rows);
  rng.shuffle(ec_rows);
  std::vector<std::vector<int>> fold_rows(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < ic_rows.size(); ++i) {
    fold_rows[i % static_cast<std::size_t>(k)].push_back(ic_rows[i]);
  }
  for (std::size_t i = 0; i < ec_rows.size(); ++i) {
    fold_rows[i % static_cast<std::size_t>(k)].push_back(ec_rows[i]);
  }

  // full-data path (also provides the final coefficients at the chosen
  // lambda, i.e. the refit on all control rows)
  detail::PenalizedCore core = detail::make_core(d, link, weights);
  detail::check_unpenalized_rank(core);
  std::vector<Eigen::VectorXd> solutions(static_cast<std::size_t>(n_lambda));
  detail::PenalizedCore::SolveInfo last_info;
  {
    Eigen::VectorXd theta = core.ni_start();
    for (Eigen::Index s = 0; s < n_lambda; ++s) {
      theta = core.solve(path.values[s], std::move(theta), &last_info);
      solutions[static_cast<std::size_t>(s)] = theta;
    }
  }

  Eigen::VectorXd total_dev = Eigen::VectorXd::Zero(n_lambda);
  Eigen::MatrixXd fold_mean(k, n_lambda);
  const DesignSpec full = design_pooled_control_full(d);
  for (int f = 0; f < k; ++f) {
    std::vector<int> train;
    int train_ic = 0, train_ec = 0;
    for (int g = 0; g < k; ++g) {
      if (g == f) continue;
      for (int row : fold_rows[static_cast<std::size_t>(g)]) {
        train.push_back(row);
        (d.rows()[static_cast<std::size_t>(row)].z == 1 ? train_ic : train_ec)++;
      }
    }
    if (train_ic == 0 || train_ec == 0) {
      throw FitError("cross-validation fold with empty control stratum");
    }
    const std::vector<int>& held = fold_rows[static_cast<std::size_t>(f)];
    detail::PenalizedCore fold_core = detail::make_core(d, link, weights, &train);

    Eigen::MatrixXd Dh(static_cast<Eigen::Index>(held.size()), full.width());
    Eigen::VectorXd yh(static_cast<Eigen::Index>(held.size()));
    for (std::size_t i = 0; i < held.size(); ++i) {
      const StudyRow& r = d.rows()[static_cast<std::size_t>(held[i])];
      full.build_row(r, Dh.row(static_cast<Eigen::Index>(i)));
      yh[static_cast<Eigen::Index>(i)] = r.y;
    }

    Eigen::VectorXd theta = fold_core.ni_start();
    for (Eigen::Index s = 0; s < n_lambda; ++s) {
      theta = fold_core.solve(path.values[s], std::move(theta));
      const double dev = detail::glm_deviance(Dh * theta, yh, link);
      total_dev[s] += dev;
      fold_mean(f, s) = dev / static_cast<double>(held.size());
    }
  }

  CvTrace trace;
  trace.lambdas = path.values;
  trace.mean_deviance = total_dev / static_cast<double>(nc);
  trace.fold_sd.resize(n_lambda);
  for (Eigen::Index s = 0; s < n_lambda; ++s) {
    const double m = fold_mean.col(s).mean();
    double acc = 0.0;
    for (int f = 0; f < k; ++f) {
      acc += (fold_mean(f, s) - m) * (fold_mean(f, s) - m);
    }
    trace.fold_sd[s] = std::sqrt(acc / std::max(1, k - 1));
  }

  Eigen::Index best = 0;
  for (Eigen::Index s = 1; s < n_lambda; ++s) {
    if (trace.mean_deviance[s] < trace.mean_deviance[best]) best = s;
  }
  if (rule == CvRule::one_se) {
    const double bound = trace.mean_deviance[best] +
                         trace.fold_sd[best] / std::sqrt(static_cast<double>(k));
    for (Eigen::Index s = 0; s <= best; ++s) {
      if (trace.mean_deviance[s] <= bound) {
        best = s;  // largest lambda within one SE of the minimum
        break;
      }
    }
  }

  PenalizedFit fit = detail::finish_fit(
      core, solutions[static_cast<std::size_t>(best)], path.values[best],
      last_info);
  fit.degenerate_path = path.degenerate;
  fit.cv_trace = std::move(trace);
  return fit;
}

// Penalized scaled objective at explicit coefficients; test hook and
// optimality-certificate helper.
inline double penalized_objective(const StudyDataset& d, Link link,
                                  const PenaltyWeights& weights,
                                  const Eigen::VectorXd& beta,
                                  const Eigen::VectorXd& gamma,
                                  double lambda) {
  detail::PenalizedCore core = detail::make_core(d, link, weights);
  Eigen::VectorXd theta(core.width());
  theta.head(core.head()) = beta;
  theta.tail(core.head()) = gamma;
  return core.objective(theta, lambda);
}

inline double kkt_violation(const StudyDataset& d, Link link,
                            const PenaltyWeights& weights,
                            const Eigen::VectorXd& beta,
                            const Eigen::VectorXd& gamma, double lambda) {
  detail::PenalizedCore core = detail::make_core(d, link, weights);
  Eigen::VectorXd theta(core.width());
  theta.head(core.head()) = beta;
  theta.tail(core.head()) = gamma;
  return core.kkt_violation(theta, lambda);
}

}  // namespace gcvs
