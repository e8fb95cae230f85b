#include <doctest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "gcvs/estimators.hpp"
#include "gcvs/inference.hpp"
#include "gcvs/rng.hpp"
#include "gcvs/simulation.hpp"

using namespace gcvs;

namespace {

StudyDataset tiny(bool with_external) {
  std::vector<StudyRow> rows{
      {1, 0, 2.0, {}}, {1, 0, 4.0, {}}, {1, 1, 5.0, {}}};
  if (with_external) {
    rows.push_back({0, 0, 0.0, {}});
    rows.push_back({0, 0, 0.0, {}});
  }
  return StudyDataset(std::move(rows), OutcomeKind::continuous);
}

}  // namespace

TEST_CASE("unadjusted estimators are stratum means") {
  const EffectMeasure diff = EffectMeasure::difference();
  const PointEstimates rct = ua_rct(tiny(false), diff);
  CHECK(rct.mu0 == 3.0);
  CHECK(rct.mu1 == 5.0);
  CHECK(rct.delta == 2.0);

  const StudyDataset d = tiny(true);
  const PointEstimates pooled = ua_pooled(d, diff);
  CHECK(pooled.mu0 == 1.5);
  CHECK(pooled.mu1 == 5.0);
  // UA-RCT ignores the external rows entirely
  const PointEstimates rct2 = ua_rct(d, diff);
  CHECK(rct2.mu0 == 3.0);
}

TEST_CASE("ua methods agree when there are no external controls") {
  const StudyDataset d = tiny(false);
  const EffectMeasure diff = EffectMeasure::difference();
  CHECK(ua_rct(d, diff).mu0 == ua_pooled(d, diff).mu0);
}

TEST_CASE("gc mu1 with an intercept-only model is the treated mean") {
  const StudyDataset d = tiny(false);
  const auto [mu1, fit] = gc_mu1(d, Link::identity());
  CHECK(mu1 == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(fit.design.stratum == DesignSpec::Stratum::internal_treated);
}

TEST_CASE("gc mu1 equals the two-step mean-shift identity") {
  // identity link: mu1 = ybar_treated + slopes'(xbar_internal - xbar_treated)
  ScenarioSpec spec = make_scenario('A', 1, 300, 300);
  RngStream rng(41);
  const StudyDataset d = generate(spec, rng);
  const auto [mu1, fit] = gc_mu1(d, Link::identity());

  double ybar = 0, n_trt = 0, n1 = 0;
  Eigen::Vector3d xbar_trt = Eigen::Vector3d::Zero();
  Eigen::Vector3d xbar_int = Eigen::Vector3d::Zero();
  for (const StudyRow& r : d.rows()) {
    if (r.z != 1) continue;
    ++n1;
    for (int k = 0; k < 3; ++k) xbar_int[k] += r.x[static_cast<std::size_t>(k)];
    if (r.a == 1) {
      ++n_trt;
      ybar += r.y;
      for (int k = 0; k < 3; ++k) xbar_trt[k] += r.x[static_cast<std::size_t>(k)];
    }
  }
  ybar /= n_trt;
  xbar_trt /= n_trt;
  xbar_int /= n1;
  const double oracle =
      ybar + fit.coef.tail(3).dot(xbar_int - xbar_trt);
  CHECK(mu1 == doctest::Approx(oracle).epsilon(1e-10));
}

TEST_CASE("gc averages run over all internal rows, not just controls") {
  // make treated and control covariates visibly different so the two
  // averaging sets disagree
  std::vector<StudyRow> rows;
  RngStream rng(43);
  for (int i = 0; i < 60; ++i) {
    const bool treated = i % 2 == 0;
    const double x = (treated ? 2.0 : -1.0) + 0.3 * rng.normal();
    rows.push_back({1, treated ? 1 : 0, 1.0 + 0.7 * x + 0.05 * rng.normal(),
                    {x}});
  }
  const StudyDataset d(std::move(rows), OutcomeKind::continuous);
  const auto [mu0, fit] = gc_mu0_rct(d, Link::identity());

  double all_avg = 0, ctrl_avg = 0;
  int n1 = 0, nc = 0;
  for (const StudyRow& r : d.rows()) {
    const double fitted = fitted_mean(fit, r.x);
    all_avg += fitted;
    ++n1;
    if (r.a == 0) {
      ctrl_avg += fitted;
      ++nc;
    }
  }
  all_avg /= n1;
  ctrl_avg /= nc;
  CHECK(mu0 == doctest::Approx(all_avg).epsilon(1e-12));
  CHECK(std::fabs(mu0 - ctrl_avg) > 0.5);  // the distinction matters here
}

TEST_CASE("assembled estimates respect the effect scale") {
  const EffectMeasure diff = EffectMeasure::difference();
  const StudyDataset d = tiny(false);
  const PointEstimates pts = estimate(d, MethodKind::ua_rct, diff,
                                      Link::identity());
  CHECK(pts.delta == 2.0);

  // log odds ratio of equal means is zero
  std::vector<StudyRow> brows{{1, 0, 1.0, {}}, {1, 0, 0.0, {}},
                              {1, 1, 1.0, {}}, {1, 1, 0.0, {}}};
  const StudyDataset bd(std::move(brows), OutcomeKind::binary);
  const PointEstimates bpts =
      estimate(bd, MethodKind::ua_rct, EffectMeasure::log_odds_ratio(),
               Link::logit());
  CHECK(bpts.delta == 0.0);

  // log ratio with a zero mean is a domain error
  std::vector<StudyRow> zrows{{1, 0, 0.0, {}}, {1, 0, 0.0, {}},
                              {1, 1, 1.0, {}}};
  const StudyDataset zd(std::move(zrows), OutcomeKind::continuous);
  CHECK_THROWS_AS(
      estimate(zd, MethodKind::ua_rct, EffectMeasure::log_ratio(),
               Link::identity()),
      FitError);
}

TEST_CASE("estimate validates link and effect compatibility") {
  ScenarioSpec spec = make_scenario('C', 0, 100, 100);
  RngStream rng(47);
  const StudyDataset d = generate(spec, rng);
  CHECK_THROWS_AS(estimate(d, MethodKind::gc_rct, EffectMeasure::difference(),
                           Link::identity()),
                  ConfigError);
  CHECK_THROWS_AS(estimate(d, MethodKind::gc_vs, EffectMeasure::difference(),
                           Link::logit()),
                  ConfigError);  // missing penalized fit

  ScenarioSpec aspec = make_scenario('A', 0, 100, 100);
  RngStream arng(48);
  const StudyDataset ad = generate(aspec, arng);
  CHECK_THROWS_AS(estimate(ad, MethodKind::ua_rct,
                           EffectMeasure::log_odds_ratio(), Link::identity()),
                  ConfigError);
}

TEST_CASE("binary gc estimates live inside the unit interval") {
  ScenarioSpec spec = make_scenario('C', 4, 200, 200);
  RngStream rng(49);
  const StudyDataset d = generate(spec, rng);
  for (MethodKind m : {MethodKind::gc_rct, MethodKind::gc_ni}) {
    const PointEstimates pts =
        estimate(d, m, EffectMeasure::difference(), Link::logit());
    CHECK(pts.mu0 > 0.0);
    CHECK(pts.mu0 < 1.0);
    CHECK(pts.mu1 > 0.0);
    CHECK(pts.mu1 < 1.0);
  }
}

TEST_CASE("fully shrunk variable selection reproduces GC-NI exactly") {
  ScenarioSpec spec = make_scenario('A', 2, 150, 150);
  RngStream rng(53);
  const StudyDataset d = generate(spec, rng);
  const Link link = Link::identity();

  const GlmFit internal = fit_mle(d, design_internal_control(d), link);
  const GlmFit external = fit_mle(d, design_external_control(d), link);
  const PenaltyWeights w = adaptive_weights(external.coef - internal.coef);
  const LambdaPath path = lambda_path(d, link, w);
  auto pen = std::make_shared<PenalizedFit>(
      fit_penalized(d, link, w, path.values[0] * 2.0));
  REQUIRE(pen->active_set.empty());

  const PointEstimates vs =
      estimate(d, MethodKind::gc_vs, EffectMeasure::difference(), link, pen);
  const PointEstimates ni =
      estimate(d, MethodKind::gc_ni, EffectMeasure::difference(), link);
  CHECK(vs.mu0 == doctest::Approx(ni.mu0).epsilon(1e-6));
  CHECK(vs.delta == doctest::Approx(ni.delta).epsilon(1e-6));
  // mu1 is literally the same code path
  CHECK(vs.mu1 == ni.mu1);
}

TEST_CASE("gc-rct mu0 is translation-equivariant under the identity link") {
  ScenarioSpec spec = make_scenario('A', 0, 120, 120);
  RngStream rng(59);
  const StudyDataset d = generate(spec, rng);
  const double c = 7.25;
  std::vector<StudyRow> shifted = d.rows();
  for (StudyRow& r : shifted) {
    if (r.a == 0) r.y += c;
  }
  const StudyDataset ds(std::move(shifted), OutcomeKind::continuous);
  const auto [mu0, fit] = gc_mu0_rct(d, Link::identity());
  const auto [mu0s, fits] = gc_mu0_rct(ds, Link::identity());
  CHECK(mu0s == doctest::Approx(mu0 + c).epsilon(1e-12));
}

TEST_CASE("large-sample estimators recover the zero effect everywhere") {
  // the generators never use the treatment arm, so delta = 0 on every
  // scale; for each scenario check that the consistent estimators land
  // within 4 standard errors of zero (the logistic scenarios run at a
  // reduced size to keep the selection pipeline affordable)
  struct Config {
    char scenario;
    int n_side;
  };
  for (const Config cfg : {Config{'A', 1'000'000}, Config{'B', 1'000'000},
                           Config{'C', 200'000}, Config{'D', 200'000}}) {
    ScenarioSpec spec = make_scenario(cfg.scenario, 2, cfg.n_side, cfg.n_side);
    if (spec.scenario == 'B') {
      apply_gamma_B(spec, calibrate_gamma_B(2, 2'000'000));
    } else if (spec.scenario == 'D') {
      RngStream crng(63);
      apply_gamma_D(spec, calibrate_gamma_D(2, 500'000, crng));
    }
    RngStream rng(61);
    const StudyDataset d = generate(spec, rng);
    for (MethodKind m : {MethodKind::ua_rct, MethodKind::gc_rct,
                         MethodKind::gc_vs}) {
      const PointEstimates pts = run_method(d, m, EffectMeasure::difference(),
                                            spec.link, rng.split(900));
      const InferenceReport rep = analytic_inference(d, pts);
      CHECK(std::fabs(pts.delta) < 4.0 * rep.se_delta);
    }
  }

  // mu1 recovers its analytic truth (= 0.5 under the internal law)
  ScenarioSpec spec = make_scenario('A', 2, 100'000, 100'000);
  RngStream rng(61);
  const StudyDataset d = generate(spec, rng);
  const PointEstimates pts = estimate(d, MethodKind::gc_rct,
                                      EffectMeasure::difference(),
                                      Link::identity());
  const InferenceReport rep = analytic_inference(d, pts);
  CHECK(std::fabs(pts.mu1 - 0.5) < 3.0 * rep.se_mu1);
}

TEST_CASE("rare-event analysis at raw covariate scales stays stable") {
  // mimics the real-data regime: ~190 trial subjects, ~400 external
  // controls, 5-9% event rate, covariates on their natural scales
  // (age in years, a binary indicator, sqrt-transformed lab value)
  RngStream rng(8088);
  std::vector<StudyRow> rows;
  const auto event = [&](double age, double race, double s, int z) {
    const double eta = -1.8 - 0.03 * (age - 33.0) + 0.25 * race -
                       0.12 * (s - 18.0) + (z == 0 ? 0.15 : 0.0);
    return rng.uniform() < expit(eta) ? 1.0 : 0.0;
  };
  for (int i = 0; i < 190; ++i) {
    const double age = 33.0 + 8.0 * rng.normal();
    const double race = rng.bernoulli(0.7) ? 1.0 : 0.0;
    const double s = 18.0 + 4.0 * rng.normal();
    const int a = rng.bernoulli(0.5) ? 1 : 0;
    rows.push_back({1, a, event(age, race, s, 1), {age, race, s}});
  }
  for (int i = 0; i < 400; ++i) {
    const double age = 35.0 + 7.0 * rng.normal();
    const double race = rng.bernoulli(0.8) ? 1.0 : 0.0;
    const double s = 17.0 + 4.0 * rng.normal();
    rows.push_back({0, 0, event(age, race, s, 0), {age, race, s}});
  }
  const StudyDataset d(std::move(rows), OutcomeKind::binary);

  for (MethodKind m : {MethodKind::ua_rct, MethodKind::ua_pooled,
                       MethodKind::gc_rct, MethodKind::gc_ni,
                       MethodKind::gc_vs}) {
    const PointEstimates pts = run_method(d, m, EffectMeasure::difference(),
                                          Link::logit(), rng.split(12));
    const InferenceReport rep = analytic_inference(d, pts);
    CHECK(pts.mu0 > 0.0);
    CHECK(pts.mu0 < 0.3);
    CHECK(pts.mu1 > 0.0);
    CHECK(pts.mu1 < 0.3);
    CHECK(std::isfinite(rep.se_delta));
    CHECK(rep.se_delta > 0.0);
    CHECK(rep.se_mu0 < 0.1);
  }
}

TEST_CASE("with every interaction active, selection matches the trial-only fit") {
  // m = 4: the selected model keeps all interactions with probability
  // near one, and the two mu0 estimates coincide asymptotically
  ScenarioSpec spec = make_scenario('A', 4, 100'000, 100'000);
  RngStream rng(67);
  const StudyDataset d = generate(spec, rng);
  const PointEstimates vs = run_method(d, MethodKind::gc_vs,
                                       EffectMeasure::difference(),
                                       Link::identity(), rng.split(1));
  const PointEstimates rct = estimate(d, MethodKind::gc_rct,
                                      EffectMeasure::difference(),
                                      Link::identity());
  REQUIRE(vs.pen);
  CHECK(vs.pen->active_set.size() == 4);
  const InferenceReport rep = analytic_inference(d, rct);
  CHECK(std::fabs(vs.mu0 - rct.mu0) < 3.0 * rep.se_mu0);
}
