// Command-line front end: analyze a hybrid-control CSV, run the Monte
// Carlo benchmark scenarios, or calibrate the scenario generators that
// need it. Exit codes: 0 success, 2 configuration/data validation
// failure, 3 fit or calibration failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "gcvs/data_model.hpp"
#include "gcvs/estimators.hpp"
#include "gcvs/inference.hpp"
#include "gcvs/simulation.hpp"

namespace {

using nlohmann::json;

std::vector<gcvs::MethodKind> parse_methods(const std::string& csv) {
  std::vector<gcvs::MethodKind> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto m = gcvs::parse_method(tok);
    if (!m) throw gcvs::ConfigError("unknown method: " + tok);
    out.push_back(*m);
  }
  if (out.empty()) throw gcvs::ConfigError("no methods given");
  return out;
}

std::string fmt4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

struct AnalyzeConfig {
  std::string data_path;
  std::string outcome = "continuous";
  std::string effect = "difference";
  std::string methods = "ua-rct,ua-pooled,gc-rct,gc-ni,gc-vs";
  std::string se_mode = "analytic";
  int boot_reps = 1000;
  double alpha = 0.05;
  std::uint64_t seed = 12345;
  int cv_folds = 10;
  std::string out_path = "analysis.csv";
  std::string cv_trace_path;
};

gcvs::EffectMeasure parse_effect(const std::string& s) {
  if (s == "difference") return gcvs::EffectMeasure::difference();
  if (s == "log_ratio") return gcvs::EffectMeasure::log_ratio();
  if (s == "log_odds_ratio") return gcvs::EffectMeasure::log_odds_ratio();
  throw gcvs::ConfigError("unknown effect measure: " + s);
}

gcvs::OutcomeKind parse_outcome(const std::string& s) {
  if (s == "continuous") return gcvs::OutcomeKind::continuous;
  if (s == "binary") return gcvs::OutcomeKind::binary;
  throw gcvs::ConfigError("outcome must be continuous or binary");
}

int run_analyze(const AnalyzeConfig& cfg, int threads) {
  const gcvs::OutcomeKind kind = parse_outcome(cfg.outcome);
  const gcvs::EffectMeasure effect = parse_effect(cfg.effect);
  if (effect.kind == gcvs::EffectMeasure::Kind::log_odds_ratio &&
      kind != gcvs::OutcomeKind::binary) {
    throw gcvs::ConfigError("log odds ratio requires --outcome binary");
  }
  const gcvs::Link link = kind == gcvs::OutcomeKind::binary
                              ? gcvs::Link::logit()
                              : gcvs::Link::identity();
  const std::vector<gcvs::MethodKind> methods = parse_methods(cfg.methods);
  if (cfg.se_mode != "analytic" && cfg.se_mode != "bootstrap" &&
      cfg.se_mode != "both") {
    throw gcvs::ConfigError("--se must be analytic, bootstrap or both");
  }

  const gcvs::StudyDataset data = gcvs::load_csv(cfg.data_path, kind);
  gcvs::GcvsOptions opts;
  opts.cv_folds = cfg.cv_folds;

  std::ostringstream csv;
  csv << "method,mu0,mu1,delta,se_mu0,se_mu1,se_delta,"
         "ci_mu0_lo,ci_mu0_hi,ci_mu1_lo,ci_mu1_hi,ci_delta_lo,ci_delta_hi,"
         "se_method\n";

  std::cout << "method      mu0        mu1        delta      se(delta)  "
               "ci(delta)\n";
  gcvs::RngStream rng(cfg.seed);
  int method_index = 0;
  for (gcvs::MethodKind method : methods) {
    const gcvs::PointEstimates pts = gcvs::run_method(
        data, method, effect, link,
        rng.split(static_cast<std::uint64_t>(method_index)), opts);
    if (method == gcvs::MethodKind::gc_vs && !cfg.cv_trace_path.empty() &&
        pts.pen) {
      std::ofstream trace(cfg.cv_trace_path);
      if (!trace) throw gcvs::DataError("cannot write " + cfg.cv_trace_path);
      trace << "lambda,mean_cv_deviance,fold_sd\n";
      const gcvs::CvTrace& t = pts.pen->cv_trace;
      char buf[128];
      for (Eigen::Index i = 0; i < t.lambdas.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.8g,%.8g,%.8g\n", t.lambdas[i],
                      t.mean_deviance[i], t.fold_sd[i]);
        trace << buf;
      }
    }
    std::vector<gcvs::InferenceReport> reports;
    if (cfg.se_mode == "analytic" || cfg.se_mode == "both") {
      reports.push_back(gcvs::analytic_inference(data, pts, cfg.alpha));
    }
    if (cfg.se_mode == "bootstrap" || cfg.se_mode == "both") {
      reports.push_back(gcvs::bootstrap_inference(
          data, method, effect, link, cfg.boot_reps,
          rng.split(1000 + static_cast<std::uint64_t>(method_index)),
          cfg.alpha, threads, opts));
    }
    for (const gcvs::InferenceReport& rep : reports) {
      const char* se_name =
          rep.se_method == gcvs::InferenceReport::SeMethod::analytic
              ? "analytic"
              : "bootstrap";
      csv << gcvs::method_name(method) << ',' << fmt4(pts.mu0) << ','
          << fmt4(pts.mu1) << ',' << fmt4(pts.delta) << ','
          << fmt4(rep.se_mu0) << ',' << fmt4(rep.se_mu1) << ','
          << fmt4(rep.se_delta) << ',' << fmt4(rep.ci_mu0.first) << ','
          << fmt4(rep.ci_mu0.second) << ',' << fmt4(rep.ci_mu1.first) << ','
          << fmt4(rep.ci_mu1.second) << ',' << fmt4(rep.ci_delta.first) << ','
          << fmt4(rep.ci_delta.second) << ',' << se_name << "\n";
      std::printf("%-11s %-10s %-10s %-10s %-10s [%s, %s] (%s)\n",
                  gcvs::method_name(method), fmt4(pts.mu0).c_str(),
                  fmt4(pts.mu1).c_str(), fmt4(pts.delta).c_str(),
                  fmt4(rep.se_delta).c_str(), fmt4(rep.ci_delta.first).c_str(),
                  fmt4(rep.ci_delta.second).c_str(), se_name);
    }
    ++method_index;
  }

  std::ofstream out(cfg.out_path);
  if (!out) throw gcvs::DataError("cannot write " + cfg.out_path);
  out << csv.str();
  std::cout << "report written to " << cfg.out_path << "\n";
  return 0;
}

struct SimulateConfig {
  std::string scenario;
  int m = 0;
  int n1 = 200;
  int n0 = 200;
  int reps = 0;
  std::uint64_t seed = 0;
  std::string methods = "ua-rct,ua-pooled,gc-rct,gc-ni,gc-vs";
  std::string effect = "difference";
  std::string out_path = "mc_summary.csv";
  std::string calibration_path;
  std::string truth_cache = "gcvs_truth_cache.json";
  std::int64_t truth_draws = 100'000'000;
};

char parse_scenario(const std::string& s) {
  if (s.size() == 1 && (s[0] == 'A' || s[0] == 'B' || s[0] == 'C' ||
                        s[0] == 'D')) {
    return s[0];
  }
  throw gcvs::ConfigError("scenario must be one of A, B, C, D");
}

void load_calibration(gcvs::ScenarioSpec& spec, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw gcvs::ConfigError("cannot open calibration cache: " + path);
  json j;
  in >> j;
  if (j.value("scenario", std::string()) != std::string(1, spec.scenario) ||
      j.value("m", -1) != spec.m) {
    throw gcvs::ConfigError("calibration cache does not match scenario/m");
  }
  const auto g = j.at("gamma").get<std::vector<double>>();
  if (g.size() != 4) throw gcvs::ConfigError("calibration gamma must have 4 entries");
  for (int k = 0; k < 4; ++k) spec.gamma[k] = g[static_cast<std::size_t>(k)];
  spec.gamma_calibrated = true;
}

// Small JSON cache for the logistic-scenario truth oracle; records the
// oracle seed and draw count next to the value it produced.
double cached_truth(const gcvs::ScenarioSpec& spec, const std::string& path,
                    std::int64_t draws, int threads) {
  if (spec.outcome_kind == gcvs::OutcomeKind::continuous) return 0.5;
  const std::string key = std::string(1, spec.scenario);
  json cache = json::object();
  if (std::ifstream in(path); in) {
    try {
      in >> cache;
    } catch (const json::parse_error&) {
      cache = json::object();
    }
  }
  if (cache.contains(key)) {
    const json& e = cache[key];
    if (e.value("draws", std::int64_t{0}) == draws &&
        e.value("seed", std::uint64_t{0}) == gcvs::kTruthOracleSeed) {
      return e.at("mu0").get<double>();
    }
  }
  std::cerr << "computing truth oracle for scenario " << key << " ("
            << draws << " draws)...\n";
  const double mu0 =
      gcvs::true_mu0(spec, draws, gcvs::kTruthOracleSeed, threads);
  cache[key] = {{"mu0", mu0}, {"draws", draws},
                {"seed", gcvs::kTruthOracleSeed}};
  std::ofstream out(path);
  if (out) out << cache.dump(2) << "\n";
  return mu0;
}

int run_simulate(const SimulateConfig& cfg, int threads) {
  gcvs::ScenarioSpec spec =
      gcvs::make_scenario(parse_scenario(cfg.scenario), cfg.m, cfg.n1, cfg.n0);
  if (spec.needs_calibration()) {
    if (cfg.calibration_path.empty()) {
      throw gcvs::ConfigError(
          "scenario " + cfg.scenario +
          " needs --calibration (run `gcvs calibrate` first)");
    }
    load_calibration(spec, cfg.calibration_path);
  }
  const std::vector<gcvs::MethodKind> methods = parse_methods(cfg.methods);
  const gcvs::EffectMeasure effect = parse_effect(cfg.effect);
  const double truth =
      cached_truth(spec, cfg.truth_cache, cfg.truth_draws, threads);

  gcvs::McOptions opts;
  opts.threads = threads;
  const int tick = std::max(1, cfg.reps / 10);
  opts.progress = [&](int done, int total) {
    if (done % tick == 0 || done == total) {
      std::cerr << "replicates " << done << "/" << total << "\n";
    }
  };

  const gcvs::McSummary summary =
      gcvs::run_mc(spec, methods, effect, cfg.reps, cfg.seed, truth, opts);

  std::ofstream out(cfg.out_path);
  if (!out) throw gcvs::DataError("cannot write " + cfg.out_path);
  gcvs::write_mc_csv(summary, out);
  int failures = 0;
  for (const gcvs::McRow& r : summary.rows) failures = std::max(failures, r.failures);
  std::cout << "summary written to " << cfg.out_path << " (truth mu0 = "
            << fmt4(summary.truth_mu0) << ", max per-method failures = "
            << failures << ")\n";
  return 0;
}

struct CalibrateConfig {
  std::string scenario;
  int m = 0;
  std::uint64_t seed = 0;
  std::int64_t n_cal = 1'000'000;
  double tol = 0.005;
  std::int64_t mc_draws = 10'000'000;
  std::int64_t n_verify = 2'000'000;
  std::string out_path;
};

int run_calibrate(const CalibrateConfig& cfg) {
  const char scenario = parse_scenario(cfg.scenario);
  if (scenario == 'A' || scenario == 'C') {
    throw gcvs::ConfigError("scenario " + std::string(1, scenario) +
                            ": no calibration needed");
  }
  const std::string out_path =
      cfg.out_path.empty()
          ? "calibration_" + std::string(1, scenario) + std::to_string(cfg.m) +
                ".json"
          : cfg.out_path;

  gcvs::ScenarioSpec spec = gcvs::make_scenario(scenario, cfg.m, 200, 200);
  json j;
  j["scenario"] = std::string(1, scenario);
  j["m"] = cfg.m;
  j["seed"] = cfg.seed;
  gcvs::RngStream rng(cfg.seed);
  Eigen::Vector4d gamma;

  if (scenario == 'B') {
    const gcvs::GammaBResult r = gcvs::calibrate_gamma_B(cfg.m, cfg.mc_draws);
    gamma = r.gamma_b;
    spec.gamma = gamma;
    spec.gamma_calibrated = true;
    // verification fit: the probed coefficient gap should sit near the
    // interaction target
    const Eigen::Vector4d star =
        gcvs::gamma_star_probe(spec, cfg.n_verify, rng);
    j["moment_check_max_diff"] = r.max_check_diff;
    j["moment_oracle_seed"] = r.oracle_seed;
    j["mc_draws"] = cfg.mc_draws;
    j["achieved_gamma_star"] = {star[0], star[1], star[2], star[3]};
  } else {
    const gcvs::GammaDResult r =
        gcvs::calibrate_gamma_D(cfg.m, cfg.n_cal, rng, cfg.tol);
    gamma = r.gamma_d;
    j["iterations"] = r.iterations;
    j["n_cal"] = cfg.n_cal;
    j["tol"] = cfg.tol;
    j["achieved_gamma_star"] = {r.achieved_gamma_star[0],
                                r.achieved_gamma_star[1],
                                r.achieved_gamma_star[2],
                                r.achieved_gamma_star[3]};
  }
  j["gamma_target"] = {spec.gamma_target[0], spec.gamma_target[1],
                       spec.gamma_target[2], spec.gamma_target[3]};
  j["gamma"] = {gamma[0], gamma[1], gamma[2], gamma[3]};

  std::ofstream out(out_path);
  if (!out) throw gcvs::DataError("cannot write " + out_path);
  out << j.dump(2) << "\n";
  std::cout << "gamma = [" << gamma.transpose() << "]\n";
  std::cout << "calibration written to " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid-control estimation: g-computation with "
               "variable selection, comparators, and a Monte Carlo harness"};
  app.require_subcommand(1);
  int threads = gcvs::default_threads();
  app.add_option("--threads", threads, "worker threads (default GCVS_THREADS or hardware)");

  AnalyzeConfig acfg;
  CLI::App* analyze = app.add_subcommand("analyze", "analyze a study CSV");
  analyze->add_option("--data", acfg.data_path, "input CSV (z,a,y,x1..xp)")
      ->required();
  analyze->add_option("--outcome", acfg.outcome, "continuous|binary")
      ->required();
  analyze->add_option("--effect", acfg.effect,
                      "difference|log_ratio|log_odds_ratio");
  analyze->add_option("--methods", acfg.methods, "comma-separated method list");
  analyze->add_option("--se", acfg.se_mode, "analytic|bootstrap|both");
  analyze->add_option("--boot-reps", acfg.boot_reps, "bootstrap replicates");
  analyze->add_option("--alpha", acfg.alpha, "CI level is 1-alpha");
  analyze->add_option("--seed", acfg.seed, "RNG seed (CV folds, bootstrap)");
  analyze->add_option("--cv-folds", acfg.cv_folds, "CV folds for GC-VS");
  analyze->add_option("--cv-trace", acfg.cv_trace_path,
                      "write the GC-VS cross-validation trace to this CSV");
  analyze->add_option("--out", acfg.out_path, "output CSV path");

  SimulateConfig scfg;
  CLI::App* simulate = app.add_subcommand("simulate", "run a Monte Carlo study");
  simulate->add_option("--scenario", scfg.scenario, "A|B|C|D")->required();
  simulate->add_option("--m", scfg.m, "number of nonzero interactions (0..4)")
      ->required();
  simulate->add_option("--n1", scfg.n1, "trial sample size")->required();
  simulate->add_option("--n0", scfg.n0, "external control sample size")
      ->required();
  simulate->add_option("--reps", scfg.reps, "replications")->required();
  simulate->add_option("--seed", scfg.seed, "master seed")->required();
  simulate->add_option("--methods", scfg.methods, "comma-separated method list");
  simulate->add_option("--effect", scfg.effect,
                       "difference|log_ratio|log_odds_ratio");
  simulate->add_option("--out", scfg.out_path, "summary CSV path");
  simulate->add_option("--calibration", scfg.calibration_path,
                       "calibration cache (required for B and D)");
  simulate->add_option("--truth-cache", scfg.truth_cache,
                       "truth oracle cache file");
  simulate->add_option("--truth-draws", scfg.truth_draws,
                       "truth oracle draw count");

  CalibrateConfig ccfg;
  CLI::App* calibrate =
      app.add_subcommand("calibrate", "calibrate scenario B or D");
  calibrate->add_option("--scenario", ccfg.scenario, "B|D")->required();
  calibrate->add_option("--m", ccfg.m, "number of nonzero interactions (0..4)")
      ->required();
  calibrate->add_option("--seed", ccfg.seed, "RNG seed")->required();
  calibrate->add_option("--n-cal", ccfg.n_cal, "calibration sample size per source");
  calibrate->add_option("--tol", ccfg.tol, "convergence tolerance");
  calibrate->add_option("--mc-draws", ccfg.mc_draws,
                        "moment-oracle draws (scenario B)");
  calibrate->add_option("--n-verify", ccfg.n_verify,
                        "verification-fit sample size per source");
  calibrate->add_option("--out", ccfg.out_path, "cache file path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (analyze->parsed()) return run_analyze(acfg, threads);
    if (simulate->parsed()) return run_simulate(scfg, threads);
    if (calibrate->parsed()) return run_calibrate(ccfg);
  } catch (const gcvs::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const gcvs::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const gcvs::CalibrationError& e) {
    std::cerr << "calibration error: " << e.what() << "\n";
    return 3;
  } catch (const gcvs::FitError& e) {
    std::cerr << "fit error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
