#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "gcvs/data_model.hpp"
#include "gcvs/rng.hpp"
#include "gcvs/simulation.hpp"

namespace {

int run_cli(const std::string& args) {
  const std::string cmd =
      std::string(GCVS_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string make_data_csv(const std::string& name) {
  gcvs::ScenarioSpec spec = gcvs::make_scenario('A', 1, 120, 120);
  gcvs::RngStream rng(2222);
  const gcvs::StudyDataset d = gcvs::generate(spec, rng);
  const std::string path = name;
  gcvs::save_csv(d, path);
  return path;
}

constexpr const char* kAnalyzeHeader =
    "method,mu0,mu1,delta,se_mu0,se_mu1,se_delta,ci_mu0_lo,ci_mu0_hi,"
    "ci_mu1_lo,ci_mu1_hi,ci_delta_lo,ci_delta_hi,se_method";

}  // namespace

TEST_CASE("analyze: schema, determinism, exit codes") {
  const std::string data = make_data_csv("cli_data.csv");

  CHECK(run_cli("analyze --data " + data +
                " --outcome continuous --seed 7 --out cli_a1.csv") == 0);
  const std::string a1 = slurp("cli_a1.csv");
  CHECK(a1.rfind(std::string(kAnalyzeHeader) + "\n", 0) == 0);
  CHECK(a1.find("UA-RCT") != std::string::npos);
  CHECK(a1.find("GC-VS") != std::string::npos);

  // cv trace export
  CHECK(run_cli("analyze --data " + data +
                " --outcome continuous --seed 7 --methods gc-vs"
                " --cv-trace cli_trace.csv --out cli_a4.csv") == 0);
  const std::string trace = slurp("cli_trace.csv");
  CHECK(trace.rfind("lambda,mean_cv_deviance,fold_sd\n", 0) == 0);
  CHECK(std::count(trace.begin(), trace.end(), '\n') == 101);  // 100 lambdas

  // same seed, byte-identical output (bootstrap path included)
  CHECK(run_cli("analyze --data " + data +
                " --outcome continuous --seed 7 --se both --boot-reps 60"
                " --methods gc-vs --out cli_a2.csv") == 0);
  CHECK(run_cli("analyze --data " + data +
                " --outcome continuous --seed 7 --se both --boot-reps 60"
                " --methods gc-vs --out cli_a3.csv") == 0);
  CHECK(slurp("cli_a2.csv") == slurp("cli_a3.csv"));
  CHECK(slurp("cli_a2.csv").find("bootstrap") != std::string::npos);

  // config errors exit 2
  CHECK(run_cli("analyze --data " + data +
                " --outcome continuous --effect log_odds_ratio"
                " --out cli_err.csv") == 2);
  CHECK(run_cli("analyze --data no_such_file.csv --outcome continuous"
                " --out cli_err.csv") == 2);
  CHECK(run_cli("analyze --data " + data +
                " --outcome continuous --methods gc-everything"
                " --out cli_err.csv") == 2);

  // data validation failures exit 2
  std::ofstream bad("cli_bad.csv");
  bad << "z,a,y,x1\n0,1,1.0,0.5\n";
  bad.close();
  CHECK(run_cli("analyze --data cli_bad.csv --outcome continuous"
                " --out cli_err.csv") == 2);

  // valid file whose fit must fail (no treated subjects) exits 3
  std::ofstream nofit("cli_nofit.csv");
  nofit << "z,a,y,x1\n1,0,0.1,0.2\n1,0,0.4,-0.1\n0,0,0.2,0.3\n";
  nofit.close();
  CHECK(run_cli("analyze --data cli_nofit.csv --outcome continuous"
                " --methods ua-rct --out cli_err.csv") == 3);

  for (const char* f : {"cli_data.csv", "cli_a1.csv", "cli_a2.csv",
                        "cli_a3.csv", "cli_a4.csv", "cli_trace.csv",
                        "cli_bad.csv", "cli_nofit.csv", "cli_err.csv"}) {
    std::remove(f);
  }
}

TEST_CASE("simulate: csv schema, degenerate reps, exit codes") {
  CHECK(run_cli("simulate --scenario A --m 0 --n1 40 --n0 40 --reps 25"
                " --seed 3 --methods ua-rct,gc-rct --out cli_s1.csv") == 0);
  const std::string s1 = slurp("cli_s1.csv");
  CHECK(s1.rfind("scenario,m,n1,n0,method,estimand,bias,sd,cp,reps\n", 0) == 0);
  CHECK(s1.find("A,0,40,40,UA-RCT,mu0,") != std::string::npos);

  // single replicate: SD prints NA and CP is 0 or 1
  CHECK(run_cli("simulate --scenario A --m 0 --n1 40 --n0 40 --reps 1"
                " --seed 3 --methods gc-rct --out cli_s2.csv") == 0);
  const std::string s2 = slurp("cli_s2.csv");
  std::istringstream lines(s2);
  std::string line;
  std::getline(lines, line);  // header
  while (std::getline(lines, line)) {
    CHECK(line.find(",NA,") != std::string::npos);
    const bool cp01 = line.find(",0.0000,1") != std::string::npos ||
                      line.find(",1.0000,1") != std::string::npos;
    CHECK(cp01);
  }

  CHECK(run_cli("simulate --scenario E --m 0 --n1 40 --n0 40 --reps 2"
                " --seed 3 --out cli_s3.csv") == 2);
  // scenario B without calibration is a config error
  CHECK(run_cli("simulate --scenario B --m 0 --n1 40 --n0 40 --reps 2"
                " --seed 3 --out cli_s3.csv") == 2);

  for (const char* f : {"cli_s1.csv", "cli_s2.csv", "cli_s3.csv"}) {
    std::remove(f);
  }
}

TEST_CASE("calibrate: determinism, consumption by simulate, exit codes") {
  // A needs no calibration
  CHECK(run_cli("calibrate --scenario A --m 0 --seed 1 --out cli_c0.json") == 2);

  const std::string common =
      "calibrate --scenario B --m 1 --seed 5 --mc-draws 2000000"
      " --n-verify 300000";
  CHECK(run_cli(common + " --out cli_c1.json") == 0);
  CHECK(run_cli(common + " --out cli_c2.json") == 0);
  CHECK(slurp("cli_c1.json") == slurp("cli_c2.json"));
  CHECK(slurp("cli_c1.json").find("\"gamma\"") != std::string::npos);
  CHECK(slurp("cli_c1.json").find("achieved_gamma_star") != std::string::npos);

  // the cache drives a scenario-B simulation
  CHECK(run_cli("simulate --scenario B --m 1 --n1 40 --n0 40 --reps 10"
                " --seed 4 --methods ua-rct --calibration cli_c1.json"
                " --out cli_s4.csv") == 0);
  CHECK(slurp("cli_s4.csv").find("B,1,40,40,UA-RCT,") != std::string::npos);

  // mismatched cache is rejected
  CHECK(run_cli("simulate --scenario B --m 2 --n1 40 --n0 40 --reps 10"
                " --seed 4 --calibration cli_c1.json --out cli_s5.csv") == 2);

  // scenario D calibration at a reduced probe size
  CHECK(run_cli("calibrate --scenario D --m 0 --seed 9 --n-cal 150000"
                " --tol 0.02 --out cli_cd.json") == 0);
  CHECK(slurp("cli_cd.json").find("\"iterations\"") != std::string::npos);
  CHECK(run_cli("simulate --scenario D --m 0 --n1 50 --n0 50 --reps 8"
                " --seed 4 --methods ua-rct --calibration cli_cd.json"
                " --truth-draws 2000000 --truth-cache cli_truth.json"
                " --out cli_s6.csv") == 0);
  CHECK(slurp("cli_s6.csv").find("D,0,50,50,UA-RCT,") != std::string::npos);
  CHECK(slurp("cli_truth.json").find("\"seed\"") != std::string::npos);

  for (const char* f : {"cli_c0.json", "cli_c1.json", "cli_c2.json",
                        "cli_s4.csv", "cli_s5.csv", "cli_cd.json",
                        "cli_s6.csv", "cli_truth.json"}) {
    std::remove(f);
  }
}
