// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>

#include "gradcheck.hpp"
#include "saq/continuous.hpp"
#include "saq/diagnostics.hpp"
#include "saq/discrete_math.hpp"

using namespace saq;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(Scalar v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

/// Selected verdicts of a report, all of which must pass.
Outcome from_verdicts(const ExperimentReport& r, const std::vector<std::string>& names) {
  Outcome o{true, ""};
  for (const std::string& n : names) {
    bool found = false;
    for (const Verdict& v : r.verdicts) {
      if (v.name != n) continue;
      found = true;
      o.passed = o.passed && v.passed;
      o.detail += (o.detail.empty() ? "" : "; ") + n + "=" + fmt(v.value) + " (" + v.threshold + ")";
    }
    if (!found) {
      o.passed = false;
      o.detail += "; missing verdict " + n;
    }
  }
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cli(const std::string& args) {
  const std::string cmd = std::string(SAQ_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const std::vector<std::uint64_t> kSeeds{0, 1, 2};

Outcome gradients() {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(derive_seed(7, "acceptance-gradients"));
  Scalar worst = 0.0;
  std::string worst_op;
  const auto cases = testing::gradient_cases();
  for (const auto& gc : cases) {
    for (int i = 0; i < 100; ++i) {
      const Scalar e = gc.run(rng);
      if (e > worst) {
        worst = e;
        worst_op = gc.name;
      }
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {worst < testing::kRelTol && secs < 60.0,
          std::to_string(cases.size()) + " operations x 100 instances, worst relative error " + fmt(worst) +
              (worst_op.empty() ? "" : " (" + worst_op + ")") + ", threshold 1e-4, " + fmt(secs) + "s of 60s"};
}

Outcome nll_identity() {
  Rng rng(derive_seed(7, "acceptance-identity"));
  Scalar worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Index k = 1 + rng.uniform_index(128), n = 1 + rng.uniform_index(32);
    const Matrix q = rng.normal_matrix(n, k, rng.uniform(0.1, 10.0));
    IndexVector codes(static_cast<std::size_t>(n));
    for (auto& c : codes) c = rng.uniform_index(k);
    // NLL from explicitly normalized probabilities.
    Scalar nll = 0.0;
    for (Index r = 0; r < n; ++r) {
      const Scalar mx = q.row(r).maxCoeff();
      const Scalar z = (q.row(r).array() - mx).exp().sum();
      nll -= (q(r, codes[static_cast<std::size_t>(r)]) - mx - std::log(z)) / static_cast<Scalar>(n);
    }
    worst = std::max(worst, std::abs(cql_penalty_exact(q, codes) - nll));
    worst = std::max(worst, cql_bc_identity(q, codes).gap);
  }
  return {worst < 1e-12, "1000 instances, K <= 128, max |penalty - NLL| " + fmt(worst) + ", threshold 1e-12"};
}

Outcome iql_oracle() {
  const ExperimentReport r = run_iql_oracle_check(100, 16, 0);
  return from_verdicts(r, {"oracle_converged", "max_tv_gap", "limit_tv_gap"});
}

Outcome sampling_agreement() {
  const ExperimentReport r = run_identity_suite(0, 1000, 100, 100000);
  return from_verdicts(r, {"kl_monte_carlo_z", "brac_target_monte_carlo_z"});
}

Outcome penalty_gap(PipelineCache& cache) {
  const ExperimentReport r = run_penalty_gap_diagnostic(kSeeds, DiagnosticSettings{}, &cache);
  Outcome o = from_verdicts(r, {"saq_mean_success", "continuous_mean_success", "continuous_gap_growth",
                                "saq_penalty_monotone"});
  for (const auto& [k, v] : r.summary) {
    if (k.starts_with("gap_")) o.detail += "; " + k + "=" + fmt(v);
  }
  return o;
}

Outcome state_conditioning(PipelineCache& cache) {
  const ExperimentReport r = run_state_conditioning_ablation(kSeeds, DiagnosticSettings{}, &cache);
  Outcome o = from_verdicts(r, {"bandit_mse_ratio", "maze_success_margin"});
  o.detail += "; conditioned success " + fmt(r.summary.at("maze_success_conditioned.mean")) + ", blinded " +
              fmt(r.summary.at("maze_success_blinded.mean"));
  return o;
}

Outcome codebook(PipelineCache& cache) {
  const ExperimentReport r = run_codebook_ablation({8, 16, 32}, kSeeds, DiagnosticSettings{}, &cache);
  Outcome o = from_verdicts(r, {"success_range", "max_deviation_from_grand_mean"});
  for (Index k : {8, 16, 32}) {
    o.detail += "; K=" + std::to_string(k) + " " + fmt(r.summary.at("success.k" + std::to_string(k) + ".mean"));
  }
  return o;
}

Outcome constraint_sweep(PipelineCache& cache) {
  const ExperimentReport r = run_constraint_sweep({0.0, 0.01, 1.0, 10.0}, kSeeds, DiagnosticSettings{}, &cache);
  Outcome o = from_verdicts(r, {"smallest_alpha_vs_best"});
  for (const auto& [k, v] : r.summary) {
    if (k.ends_with(".mean")) o.detail += "; " + k + "=" + fmt(v);
  }
  return o;
}

Outcome quadrature() {
  const Matrix s = Matrix::Zero(4, 2), a = Matrix::Zero(4, 2);
  const QFunction zero = [](const Matrix& x, const Matrix&) { return Matrix(Matrix::Zero(x.rows(), 1)); };
  const QFunction linear = [](const Matrix&, const Matrix& u) { return Matrix(u.col(0)); };
  const Scalar e0 = std::abs(exact_penalty_grid(zero, s, a, 512) - std::log(4.0));
  const Scalar lin = exact_penalty_grid(linear, s, a, 512);
  const Scalar e1 = std::abs(lin - 1.5480);
  return {e0 < 1e-6 && e1 < 1e-3, "Q=0 error " + fmt(e0) + " (< 1e-6); linear Q " + fmt(lin) +
                                      ", |value - 1.5480| " + fmt(e1) + " (< 1e-3)"};
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "saq-acceptance-determinism";
  fs::remove_all(root);
  std::vector<std::string> quantizer_csv, agent_csv;
  for (int rep = 0; rep < 2; ++rep) {
    const std::string d = (root / ("run" + std::to_string(rep))).string();
    fs::create_directories(d);
    const bool ok = cli("gen-data --env maze --n 3 --seed 11 --out " + d + "/data.saqd") == 0 &&
                    cli("train-quantizer --dataset " + d + "/data.saqd --seed 11 --out " + d + "/quantizer") == 0 &&
                    cli("quantize --dataset " + d + "/data.saqd --model " + d + "/quantizer/quantizer.saqm --out " + d +
                        "/codes.saqd") == 0 &&
                    cli("train --algo cql --dataset " + d + "/codes.saqd --quantizer " + d +
                        "/quantizer/quantizer.saqm --seed 11 --out " + d + "/agent") == 0 &&
                    cli("eval --agent " + d + "/agent/agent.saqa --quantizer " + d + "/quantizer/quantizer.saqm") == 0;
    if (!ok) return {false, "pipeline command failed in run " + std::to_string(rep + 1)};
    quantizer_csv.push_back(slurp(d + "/quantizer/metrics.csv"));
    agent_csv.push_back(slurp(d + "/agent/metrics.csv"));
  }
  const bool same = quantizer_csv[0] == quantizer_csv[1] && agent_csv[0] == agent_csv[1] && !agent_csv[0].empty();
  return {same, "quantizer metrics.csv " + std::to_string(quantizer_csv[0].size()) + " bytes, agent metrics.csv " +
                    std::to_string(agent_csv[0].size()) + " bytes, identical: " + (same ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  PipelineCache cache;

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradients},
      {"penalty equals NLL", nll_identity},
      {"closed-form policy vs constrained oracle", iql_oracle},
      {"exact vs sampled expectations", sampling_agreement},
      {"maze penalty-gap reproduction", [&] { return penalty_gap(cache); }},
      {"state-conditioning direction", [&] { return state_conditioning(cache); }},
      {"codebook-size robustness", [&] { return codebook(cache); }},
      {"constraint-sweep direction", [&] { return constraint_sweep(cache); }},
      {"quadrature oracle", quadrature},
      {"end-to-end determinism", determinism},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !o.passed;
    std::printf("%s criterion %d (%s): %s [%.1fs]\n", o.passed ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
