#include <cmath>
#include <fstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "saq/diagnostics.hpp"

using namespace saq;

namespace {

Vector vec(std::initializer_list<Scalar> v) {
  Vector x(static_cast<Index>(v.size()));
  Index i = 0;
  for (Scalar a : v) x(i++) = a;
  return x;
}

Vector random_simplex(Rng& rng, Index k) {
  Vector p = rng.uniform_matrix(k, 1, 0.05, 1.0);
  return p / p.sum();
}

DiagnosticSettings quick_settings() {
  DiagnosticSettings s;
  s.quantizer.epochs = 5;
  s.quantizer.codebook_size = 8;
  s.agent.gradient_steps = 0;
  s.continuous.gradient_steps = 0;
  s.eval_episodes = 5;
  return s;
}

}  // namespace

TEST_CASE("trace smoothing") {
  const std::vector<Scalar> v{1, 2, 3, 4, 5};
  const std::vector<Scalar> m = moving_average(v, 2);
  REQUIRE(m.size() == 4);
  CHECK(m[0] == 1.5);
  CHECK(m[3] == 4.5);
  CHECK(moving_average(v, 6).empty());

  std::vector<Scalar> down;
  for (int i = 0; i < 500; ++i) down.push_back(std::exp(-0.01 * i) + 0.01 * std::sin(i * 1.7));
  CHECK(smoothed_monotone_fraction(down, 100) == 1.0);
  std::vector<Scalar> up(down.rbegin(), down.rend());
  CHECK(smoothed_monotone_fraction(up, 100) == 0.0);
  CHECK(std::isnan(smoothed_monotone_fraction(v, 5)));
  std::vector<Scalar> with_nan = down;
  with_nan.insert(with_nan.begin() + 10, NAN);
  CHECK(smoothed_monotone_fraction(with_nan, 100) == 1.0);
}

TEST_CASE("constrained policy oracle") {
  Rng rng(1);
  SUBCASE("unbounded budget gives the argmax") {
    const Vector a = vec({0.3, 1.2, -0.5, 1.1});
    const KlConstrainedSolution s = solve_kl_constrained(a, vec({0.25, 0.25, 0.25, 0.25}), INFINITY);
    CHECK(s.policy(1) > 1.0 - 1e-6);
    CHECK(s.multiplier == 0.0);
  }
  SUBCASE("zero budget gives the behavior policy") {
    const Vector b = random_simplex(rng, 6);
    const KlConstrainedSolution s = solve_kl_constrained(rng.normal_matrix(6, 1), b, 0.0);
    CHECK(total_variation(s.policy, b) < 1e-6);
    CHECK(iql_closed_form_policy(rng.normal_matrix(6, 1), b, 1e12).isApprox(b, 1e-9));
  }
  SUBCASE("penalized solver reaches the closed form") {
    for (int i = 0; i < 20; ++i) {
      const Index k = 2 + rng.uniform_index(15);
      const Vector a = rng.normal_matrix(k, 1), b = random_simplex(rng, k);
      const Scalar lambda = rng.uniform(0.2, 3.0);
      const PenalizedSolution s = mirror_descent_penalized(a, b, lambda);
      CHECK(s.converged);
      CHECK(total_variation(s.policy, iql_closed_form_policy(a, b, lambda)) < 1e-3);
    }
  }
  CHECK(total_variation(vec({1, 0}), vec({0, 1})) == 1.0);
}

TEST_CASE("iql oracle experiment") {
  const ExperimentReport r = run_iql_oracle_check(100, 16, 3);
  CHECK(r.passed());
  CHECK(r.cell("instances").rows() == 102);
  for (const Verdict& v : r.verdicts) {
    CAPTURE(v.name);
    CHECK(!v.threshold.empty());
    CHECK(!v.claim.empty());
  }
  CHECK_THROWS_AS(run_iql_oracle_check(10, 16, 3), std::invalid_argument);
}

TEST_CASE("identity experiment") {
  const ExperimentReport r = run_identity_suite(5, 200, 4, 20000);
  for (const Verdict& v : r.verdicts) {
    CAPTURE(v.name);
    CAPTURE(v.value);
    if (v.name.find("monte_carlo") == std::string::npos) CHECK(v.passed);
  }
  CHECK(r.cell("nll_identity").rows() == 200);
}

TEST_CASE("reports are self-contained") {
  const auto dir = testing::scratch_dir("report");
  ExperimentReport r = run_iql_oracle_check(100, 8, 11);
  r.write(dir / "iql");
  const ExperimentReport back = ExperimentReport::read(dir / "iql");
  CHECK(back.id == r.id);
  CHECK(back.config == r.config);
  CHECK(back.cell("instances") == r.cell("instances"));
  ExperimentReport again = back;
  recompute_verdicts(again);
  REQUIRE(again.verdicts.size() == r.verdicts.size());
  for (std::size_t i = 0; i < r.verdicts.size(); ++i) {
    CHECK(again.verdicts[i].passed == r.verdicts[i].passed);
    CHECK(again.verdicts[i].value == r.verdicts[i].value);
  }
  CHECK(again.summary == r.summary);
  CHECK(std::filesystem::exists(dir / "iql" / "summary.txt"));
  CHECK(std::filesystem::exists(dir / "iql" / "cells" / "instances.csv"));
  CHECK(r.summary_text().find("tv") != std::string::npos);

  SUBCASE("tampering with a threshold changes the verdict") {
    ExperimentReport t = back;
    t.config["threshold.tv"] = "1e-30";
    recompute_verdicts(t);
    CHECK(!t.passed());
  }
  ExperimentReport unknown;
  unknown.id = "nope";
  CHECK_THROWS_AS(recompute_verdicts(unknown), std::invalid_argument);
}

TEST_CASE("untrained agents") {
  const DiagnosticSettings s = quick_settings();
  Rng rng(4);
  const EvalResult random = evaluate_maze_policy(
      s.maze, [&](const Vector2&) { return Vector2(rng.uniform(-1, 1), rng.uniform(-1, 1)); }, s.eval_episodes,
      s.eval_seed);
  const ExperimentReport r = run_penalty_gap_diagnostic({0, 1, 2}, s);
  const MetricTrace& out = r.cell("outcomes");
  for (Scalar v : out.column("continuous_success")) CHECK(v == random.success_rate);
  // The decoder is trained before the agent, so an untrained greedy code choice can still succeed.
  for (Scalar v : out.column("saq_success")) CHECK((v >= 0.0 && v <= 1.0));
  CHECK(r.cell("saq-seed0").empty());
  CHECK_THROWS_AS(run_penalty_gap_diagnostic({0, 1}, s), std::invalid_argument);
}

TEST_CASE("experiment structure") {
  DiagnosticSettings s = quick_settings();
  s.agent.gradient_steps = 20;
  s.agent.log_period = 5;
  PipelineCache cache;
  SUBCASE("codebook rows and scope") {
    const ExperimentReport r = run_codebook_ablation({2, 8, 16}, {0, 1, 2}, s, &cache);
    CHECK(r.cell("outcomes").rows() == 9);
    CHECK(r.has_cell("k2-seed1"));
    CHECK(r.summary.count("success.k2.mean") == 0);
    CHECK(r.summary.count("success.k16.mean") == 1);
    CHECK(r.summary.count("success.grand_mean") == 1);
  }
  SUBCASE("constraint sweep pairs seeds across alphas") {
    const ExperimentReport r = run_constraint_sweep({0.0, 0.01, 1.0, 10.0}, {0, 1, 2}, s, &cache);
    CHECK(r.summary.count("success.alpha=0.01.mean") == 1);
    CHECK(r.summary.count("success.alpha=0.mean") == 1);
    CHECK_THROWS_AS(run_constraint_sweep({0.1, 1.0}, {0, 1, 2}, s, &cache), std::invalid_argument);
  }
  SUBCASE("cached arms are reused verbatim") {
    const PipelineRun a = run_saq_pipeline(s, 5, &cache);
    PipelineRun b;
    REQUIRE(cache.find("", b) == false);
    const PipelineRun c = run_saq_pipeline(s, 5, &cache);
    CHECK(a.agent_trace == c.agent_trace);
    CHECK(a.success_rate == c.success_rate);
    const PipelineRun fresh = run_saq_pipeline(s, 5);
    CHECK(fresh.agent_trace == a.agent_trace);
  }
}
