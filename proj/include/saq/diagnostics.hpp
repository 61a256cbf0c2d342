#pragma once

// Scripted experiments over the full pipeline plus independent numerical
// oracles. Every experiment produces an ExperimentReport whose verdicts are a
// pure function of its stored config and traces.

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "saq/continuous.hpp"
#include "saq/envs.hpp"
#include "saq/metrics.hpp"
#include "saq/offline_rl.hpp"
#include "saq/quantizer.hpp"

namespace saq {

struct Verdict {
  std::string name;
  /// Plain-language statement the check stands for.
  std::string claim;
  /// Human-readable threshold, e.g. ">= 0.9".
  std::string threshold;
  Scalar value = 0.0;
  bool passed = false;
};

struct ExperimentReport {
  std::string id;
  std::map<std::string, std::string> config;
  std::vector<std::pair<std::string, MetricTrace>> cells;
  std::map<std::string, Scalar> summary;
  std::vector<Verdict> verdicts;

  bool passed() const;
  const MetricTrace& cell(const std::string& name) const;
  bool has_cell(const std::string& name) const;
  std::string summary_text() const;

  /// report.json, cells/<name>.csv, summary.txt. Creates the directory.
  void write(const std::filesystem::path& dir) const;
  static ExperimentReport read(const std::filesystem::path& dir);
};

/// Rebuilds `summary` and `verdicts` from `config` and `cells` alone.
/// Throws std::invalid_argument for an unknown experiment id.
void recompute_verdicts(ExperimentReport& report);

// --------------------------------------------------------- trace analysis

/// Trailing-window means over the valid range (size - window + 1 values).
std::vector<Scalar> moving_average(const std::vector<Scalar>& values, Index window);
/// Fraction of consecutive differences <= 0 after smoothing; nan when fewer
/// than window + 1 values are given. NaN entries are dropped first.
Scalar smoothed_monotone_fraction(const std::vector<Scalar>& values, Index window);

// ---------------------------------------------------- constrained oracle

struct MirrorDescentOptions {
  Scalar step = 0.05;
  /// Minimum iteration count; iteration then continues until the residual
  /// meets `tolerance` or `max_iterations` is reached.
  Index iterations = 10000;
  Index max_iterations = 2000000;
  /// Spread of the stationarity residual below which a solve counts as converged.
  Scalar tolerance = 1e-7;
};

struct PenalizedSolution {
  Vector policy;
  /// max - min over the support of A - lambda (log pi - log pi_beta).
  Scalar residual = 0.0;
  bool converged = false;
};

/// Exponentiated-gradient ascent on E_pi[A] - lambda KL(pi || pi_beta) over the
/// simplex, started from pi_beta. lambda = 0 gives the unconstrained problem.
PenalizedSolution mirror_descent_penalized(const Vector& advantages, const Vector& behavior, Scalar lambda,
                                           const MirrorDescentOptions& options = {});

struct KlConstrainedSolution {
  Vector policy;
  Scalar multiplier = 0.0;  // 0 when the budget does not bind
  Scalar kl = 0.0;
  Scalar objective = 0.0;
  bool converged = false;
};

/// max E_pi[A] s.t. KL(pi || pi_beta) <= epsilon, by bisection on the multiplier
/// until the KL budget is met within kl_tolerance. epsilon = +inf is allowed.
KlConstrainedSolution solve_kl_constrained(const Vector& advantages, const Vector& behavior, Scalar epsilon,
                                           const MirrorDescentOptions& options = {}, Scalar kl_tolerance = 1e-6);

Scalar total_variation(const Vector& p, const Vector& q);

// ------------------------------------------------------------ experiments

struct DiagnosticSettings {
  MazeSpec maze = MazeSpec::default_maze();
  Index demonstrations = 3;
  Scalar demo_noise = 0.05;
  QuantizerTrainConfig quantizer;
  AlgoConfig agent;
  ContinuousConfig continuous;
  Index eval_episodes = 20;
  std::uint64_t eval_seed = 12345;
  Index bandit_samples = 4000;
  Scalar bandit_noise = 0.01;
  Index bandit_codebook = 8;
  Index smoothing_window = 100;
  /// Independent cells run on this many threads.
  Index threads = 1;

  DiagnosticSettings();
};

/// Outcome of dataset -> quantizer -> codes -> agent -> greedy rollouts.
struct PipelineRun {
  Scalar success_rate = 0.0;
  Scalar mean_return = 0.0;
  Scalar reconstruction_mse = 0.0;
  Index live_codes = 0;
  MetricTrace quantizer_trace;
  MetricTrace agent_trace;
};

/// Memo of pipeline runs keyed by every setting that affects them; lets
/// experiments that share an arm (same seed and config) reuse it.
class PipelineCache {
 public:
  bool find(const std::string& key, PipelineRun& out) const;
  void store(const std::string& key, const PipelineRun& run);

 private:
  mutable std::mutex mutex_;
  std::map<std::string, PipelineRun> runs_;
};

/// Dataset seeds, quantizer seeds and agent seeds all derive from `seed`, so
/// arms that differ only in one setting are paired.
PipelineRun run_saq_pipeline(const DiagnosticSettings& settings, std::uint64_t seed, PipelineCache* cache = nullptr);
TransitionDataset maze_demonstrations(const DiagnosticSettings& settings, std::uint64_t seed);

ExperimentReport run_penalty_gap_diagnostic(const std::vector<std::uint64_t>& seeds,
                                            const DiagnosticSettings& settings, PipelineCache* cache = nullptr);
ExperimentReport run_iql_oracle_check(Index n_instances, Index k_max, std::uint64_t seed);
ExperimentReport run_codebook_ablation(const std::vector<Index>& codebook_sizes,
                                       const std::vector<std::uint64_t>& seeds, const DiagnosticSettings& settings,
                                       PipelineCache* cache = nullptr);
ExperimentReport run_state_conditioning_ablation(const std::vector<std::uint64_t>& seeds,
                                                 const DiagnosticSettings& settings, PipelineCache* cache = nullptr);
ExperimentReport run_constraint_sweep(const std::vector<Scalar>& alphas, const std::vector<std::uint64_t>& seeds,
                                      const DiagnosticSettings& settings, PipelineCache* cache = nullptr);
/// `instances` random cases for the algebraic checks; `mc_instances` cases with
/// `mc_samples` draws each for the sampling cross-checks.
ExperimentReport run_identity_suite(std::uint64_t seed, Index instances = 1000, Index mc_instances = 100,
                                    Index mc_samples = 100000);

}  // namespace saq
