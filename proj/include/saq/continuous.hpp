#pragma once

// Continuous-action CQL and BC baselines: a tanh-squashed Gaussian policy, a
// state-action Q network, the sampled log-integral-exp estimator used by the
// conservatism penalty, and a grid quadrature of the same integral.

#include <cstdint>
#include <filesystem>
#include <functional>

#include "saq/dataset.hpp"
#include "saq/envs.hpp"
#include "saq/metrics.hpp"
#include "saq/nn.hpp"
#include "saq/rng.hpp"

namespace saq {

inline constexpr Scalar kLogStdMin = -5.0;
inline constexpr Scalar kLogStdMax = 2.0;
inline constexpr Scalar kActionClamp = 1.0 - 1e-6;

/// log(1 - tanh(u)^2), evaluated stably for large |u|.
Var log1m_tanh_sq(Var u);
Matrix log1m_tanh_sq(const Matrix& u);

/// Network from (normalized) state to [mean, log_std] over action_dim; actions
/// are tanh(mean + std * eps).
class SquashedGaussianPolicy {
 public:
  SquashedGaussianPolicy() = default;
  SquashedGaussianPolicy(Index state_dim, Index action_dim, const std::vector<Index>& hidden, Rng& rng);
  explicit SquashedGaussianPolicy(Mlp net);

  Index state_dim() const { return net_.input_dim(); }
  Index action_dim() const { return net_.output_dim() / 2; }
  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }

  struct Sample {
    Var action;    // B x A
    Var log_prob;  // B x 1
  };
  /// Reparameterized sample on the tape; `eps` is B x A standard normal noise.
  Sample sample(Tape& tape, Var x, const Matrix& eps);

  struct Draw {
    Matrix actions;
    Matrix log_probs;
  };
  Draw sample(const Matrix& x, Rng& rng) const;
  /// Log-density of squashed actions (clamped to +-kActionClamp before atanh). B x 1.
  Matrix log_prob(const Matrix& x, const Matrix& actions) const;
  Var log_prob(Tape& tape, Var x, const Matrix& actions);
  /// tanh(mean): the deterministic evaluation action.
  Matrix mean_action(const Matrix& x) const;

 private:
  Mlp net_;
};

/// Q(s, a) for aligned rows of states and actions, returned as N x 1.
using QFunction = std::function<Matrix(const Matrix& states, const Matrix& actions)>;

/// Per-state log of the integral of exp Q(s, a) over [-1, 1]^2 by the midpoint rule
/// on a resolution^2 lattice. Throws std::invalid_argument unless resolution >= 16,
/// and std::domain_error unless states are paired with 2-D actions.
Matrix log_integral_exp_grid(const QFunction& q, const Matrix& states, Index action_dim, Index resolution);

/// Grid log-integral-exp averaged over `states`, minus mean Q at the dataset actions.
Scalar exact_penalty_grid(const QFunction& q, const Matrix& states, const Matrix& actions, Index resolution);

/// Importance-weighted estimate of log integral exp Q(s, .) per state from n
/// policy samples and n uniform samples on [-1, 1]^A:
/// log( 1/(2n) sum_j exp(Q(a_j) - log m(a_j)) ) over all 2n draws, where
/// m = (pi + uniform) / 2 is the density of the pooled proposal.
Matrix log_integral_exp_estimate(const QFunction& q, const SquashedGaussianPolicy& policy,
                                 const Matrix& policy_inputs, const Matrix& states, Index n_samples, Rng& rng);

struct ContinuousConfig {
  Scalar cql_alpha = 1.0;
  Scalar discount = 0.99;
  Scalar entropy_weight = 0.1;
  Index n_samples = 10;
  std::vector<Index> hidden{64, 64};
  Index batch_size = 64;
  Index gradient_steps = 50000;
  Index target_update_period = 200;
  Scalar q_learning_rate = 3e-4;
  Scalar policy_learning_rate = 1e-4;
  Index grid_resolution = 32;
  Index probe_states = 32;
  Index log_period = 100;
  Index eval_period = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ContinuousAgent {
  Index state_dim = 0;
  Index action_dim = 0;
  Normalizer state_norm;
  SquashedGaussianPolicy policy;
  Mlp q;
  Mlp q_target;

  static ContinuousAgent create(Index state_dim, Index action_dim, const ContinuousConfig& config, Rng& rng);

  Matrix q_values(const Matrix& states, const Matrix& actions) const;
  QFunction q_function() const;
  /// Deterministic action per row of raw states.
  Matrix act(const Matrix& states) const;

  void save(const std::filesystem::path& path) const;
  static ContinuousAgent load(const std::filesystem::path& path);
  std::vector<std::uint8_t> serialize() const;
  static ContinuousAgent deserialize(std::span<const std::uint8_t> bytes);
};

struct ContinuousCqlTerms {
  Var total;
  Var bellman;
  Var estimated_penalty;
};

/// CQL objective for one batch: bellman = 1/2 mean (Q(s, a) - y)^2 with
/// y = r + gamma * not_done * Qbar(s', a'), a' ~ pi(s'); estimated_penalty =
/// mean log_integral_exp_estimate - mean Q(s, a); total = bellman + alpha * penalty.
/// Gradients flow into `agent.q` only.
ContinuousCqlTerms continuous_cql_loss(ContinuousAgent& agent, Tape& tape, const Batch& batch, Scalar alpha,
                                       Scalar gamma, Index n_samples, Rng& rng);

/// Mean negative log-density of the batch actions under the policy.
Var continuous_bc_loss(SquashedGaussianPolicy& policy, Tape& tape, const Matrix& x, const Matrix& actions);

using ContinuousEvaluator = std::function<EvalResult(const ContinuousAgent&)>;

struct ContinuousTrainResult {
  ContinuousAgent agent;
  /// Columns: loss_q, bellman, penalty_batch, loss_policy, penalty_estimated,
  /// penalty_exact, penalty_gap, success_rate, mean_return.
  MetricTrace trace;
};

/// Requires 2-D actions. Estimated and grid penalties are logged on a fixed,
/// evenly spaced subset of dataset states.
ContinuousTrainResult train_continuous_cql(const TransitionDataset& dataset, const ContinuousConfig& config,
                                           const ContinuousEvaluator& evaluator = {});
/// Policy-only training on the negative log-likelihood; columns: loss_policy, success_rate, mean_return.
ContinuousTrainResult train_continuous_bc(const TransitionDataset& dataset, const ContinuousConfig& config,
                                          const ContinuousEvaluator& evaluator = {});

EvalResult evaluate_continuous_agent(const ContinuousAgent& agent, const MazeSpec& spec, Index episodes,
                                     std::uint64_t seed);

}  // namespace saq
