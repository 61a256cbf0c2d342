#pragma once

// Discrete-action offline RL over quantizer codes: CQL, IQL, BRAC and BC with
// every expectation over actions computed as an exact sum over the K codes.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include "saq/dataset.hpp"
#include "saq/discrete_math.hpp"
#include "saq/envs.hpp"
#include "saq/metrics.hpp"
#include "saq/nn.hpp"
#include "saq/quantizer.hpp"
#include "saq/rng.hpp"

namespace saq {

enum class Algorithm { kCql, kIql, kBrac, kBc };

std::string to_string(Algorithm a);
/// Accepts "cql", "iql", "brac", "bc".
Algorithm parse_algorithm(const std::string& s);

struct AlgoConfig {
  Algorithm algorithm = Algorithm::kCql;
  Scalar cql_alpha = 1.0;
  Scalar iql_tau = 0.7;
  Scalar iql_lambda = 1.0;
  Scalar brac_beta = 1.0;
  Scalar brac_entropy = 0.1;
  Scalar discount = 0.99;
  Scalar q_learning_rate = 3e-4;
  Scalar value_learning_rate = 3e-4;
  Scalar policy_learning_rate = 3e-4;
  Scalar behavior_learning_rate = 1e-3;
  std::vector<Index> hidden{128, 128};
  Index batch_size = 128;
  Index gradient_steps = 20000;
  Index target_update_period = 200;
  /// CQL backup: expectation over all codes instead of one sampled next code.
  bool exact_backup = false;
  Index log_period = 10;
  /// 0 disables periodic evaluation; the final step is always evaluated when an evaluator is given.
  Index eval_period = 0;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument when discount or tau leave (0, 1) or a weight is negative.
  void validate() const;
};

/// Networks of one trained discrete agent. `q` maps a normalized state to K
/// values; the other networks exist only for the algorithms that use them.
struct DiscreteAgent {
  Algorithm algorithm = Algorithm::kCql;
  Index state_dim = 0;
  Index codebook_size = 0;
  Scalar iql_lambda = 1.0;
  Normalizer state_norm;
  Mlp q;
  Mlp q_target;
  std::optional<Mlp> value;
  std::optional<Mlp> behavior;
  std::optional<Mlp> policy;

  /// Fresh networks for `config` (normalizer must be set separately).
  static DiscreteAgent create(Index state_dim, Index codebook_size, const AlgoConfig& config, Rng& rng);

  Matrix normalized(const Matrix& states) const { return state_norm.apply(states); }
  /// Unnormalized log-policy per row; softmax of a row is the policy at that state.
  Matrix policy_logits(const Matrix& states) const;
  /// Policy distribution per row of `states` (raw, un-normalized):
  /// CQL softmax(Q); IQL closed form from target Q, V and behavior; BRAC/BC softmax(policy logits).
  Matrix policy_probs(const Matrix& states) const;
  /// Floored behavior log-probabilities; throws if the agent has no behavior network.
  Matrix behavior_log_probs(const Matrix& states) const;

  void save(const std::filesystem::path& path) const;
  static DiscreteAgent load(const std::filesystem::path& path);
  std::vector<std::uint8_t> serialize() const;
  static DiscreteAgent deserialize(std::span<const std::uint8_t> bytes);
};

// ----------------------------------------------------------------- losses
// All losses take network outputs (on a tape where gradients are needed) and
// precomputed constant targets, so they apply equally to networks and to
// hand-built Q tables.

struct CqlTerms {
  Var total;
  Var bellman;
  Var penalty;
};

/// bellman = 1/2 mean (Q(s, a) - y)^2, penalty = mean [logsumexp_i Q(s, a_i) - Q(s, a)]
/// (exact over all codes), total = bellman + alpha * penalty.
CqlTerms cql_loss(Var q_values, const IndexVector& codes, const Matrix& backup_targets, Scalar alpha);

/// y = r + gamma * not_done * Qbar(s', a'), a' drawn from softmax(next_online_q); with
/// `rng == nullptr` the expectation over a' is taken exactly instead.
Matrix cql_backup_targets(const Matrix& rewards, const Matrix& not_done, const Matrix& next_target_q,
                          const Matrix& next_online_q, Scalar gamma, Rng* rng);

struct CqlBcIdentity {
  Scalar penalty = 0.0;
  Scalar nll = 0.0;
  Scalar gap = 0.0;
};

/// Both sides of: mean[logsumexp Q - Q(a)] == -mean log softmax(Q)[a].
CqlBcIdentity cql_bc_identity(const Matrix& q_values, const IndexVector& codes);

/// mean |tau - 1[u < 0]| u^2 with u = target_q_sa - V(s).
Var iql_value_loss(Var values, const Matrix& target_q_sa, Scalar tau);
/// mean (r + gamma * not_done * V(s') - Q(s, a))^2.
Var iql_q_loss(Var q_sa, const Matrix& rewards, const Matrix& not_done, const Matrix& next_values, Scalar gamma);

/// mean (y - Q(s, a))^2 with y = r + gamma * not_done * sum_i pi(a_i|s') [Qbar(s', a_i) + beta log pi_beta(a_i|s')].
Var brac_q_loss(Var q_sa, const Matrix& rewards, const Matrix& not_done, const Matrix& next_target_q,
                const Matrix& next_policy_probs, const Matrix& next_behavior_log_probs, Scalar gamma, Scalar beta);
Matrix brac_backup_targets(const Matrix& rewards, const Matrix& not_done, const Matrix& next_target_q,
                           const Matrix& next_policy_probs, const Matrix& next_behavior_log_probs, Scalar gamma,
                           Scalar beta);

/// -mean sum_i pi(a_i|s) [Q(s, a_i) + beta log pi_beta(a_i|s) - alpha_ent log pi(a_i|s)], pi = softmax(logits).
Var brac_policy_loss(Var policy_logits, const Matrix& q_values, const Matrix& behavior_log_probs, Scalar beta,
                     Scalar entropy_weight);

/// Mean negative log softmax probability of each row's code.
Var bc_loss(Var logits, const IndexVector& codes);

// --------------------------------------------------------------- training

/// Called at evaluation steps; returns success rate and mean return.
using AgentEvaluator = std::function<EvalResult(const DiscreteAgent&)>;

struct DiscreteTrainResult {
  DiscreteAgent agent;
  /// Columns: loss_q, bellman, penalty_batch, penalty_dataset, loss_v, loss_policy,
  /// loss_behavior, kl_dataset, success_rate, mean_return (nan where not applicable).
  MetricTrace trace;
};

/// Throws std::invalid_argument when the dataset's codebook size differs from the quantizer's.
DiscreteTrainResult train_agent(const DiscreteTransitionDataset& dataset, const QuantizerModel& quantizer,
                                const AlgoConfig& config, const AgentEvaluator& evaluator = {});

enum class ActMode { kGreedy, kSample };

/// Picks a code from the agent's policy (argmax with lowest-index ties, or a
/// categorical draw) and decodes it to a continuous action.
Vector act(const DiscreteAgent& agent, const QuantizerModel& quantizer, const Vector& state, ActMode mode,
           Rng* rng = nullptr);
Index select_code(const DiscreteAgent& agent, const Vector& state, ActMode mode, Rng* rng = nullptr);

/// Greedy rollouts of agent + decoder in the maze (actions clipped by the environment).
EvalResult evaluate_discrete_agent(const DiscreteAgent& agent, const QuantizerModel& quantizer,
                                   const MazeSpec& spec, Index episodes, std::uint64_t seed);

}  // namespace saq
