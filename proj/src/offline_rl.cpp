#include "saq/offline_rl.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "saq/binio.hpp"

namespace saq {

namespace {

constexpr Scalar kNaN = std::numeric_limits<Scalar>::quiet_NaN();

void check_targets(const Matrix& m, Index rows, const char* what) {
  if (m.rows() != rows || m.cols() != 1) {
    throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(rows) + "x1, got " +
                                std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

Matrix gather_values(const Matrix& q, const IndexVector& codes) {
  Matrix out(q.rows(), 1);
  for (Index i = 0; i < q.rows(); ++i) out(i, 0) = q(i, codes[static_cast<std::size_t>(i)]);
  return out;
}

std::vector<Index> net_sizes(Index in, const std::vector<Index>& hidden, Index out) {
  std::vector<Index> s{in};
  s.insert(s.end(), hidden.begin(), hidden.end());
  s.push_back(out);
  return s;
}

}  // namespace

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kCql: return "cql";
    case Algorithm::kIql: return "iql";
    case Algorithm::kBrac: return "brac";
    case Algorithm::kBc: return "bc";
  }
  return "?";
}

Algorithm parse_algorithm(const std::string& s) {
  if (s == "cql") return Algorithm::kCql;
  if (s == "iql") return Algorithm::kIql;
  if (s == "brac") return Algorithm::kBrac;
  if (s == "bc") return Algorithm::kBc;
  throw std::invalid_argument("unknown algorithm '" + s + "'");
}

void AlgoConfig::validate() const {
  if (!(discount > 0.0 && discount < 1.0)) throw std::invalid_argument("discount must lie in (0, 1)");
  if (!(iql_tau > 0.0 && iql_tau < 1.0)) throw std::invalid_argument("iql_tau must lie in (0, 1)");
  if (!(cql_alpha >= 0.0) || !(brac_beta >= 0.0) || !(brac_entropy >= 0.0)) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
  if (!(iql_lambda > 0.0)) throw std::invalid_argument("iql_lambda must be positive");
  if (!(q_learning_rate > 0.0 && value_learning_rate > 0.0 && policy_learning_rate > 0.0 &&
        behavior_learning_rate > 0.0)) {
    throw std::invalid_argument("learning rates must be positive");
  }
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  if (gradient_steps < 0) throw std::invalid_argument("gradient_steps must be non-negative");
  if (target_update_period <= 0 || log_period <= 0) throw std::invalid_argument("periods must be positive");
  if (eval_period < 0) throw std::invalid_argument("eval_period must be non-negative");
  for (Index h : hidden) {
    if (h <= 0) throw std::invalid_argument("hidden sizes must be positive");
  }
}

// ------------------------------------------------------------------ agent

DiscreteAgent DiscreteAgent::create(Index state_dim, Index codebook_size, const AlgoConfig& config, Rng& rng) {
  if (state_dim <= 0 || codebook_size <= 0) throw std::invalid_argument("agent dimensions must be positive");
  DiscreteAgent a;
  a.algorithm = config.algorithm;
  a.state_dim = state_dim;
  a.codebook_size = codebook_size;
  a.iql_lambda = config.iql_lambda;
  a.state_norm = Normalizer::identity(state_dim);
  a.q = Mlp("q", net_sizes(state_dim, config.hidden, codebook_size), Activation::kRelu, rng);
  a.q_target = a.q;
  switch (config.algorithm) {
    case Algorithm::kCql:
      break;
    case Algorithm::kIql:
      a.value = Mlp("value", net_sizes(state_dim, config.hidden, 1), Activation::kRelu, rng);
      a.behavior = Mlp("behavior", net_sizes(state_dim, config.hidden, codebook_size), Activation::kRelu, rng);
      break;
    case Algorithm::kBrac:
      a.behavior = Mlp("behavior", net_sizes(state_dim, config.hidden, codebook_size), Activation::kRelu, rng);
      a.policy = Mlp("policy", net_sizes(state_dim, config.hidden, codebook_size), Activation::kRelu, rng);
      break;
    case Algorithm::kBc:
      a.policy = Mlp("policy", net_sizes(state_dim, config.hidden, codebook_size), Activation::kRelu, rng);
      break;
  }
  return a;
}

Matrix DiscreteAgent::behavior_log_probs(const Matrix& states) const {
  if (!behavior) throw std::logic_error("agent has no behavior network");
  return floored_log_softmax(behavior->evaluate(normalized(states)));
}

Matrix DiscreteAgent::policy_logits(const Matrix& states) const {
  const Matrix x = normalized(states);
  switch (algorithm) {
    case Algorithm::kCql:
      return q.evaluate(x);
    case Algorithm::kIql: {
      const Matrix qv = q_target.evaluate(x);
      const Matrix v = value->evaluate(x);
      const Matrix adv = qv - v.replicate(1, qv.cols());
      return adv / iql_lambda + floored_log_softmax(behavior->evaluate(x));
    }
    case Algorithm::kBrac:
    case Algorithm::kBc:
      return policy->evaluate(x);
  }
  return {};
}

Matrix DiscreteAgent::policy_probs(const Matrix& states) const { return row_softmax(policy_logits(states)); }

std::vector<std::uint8_t> DiscreteAgent::serialize() const {
  ModelContainer c;
  c.magic = {'S', 'A', 'Q', 'A'};
  c.dims = {static_cast<std::uint32_t>(state_dim), static_cast<std::uint32_t>(codebook_size),
            static_cast<std::uint32_t>(algorithm), 0};
  c.blocks.push_back({"state_norm.mean", state_norm.mean});
  c.blocks.push_back({"state_norm.scale", state_norm.scale});
  c.blocks.push_back({"iql_lambda", Matrix::Constant(1, 1, iql_lambda)});
  for (const auto& p : q.params().params()) c.blocks.push_back({p.name, p.value});
  for (const auto& p : q_target.params().params()) c.blocks.push_back({"target." + p.name, p.value});
  for (const auto* net : {&value, &behavior, &policy}) {
    if (!*net) continue;
    for (const auto& p : (*net)->params().params()) c.blocks.push_back({p.name, p.value});
  }
  return c.encode();
}

DiscreteAgent DiscreteAgent::deserialize(std::span<const std::uint8_t> bytes) {
  const ModelContainer c = ModelContainer::decode(bytes, "SAQA");
  if (c.dims[2] > 3) throw FormatError("unknown algorithm tag " + std::to_string(c.dims[2]), 6);
  DiscreteAgent a;
  a.state_dim = c.dims[0];
  a.codebook_size = c.dims[1];
  a.algorithm = static_cast<Algorithm>(c.dims[2]);
  a.state_norm = {c.block("state_norm.mean"), c.block("state_norm.scale")};
  a.iql_lambda = c.block("iql_lambda")(0, 0);
  ParameterSet q, target, value, behavior, policy;
  for (const auto& b : c.blocks) {
    if (b.name.starts_with("q.")) q.add(b.name, b.value);
    else if (b.name.starts_with("target.")) target.add(b.name.substr(7), b.value);
    else if (b.name.starts_with("value.")) value.add(b.name, b.value);
    else if (b.name.starts_with("behavior.")) behavior.add(b.name, b.value);
    else if (b.name.starts_with("policy.")) policy.add(b.name, b.value);
  }
  a.q = Mlp::from_parameters(std::move(q), Activation::kRelu);
  a.q_target = Mlp::from_parameters(std::move(target), Activation::kRelu);
  if (value.size()) a.value = Mlp::from_parameters(std::move(value), Activation::kRelu);
  if (behavior.size()) a.behavior = Mlp::from_parameters(std::move(behavior), Activation::kRelu);
  if (policy.size()) a.policy = Mlp::from_parameters(std::move(policy), Activation::kRelu);

  auto check = [&](const Mlp& m, Index out, const char* what) {
    if (m.input_dim() != a.state_dim || m.output_dim() != out) {
      throw FormatError(std::string(what) + " network shape disagrees with header dims", 6);
    }
  };
  check(a.q, a.codebook_size, "q");
  check(a.q_target, a.codebook_size, "target");
  const bool need_value = a.algorithm == Algorithm::kIql;
  const bool need_behavior = a.algorithm == Algorithm::kIql || a.algorithm == Algorithm::kBrac;
  const bool need_policy = a.algorithm == Algorithm::kBrac || a.algorithm == Algorithm::kBc;
  if (need_value != a.value.has_value() || need_behavior != a.behavior.has_value() ||
      need_policy != a.policy.has_value()) {
    throw FormatError("network set does not match algorithm " + to_string(a.algorithm), 6);
  }
  if (a.value) check(*a.value, 1, "value");
  if (a.behavior) check(*a.behavior, a.codebook_size, "behavior");
  if (a.policy) check(*a.policy, a.codebook_size, "policy");
  return a;
}

void DiscreteAgent::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

DiscreteAgent DiscreteAgent::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

// ----------------------------------------------------------------- losses

CqlTerms cql_loss(Var q_values, const IndexVector& codes, const Matrix& backup_targets, Scalar alpha) {
  check_targets(backup_targets, q_values.rows(), "cql_loss targets");
  Tape& tape = *q_values.tape;
  const Var q_sa = gather(q_values, codes);
  CqlTerms t;
  t.bellman = scale(mse(q_sa, tape.constant(backup_targets)), 0.5);
  t.penalty = mean(sub(logsumexp(q_values), q_sa));
  t.total = add(t.bellman, scale(t.penalty, alpha));
  return t;
}

Matrix cql_backup_targets(const Matrix& rewards, const Matrix& not_done, const Matrix& next_target_q,
                          const Matrix& next_online_q, Scalar gamma, Rng* rng) {
  const Index n = rewards.rows();
  check_targets(rewards, n, "rewards");
  check_targets(not_done, n, "not_done");
  if (next_target_q.rows() != n || next_online_q.rows() != n || next_target_q.cols() != next_online_q.cols()) {
    throw std::invalid_argument("cql_backup_targets: next-state value shapes disagree");
  }
  Matrix y(n, 1);
  for (Index i = 0; i < n; ++i) {
    const Vector pi = softmax(next_online_q.row(i));
    Scalar next = 0.0;
    if (rng) {
      next = next_target_q(i, rng->categorical(pi));
    } else {
      next = next_target_q.row(i).dot(pi.transpose());
    }
    y(i, 0) = rewards(i, 0) + gamma * not_done(i, 0) * next;
  }
  return y;
}

CqlBcIdentity cql_bc_identity(const Matrix& q_values, const IndexVector& codes) {
  CqlBcIdentity r;
  r.penalty = cql_penalty_exact(q_values, codes);
  r.nll = softmax_nll(q_values, codes);
  r.gap = std::abs(r.penalty - r.nll);
  return r;
}

Var iql_value_loss(Var values, const Matrix& target_q_sa, Scalar tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("iql_value_loss: tau must lie in (0, 1)");
  check_targets(target_q_sa, values.rows(), "iql_value_loss targets");
  if (values.cols() != 1) throw std::invalid_argument("iql_value_loss: values must be a column");
  Tape& tape = *values.tape;
  const Var u = sub(tape.constant(target_q_sa), values);
  Matrix w(u.rows(), 1);
  for (Index i = 0; i < u.rows(); ++i) w(i, 0) = u.value()(i, 0) < 0.0 ? 1.0 - tau : tau;
  return mean(mul(square(u), tape.constant(std::move(w))));
}

Var iql_q_loss(Var q_sa, const Matrix& rewards, const Matrix& not_done, const Matrix& next_values, Scalar gamma) {
  const Index n = q_sa.rows();
  check_targets(rewards, n, "rewards");
  check_targets(not_done, n, "not_done");
  check_targets(next_values, n, "next_values");
  const Matrix y = rewards.array() + gamma * not_done.array() * next_values.array();
  return mse(q_sa, q_sa.tape->constant(y));
}

Matrix brac_backup_targets(const Matrix& rewards, const Matrix& not_done, const Matrix& next_target_q,
                           const Matrix& next_policy_probs, const Matrix& next_behavior_log_probs, Scalar gamma,
                           Scalar beta) {
  const Index n = rewards.rows();
  check_targets(rewards, n, "rewards");
  check_targets(not_done, n, "not_done");
  if (next_target_q.rows() != n || next_policy_probs.rows() != n || next_behavior_log_probs.rows() != n ||
      next_target_q.cols() != next_policy_probs.cols() || next_target_q.cols() != next_behavior_log_probs.cols()) {
    throw std::invalid_argument("brac_backup_targets: next-state shapes disagree");
  }
  const Matrix inner = next_target_q + beta * next_behavior_log_probs;
  const Matrix expected = next_policy_probs.cwiseProduct(inner).rowwise().sum();
  return rewards.array() + gamma * not_done.array() * expected.array();
}

Var brac_q_loss(Var q_sa, const Matrix& rewards, const Matrix& not_done, const Matrix& next_target_q,
                const Matrix& next_policy_probs, const Matrix& next_behavior_log_probs, Scalar gamma, Scalar beta) {
  const Matrix y = brac_backup_targets(rewards, not_done, next_target_q, next_policy_probs, next_behavior_log_probs,
                                       gamma, beta);
  check_targets(y, q_sa.rows(), "brac_q_loss");
  return mse(q_sa, q_sa.tape->constant(y));
}

Var brac_policy_loss(Var policy_logits, const Matrix& q_values, const Matrix& behavior_log_probs, Scalar beta,
                     Scalar entropy_weight) {
  if (q_values.rows() != policy_logits.rows() || q_values.cols() != policy_logits.cols() ||
      behavior_log_probs.rows() != q_values.rows() || behavior_log_probs.cols() != q_values.cols()) {
    throw std::invalid_argument("brac_policy_loss: shape mismatch");
  }
  Tape& tape = *policy_logits.tape;
  const Var pi = softmax(policy_logits);
  const Var log_pi = log_softmax(policy_logits);
  const Var inner = sub(tape.constant(q_values + beta * behavior_log_probs), scale(log_pi, entropy_weight));
  return neg(mean(row_sum(mul(pi, inner))));
}

Var bc_loss(Var logits, const IndexVector& codes) { return neg(mean(gather(log_softmax(logits), codes))); }

// --------------------------------------------------------------- training

namespace {

Scalar mean_kl_rows(const Matrix& p, const Matrix& log_q) {
  Scalar acc = 0.0;
  for (Index i = 0; i < p.rows(); ++i) acc += exact_kl(p.row(i), log_q.row(i).array().exp().matrix());
  return acc / static_cast<Scalar>(p.rows());
}

Scalar step_behavior(DiscreteAgent& agent, const Matrix& x, const IndexVector& codes, Scalar lr) {
  Tape tape;
  const Var loss = bc_loss(agent.behavior->forward(tape, tape.constant(x)), codes);
  const Scalar v = loss.item();
  tape.backward(loss);
  adam_step(agent.behavior->params(), lr);
  return v;
}

}  // namespace

DiscreteTrainResult train_agent(const DiscreteTransitionDataset& dataset, const QuantizerModel& quantizer,
                                const AlgoConfig& config, const AgentEvaluator& evaluator) {
  config.validate();
  if (dataset.codebook_size != quantizer.codebook_size()) {
    throw std::invalid_argument("dataset codebook size " + std::to_string(dataset.codebook_size) +
                                " differs from quantizer's " + std::to_string(quantizer.codebook_size()));
  }
  if (dataset.source.metadata().state_dim != quantizer.state_dim()) {
    throw std::invalid_argument("dataset state dimension differs from quantizer's");
  }
  if (dataset.size() == 0) throw std::invalid_argument("train_agent: empty dataset");
  const Index k = dataset.codebook_size;
  for (Index c : dataset.codes) {
    if (c < 0 || c >= k) throw std::out_of_range("train_agent: dataset code out of range");
  }

  Rng init_rng(derive_seed(config.seed, "agent-init"));
  Rng batch_rng(derive_seed(config.seed, "agent-batches"));
  Rng backup_rng(derive_seed(config.seed, "agent-backup"));

  DiscreteTrainResult result{DiscreteAgent::create(dataset.source.metadata().state_dim, k, config, init_rng),
                             MetricTrace({"loss_q", "bellman", "penalty_batch", "penalty_dataset", "loss_v",
                                          "loss_policy", "loss_behavior", "kl_dataset", "success_rate",
                                          "mean_return"})};
  DiscreteAgent& agent = result.agent;
  agent.state_norm = Normalizer::fit(dataset.source.states());
  if (config.gradient_steps == 0) return result;

  const Matrix all_states = dataset.source.states();
  const Matrix all_x = agent.normalized(all_states);
  const Index n = dataset.size();
  const Scalar gamma = config.discount;

  for (Index step = 1; step <= config.gradient_steps; ++step) {
    IndexVector idx(static_cast<std::size_t>(config.batch_size));
    for (auto& i : idx) i = batch_rng.uniform_index(n);
    const Batch b = make_batch(dataset, idx);
    const Matrix x = agent.normalized(b.states);
    const Matrix nx = agent.normalized(b.next_states);

    Scalar loss_q = kNaN, bellman = kNaN, penalty = kNaN, loss_v = kNaN, loss_pi = kNaN, loss_beh = kNaN;

    switch (config.algorithm) {
      case Algorithm::kCql: {
        const Matrix y = cql_backup_targets(b.rewards, b.not_done, agent.q_target.evaluate(nx), agent.q.evaluate(nx),
                                            gamma, config.exact_backup ? nullptr : &backup_rng);
        Tape tape;
        const CqlTerms t = cql_loss(agent.q.forward(tape, tape.constant(x)), b.codes, y, config.cql_alpha);
        loss_q = t.total.item();
        bellman = t.bellman.item();
        penalty = t.penalty.item();
        tape.backward(t.total);
        adam_step(agent.q.params(), config.q_learning_rate);
        break;
      }
      case Algorithm::kIql: {
        {
          const Matrix target_sa = gather_values(agent.q_target.evaluate(x), b.codes);
          Tape tape;
          const Var lv = iql_value_loss(agent.value->forward(tape, tape.constant(x)), target_sa, config.iql_tau);
          loss_v = lv.item();
          tape.backward(lv);
          adam_step(agent.value->params(), config.value_learning_rate);
        }
        {
          const Matrix next_v = agent.value->evaluate(nx);
          Tape tape;
          const Var q_all = agent.q.forward(tape, tape.constant(x));
          const Var lq = iql_q_loss(gather(q_all, b.codes), b.rewards, b.not_done, next_v, gamma);
          loss_q = lq.item();
          penalty = cql_penalty_exact(q_all.value(), b.codes);
          tape.backward(lq);
          adam_step(agent.q.params(), config.q_learning_rate);
        }
        loss_beh = step_behavior(agent, x, b.codes, config.behavior_learning_rate);
        break;
      }
      case Algorithm::kBrac: {
        loss_beh = step_behavior(agent, x, b.codes, config.behavior_learning_rate);
        {
          const Matrix next_pi = row_softmax(agent.policy->evaluate(nx));
          const Matrix next_blp = floored_log_softmax(agent.behavior->evaluate(nx));
          Tape tape;
          const Var q_all = agent.q.forward(tape, tape.constant(x));
          const Var lq = brac_q_loss(gather(q_all, b.codes), b.rewards, b.not_done, agent.q_target.evaluate(nx),
                                     next_pi, next_blp, gamma, config.brac_beta);
          loss_q = lq.item();
          penalty = cql_penalty_exact(q_all.value(), b.codes);
          tape.backward(lq);
          adam_step(agent.q.params(), config.q_learning_rate);
        }
        {
          const Matrix qv = agent.q.evaluate(x);
          const Matrix blp = floored_log_softmax(agent.behavior->evaluate(x));
          Tape tape;
          const Var lp = brac_policy_loss(agent.policy->forward(tape, tape.constant(x)), qv, blp, config.brac_beta,
                                          config.brac_entropy);
          loss_pi = lp.item();
          tape.backward(lp);
          adam_step(agent.policy->params(), config.policy_learning_rate);
        }
        break;
      }
      case Algorithm::kBc: {
        Tape tape;
        const Var lp = bc_loss(agent.policy->forward(tape, tape.constant(x)), b.codes);
        loss_pi = lp.item();
        tape.backward(lp);
        adam_step(agent.policy->params(), config.policy_learning_rate);
        break;
      }
    }

    if (step % config.target_update_period == 0) agent.q_target.params().copy_values_from(agent.q.params());

    const bool last = step == config.gradient_steps;
    const bool do_eval = evaluator && (last || (config.eval_period > 0 && step % config.eval_period == 0));
    if (!(last || step % config.log_period == 0 || do_eval)) continue;

    Scalar penalty_dataset = kNaN, kl_dataset = kNaN;
    if (config.algorithm != Algorithm::kBc) penalty_dataset = cql_penalty_exact(agent.q.evaluate(all_x), dataset.codes);
    if (agent.behavior) {
      kl_dataset = mean_kl_rows(agent.policy_probs(all_states), agent.behavior_log_probs(all_states));
    }
    Scalar success = kNaN, ret = kNaN;
    if (do_eval) {
      const EvalResult e = evaluator(agent);
      success = e.success_rate;
      ret = e.mean_return;
    }
    result.trace.add_row(step, {loss_q, bellman, penalty, penalty_dataset, loss_v, loss_pi, loss_beh, kl_dataset,
                                success, ret});
  }
  return result;
}

// ----------------------------------------------------------------- acting

Index select_code(const DiscreteAgent& agent, const Vector& state, ActMode mode, Rng* rng) {
  if (state.size() != agent.state_dim) throw std::invalid_argument("select_code: state dimension mismatch");
  const Matrix logits = agent.policy_logits(state.transpose());
  if (mode == ActMode::kGreedy) return argmax(logits.row(0));
  if (!rng) throw std::invalid_argument("select_code: sampling requires an rng");
  return rng->categorical(softmax(logits.row(0)));
}

Vector act(const DiscreteAgent& agent, const QuantizerModel& quantizer, const Vector& state, ActMode mode, Rng* rng) {
  return decode_action(quantizer, state, select_code(agent, state, mode, rng));
}

EvalResult evaluate_discrete_agent(const DiscreteAgent& agent, const QuantizerModel& quantizer,
                                   const MazeSpec& spec, Index episodes, std::uint64_t seed) {
  const PolicyFn policy = [&](const Vector2& s) -> Vector2 {
    const Vector a = act(agent, quantizer, Vector(s), ActMode::kGreedy);
    return {a(0), a(1)};
  };
  return evaluate_maze_policy(spec, policy, episodes, seed);
}

}  // namespace saq
