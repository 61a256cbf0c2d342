#include "saq/continuous.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "saq/binio.hpp"
#include "saq/discrete_math.hpp"

namespace saq {

namespace {

constexpr Scalar kNaN = std::numeric_limits<Scalar>::quiet_NaN();
const Scalar kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

Scalar log1m_tanh_sq_scalar(Scalar u) {
  const Scalar x = -2.0 * u;
  const Scalar softplus = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  return 2.0 * (std::numbers::ln2 - u - softplus);
}

Matrix atanh_clamped(const Matrix& a) {
  return a.unaryExpr([](Scalar v) { return std::atanh(std::clamp(v, -kActionClamp, kActionClamp)); });
}

Matrix repeat_rows(const Matrix& m, Index times) {
  Matrix out(m.rows() * times, m.cols());
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < times; ++j) out.row(i * times + j) = m.row(i);
  }
  return out;
}

std::vector<Index> net_sizes(Index in, const std::vector<Index>& hidden, Index out) {
  std::vector<Index> s{in};
  s.insert(s.end(), hidden.begin(), hidden.end());
  s.push_back(out);
  return s;
}

}  // namespace

Var log1m_tanh_sq(Var u) {
  const Matrix out = log1m_tanh_sq(u.value());
  const std::size_t iu = u.id;
  const Matrix slope = -2.0 * u.value().array().tanh();
  return u.tape->record(
      out, [iu, slope](Tape& t, const Matrix& g) { t.accumulate(iu, g.cwiseProduct(slope)); },
      u.tape->requires_grad(u));
}

Matrix log1m_tanh_sq(const Matrix& u) { return u.unaryExpr([](Scalar v) { return log1m_tanh_sq_scalar(v); }); }

// ------------------------------------------------------------------ policy

SquashedGaussianPolicy::SquashedGaussianPolicy(Index state_dim, Index action_dim, const std::vector<Index>& hidden,
                                               Rng& rng)
    : net_("policy", net_sizes(state_dim, hidden, 2 * action_dim), Activation::kRelu, rng) {}

SquashedGaussianPolicy::SquashedGaussianPolicy(Mlp net) : net_(std::move(net)) {
  if (net_.output_dim() % 2 != 0) throw std::invalid_argument("policy network output width must be even");
}

SquashedGaussianPolicy::Sample SquashedGaussianPolicy::sample(Tape& tape, Var x, const Matrix& eps) {
  const Index a = action_dim();
  const Var out = net_.forward(tape, x);
  const Var mu = slice_cols(out, 0, a);
  const Var log_std = clamp(slice_cols(out, a, a), kLogStdMin, kLogStdMax);
  const Var u = add(mu, mul(exp(log_std), tape.constant(eps)));
  Sample s;
  s.action = tanh(u);
  const Matrix base = -0.5 * eps.array().square() - kHalfLog2Pi;
  s.log_prob = row_sum(sub(sub(tape.constant(base), log_std), log1m_tanh_sq(u)));
  return s;
}

SquashedGaussianPolicy::Draw SquashedGaussianPolicy::sample(const Matrix& x, Rng& rng) const {
  const Index a = action_dim();
  const Matrix out = net_.evaluate(x);
  const Matrix eps = rng.normal_matrix(x.rows(), a);
  const Matrix log_std = out.rightCols(a).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  const Matrix u = out.leftCols(a).array() + log_std.array().exp() * eps.array();
  Draw d;
  d.actions = u.array().tanh();
  const Matrix per_dim = (-0.5 * eps.array().square() - kHalfLog2Pi).matrix() - log_std - log1m_tanh_sq(u);
  d.log_probs = per_dim.rowwise().sum();
  return d;
}

Matrix SquashedGaussianPolicy::log_prob(const Matrix& x, const Matrix& actions) const {
  const Index a = action_dim();
  if (actions.cols() != a || actions.rows() != x.rows()) throw std::invalid_argument("log_prob: shape mismatch");
  const Matrix out = net_.evaluate(x);
  const Matrix log_std = out.rightCols(a).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  const Matrix u = atanh_clamped(actions);
  const Matrix z = (u - out.leftCols(a)).array() / log_std.array().exp();
  const Matrix per_dim = (-0.5 * z.array().square() - kHalfLog2Pi).matrix() - log_std - log1m_tanh_sq(u);
  return per_dim.rowwise().sum();
}

Var SquashedGaussianPolicy::log_prob(Tape& tape, Var x, const Matrix& actions) {
  const Index a = action_dim();
  if (actions.cols() != a || actions.rows() != x.rows()) throw std::invalid_argument("log_prob: shape mismatch");
  const Var out = net_.forward(tape, x);
  const Var log_std = clamp(slice_cols(out, a, a), kLogStdMin, kLogStdMax);
  const Matrix u = atanh_clamped(actions);
  const Var z = mul(sub(tape.constant(u), slice_cols(out, 0, a)), exp(neg(log_std)));
  const Matrix base = (-kHalfLog2Pi - log1m_tanh_sq(u).array()).matrix();
  return row_sum(sub(add(scale(square(z), -0.5), tape.constant(base)), log_std));
}

Matrix SquashedGaussianPolicy::mean_action(const Matrix& x) const {
  return net_.evaluate(x).leftCols(action_dim()).array().tanh();
}

// ---------------------------------------------------------------- integrals

Matrix log_integral_exp_grid(const QFunction& q, const Matrix& states, Index action_dim, Index resolution) {
  if (action_dim != 2) throw std::domain_error("grid integration supports 2-D actions only");
  if (resolution < 16) throw std::invalid_argument("grid resolution must be at least 16");
  const Index cells = resolution * resolution;
  Matrix grid(cells, 2);
  const Scalar h = 2.0 / static_cast<Scalar>(resolution);
  for (Index i = 0; i < resolution; ++i) {
    for (Index j = 0; j < resolution; ++j) {
      grid(i * resolution + j, 0) = -1.0 + (static_cast<Scalar>(i) + 0.5) * h;
      grid(i * resolution + j, 1) = -1.0 + (static_cast<Scalar>(j) + 0.5) * h;
    }
  }
  const Scalar log_cell = 2.0 * std::log(h);
  Matrix out(states.rows(), 1);
  for (Index s = 0; s < states.rows(); ++s) {
    const Matrix qv = q(states.row(s).replicate(cells, 1), grid);
    out(s, 0) = logsumexp(qv) + log_cell;
  }
  return out;
}

Scalar exact_penalty_grid(const QFunction& q, const Matrix& states, const Matrix& actions, Index resolution) {
  if (actions.cols() != 2) throw std::domain_error("grid integration supports 2-D actions only");
  if (states.rows() != actions.rows() || states.rows() == 0) {
    throw std::invalid_argument("exact_penalty_grid: states and actions must be non-empty and aligned");
  }
  return log_integral_exp_grid(q, states, 2, resolution).mean() - q(states, actions).mean();
}

namespace {

// log of the equal mixture of the policy density and the uniform density on the box.
Scalar mixture_log_density(Scalar policy_log_prob, Index action_dim) {
  const Scalar lu = -static_cast<Scalar>(action_dim) * std::numbers::ln2;
  const Scalar hi = std::max(policy_log_prob, lu), lo = std::min(policy_log_prob, lu);
  return hi + std::log1p(std::exp(lo - hi)) - std::numbers::ln2;
}

}  // namespace

Matrix log_integral_exp_estimate(const QFunction& q, const SquashedGaussianPolicy& policy,
                                 const Matrix& policy_inputs, const Matrix& states, Index n_samples, Rng& rng) {
  if (n_samples < 1) throw std::invalid_argument("n_samples must be at least 1");
  const Index a = policy.action_dim();
  const Index b = states.rows();
  const Matrix rep_in = repeat_rows(policy_inputs, n_samples);
  const SquashedGaussianPolicy::Draw d = policy.sample(rep_in, rng);
  const Matrix uniform = rng.uniform_matrix(b * n_samples, a, -1.0, 1.0);
  const Matrix rep = repeat_rows(states, n_samples);
  const Matrix lp_pi = d.log_probs, lp_u = policy.log_prob(rep_in, uniform);
  Matrix qp = q(rep, d.actions), qu = q(rep, uniform);
  for (Index r = 0; r < qp.rows(); ++r) {
    qp(r, 0) -= mixture_log_density(lp_pi(r, 0), a);
    qu(r, 0) -= mixture_log_density(lp_u(r, 0), a);
  }
  Matrix out(b, 1);
  const Scalar log_2n = std::log(2.0 * static_cast<Scalar>(n_samples));
  for (Index i = 0; i < b; ++i) {
    Vector terms(2 * n_samples);
    terms << qp.middleRows(i * n_samples, n_samples).reshaped(), qu.middleRows(i * n_samples, n_samples).reshaped();
    out(i, 0) = logsumexp(terms) - log_2n;
  }
  return out;
}

// ------------------------------------------------------------------- agent

void ContinuousConfig::validate() const {
  if (!(discount >= 0.0 && discount < 1.0)) throw std::invalid_argument("discount must lie in [0, 1)");
  if (!(cql_alpha >= 0.0) || !(entropy_weight >= 0.0)) throw std::invalid_argument("weights must be non-negative");
  if (n_samples < 1) throw std::invalid_argument("n_samples must be at least 1");
  if (batch_size <= 0 || gradient_steps < 0) throw std::invalid_argument("invalid batch size or step count");
  if (target_update_period <= 0 || log_period <= 0 || eval_period < 0) throw std::invalid_argument("invalid period");
  if (!(q_learning_rate > 0.0 && policy_learning_rate > 0.0)) throw std::invalid_argument("learning rates must be positive");
  if (grid_resolution < 16) throw std::invalid_argument("grid_resolution must be at least 16");
  if (probe_states <= 0) throw std::invalid_argument("probe_states must be positive");
}

ContinuousAgent ContinuousAgent::create(Index state_dim, Index action_dim, const ContinuousConfig& config, Rng& rng) {
  ContinuousAgent a;
  a.state_dim = state_dim;
  a.action_dim = action_dim;
  a.state_norm = Normalizer::identity(state_dim);
  a.policy = SquashedGaussianPolicy(state_dim, action_dim, config.hidden, rng);
  a.q = Mlp("q", net_sizes(state_dim + action_dim, config.hidden, 1), Activation::kRelu, rng);
  a.q_target = a.q;
  return a;
}

Matrix ContinuousAgent::q_values(const Matrix& states, const Matrix& actions) const {
  Matrix in(states.rows(), state_dim + action_dim);
  in << state_norm.apply(states), actions;
  return q.evaluate(in);
}

QFunction ContinuousAgent::q_function() const {
  return [this](const Matrix& s, const Matrix& a) { return q_values(s, a); };
}

Matrix ContinuousAgent::act(const Matrix& states) const { return policy.mean_action(state_norm.apply(states)); }

std::vector<std::uint8_t> ContinuousAgent::serialize() const {
  ModelContainer c;
  c.magic = {'S', 'A', 'Q', 'C'};
  c.dims = {static_cast<std::uint32_t>(state_dim), static_cast<std::uint32_t>(action_dim), 0, 0};
  c.blocks.push_back({"state_norm.mean", state_norm.mean});
  c.blocks.push_back({"state_norm.scale", state_norm.scale});
  for (const auto& p : policy.net().params().params()) c.blocks.push_back({p.name, p.value});
  for (const auto& p : q.params().params()) c.blocks.push_back({p.name, p.value});
  for (const auto& p : q_target.params().params()) c.blocks.push_back({"target." + p.name, p.value});
  return c.encode();
}

ContinuousAgent ContinuousAgent::deserialize(std::span<const std::uint8_t> bytes) {
  const ModelContainer c = ModelContainer::decode(bytes, "SAQC");
  ContinuousAgent a;
  a.state_dim = c.dims[0];
  a.action_dim = c.dims[1];
  a.state_norm = {c.block("state_norm.mean"), c.block("state_norm.scale")};
  ParameterSet pol, q, target;
  for (const auto& b : c.blocks) {
    if (b.name.starts_with("policy.")) pol.add(b.name, b.value);
    else if (b.name.starts_with("q.")) q.add(b.name, b.value);
    else if (b.name.starts_with("target.")) target.add(b.name.substr(7), b.value);
  }
  a.policy = SquashedGaussianPolicy(Mlp::from_parameters(std::move(pol), Activation::kRelu));
  a.q = Mlp::from_parameters(std::move(q), Activation::kRelu);
  a.q_target = Mlp::from_parameters(std::move(target), Activation::kRelu);
  if (a.policy.state_dim() != a.state_dim || a.policy.action_dim() != a.action_dim ||
      a.q.input_dim() != a.state_dim + a.action_dim || a.q.output_dim() != 1 ||
      a.q_target.input_dim() != a.q.input_dim() || a.q_target.output_dim() != 1) {
    throw FormatError("network shapes disagree with header dims", 6);
  }
  return a;
}

void ContinuousAgent::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

ContinuousAgent ContinuousAgent::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

// ------------------------------------------------------------------ losses

ContinuousCqlTerms continuous_cql_loss(ContinuousAgent& agent, Tape& tape, const Batch& batch, Scalar alpha,
                                       Scalar gamma, Index n_samples, Rng& rng) {
  if (n_samples < 1) throw std::invalid_argument("n_samples must be at least 1");
  const Index b = batch.states.rows();
  const Index ad = agent.action_dim;
  const Matrix x = agent.state_norm.apply(batch.states);
  const Matrix nx = agent.state_norm.apply(batch.next_states);

  const SquashedGaussianPolicy::Draw next = agent.policy.sample(nx, rng);
  Matrix next_in(b, agent.state_dim + ad);
  next_in << nx, next.actions;
  const Matrix y = batch.rewards.array() + gamma * batch.not_done.array() * agent.q_target.evaluate(next_in).array();

  Matrix data_in(b, agent.state_dim + ad);
  data_in << x, batch.actions;
  const Var q_data = agent.q.forward(tape, tape.constant(data_in));

  const Matrix rep = repeat_rows(x, n_samples);
  const SquashedGaussianPolicy::Draw pd = agent.policy.sample(rep, rng);
  const Matrix uniform = rng.uniform_matrix(b * n_samples, ad, -1.0, 1.0);
  const Matrix lp_uniform = agent.policy.log_prob(rep, uniform);
  Matrix sample_in(2 * b * n_samples, agent.state_dim + ad);
  Matrix log_density(2 * b * n_samples, 1);
  // Row i * 2n + j: policy samples for j < n, uniform samples after.
  for (Index i = 0; i < b; ++i) {
    for (Index j = 0; j < n_samples; ++j) {
      const Index src = i * n_samples + j;
      const Index dp = i * 2 * n_samples + j;
      const Index du = dp + n_samples;
      sample_in.row(dp) << x.row(i), pd.actions.row(src);
      sample_in.row(du) << x.row(i), uniform.row(src);
      log_density(dp, 0) = mixture_log_density(pd.log_probs(src, 0), ad);
      log_density(du, 0) = mixture_log_density(lp_uniform(src, 0), ad);
    }
  }
  const Var q_samples = agent.q.forward(tape, tape.constant(sample_in));
  const Var weighted = reshape(sub(q_samples, tape.constant(log_density)), b, 2 * n_samples);
  const Var lie = add_scalar(logsumexp(weighted), -std::log(2.0 * static_cast<Scalar>(n_samples)));

  ContinuousCqlTerms t;
  t.bellman = scale(mse(q_data, tape.constant(y)), 0.5);
  t.estimated_penalty = sub(mean(lie), mean(q_data));
  t.total = add(t.bellman, scale(t.estimated_penalty, alpha));
  return t;
}

Var continuous_bc_loss(SquashedGaussianPolicy& policy, Tape& tape, const Matrix& x, const Matrix& actions) {
  return neg(mean(policy.log_prob(tape, tape.constant(x), actions)));
}

// ---------------------------------------------------------------- training

namespace {

Scalar policy_improvement_step(ContinuousAgent& agent, const Matrix& x, Scalar entropy_weight, Scalar lr, Rng& rng) {
  Tape tape;
  const Var xin = tape.constant(x);
  const SquashedGaussianPolicy::Sample s =
      agent.policy.sample(tape, xin, rng.normal_matrix(x.rows(), agent.action_dim));
  const Var qv = agent.q.forward(tape, concat_cols(xin, s.action));
  const Var loss = sub(scale(mean(s.log_prob), entropy_weight), mean(qv));
  const Scalar v = loss.item();
  tape.backward(loss);
  adam_step(agent.policy.net().params(), lr);
  agent.q.params().zero_grad();
  return v;
}

IndexVector probe_indices(Index n, Index count) {
  count = std::min(count, n);
  IndexVector idx(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = (i * n) / count;
  return idx;
}

void check_continuous_dataset(const TransitionDataset& dataset) {
  if (dataset.empty()) throw std::invalid_argument("continuous training: empty dataset");
}

}  // namespace

ContinuousTrainResult train_continuous_cql(const TransitionDataset& dataset, const ContinuousConfig& config,
                                           const ContinuousEvaluator& evaluator) {
  config.validate();
  check_continuous_dataset(dataset);
  const Index sd = dataset.metadata().state_dim;
  const Index ad = dataset.metadata().action_dim;
  if (ad != 2) throw std::domain_error("continuous CQL diagnostics require 2-D actions");

  Rng init_rng(derive_seed(config.seed, "continuous-init"));
  Rng batch_rng(derive_seed(config.seed, "continuous-batches"));
  Rng sample_rng(derive_seed(config.seed, "continuous-samples"));
  Rng probe_rng(derive_seed(config.seed, "continuous-probe"));

  ContinuousTrainResult result{ContinuousAgent::create(sd, ad, config, init_rng),
                               MetricTrace({"loss_q", "bellman", "penalty_batch", "loss_policy", "penalty_estimated",
                                            "penalty_exact", "penalty_gap", "success_rate", "mean_return"})};
  ContinuousAgent& agent = result.agent;
  agent.state_norm = Normalizer::fit(dataset.states());
  if (config.gradient_steps == 0) return result;

  const Batch probe = make_batch(dataset, probe_indices(dataset.size(), config.probe_states));
  const Matrix probe_x = agent.state_norm.apply(probe.states);

  for (Index step = 1; step <= config.gradient_steps; ++step) {
    IndexVector idx(static_cast<std::size_t>(config.batch_size));
    for (auto& i : idx) i = batch_rng.uniform_index(dataset.size());
    const Batch b = make_batch(dataset, idx);

    Scalar loss_q, bellman, penalty;
    {
      Tape tape;
      const ContinuousCqlTerms t =
          continuous_cql_loss(agent, tape, b, config.cql_alpha, config.discount, config.n_samples, sample_rng);
      loss_q = t.total.item();
      bellman = t.bellman.item();
      penalty = t.estimated_penalty.item();
      tape.backward(t.total);
      adam_step(agent.q.params(), config.q_learning_rate);
    }
    const Scalar loss_pi = policy_improvement_step(agent, agent.state_norm.apply(b.states), config.entropy_weight,
                                                   config.policy_learning_rate, sample_rng);

    if (step % config.target_update_period == 0) agent.q_target.params().copy_values_from(agent.q.params());

    const bool last = step == config.gradient_steps;
    const bool do_eval = evaluator && (last || (config.eval_period > 0 && step % config.eval_period == 0));
    if (!(last || step % config.log_period == 0 || do_eval)) continue;

    const QFunction qf = agent.q_function();
    const Scalar q_data = qf(probe.states, probe.actions).mean();
    const Scalar estimated =
        log_integral_exp_estimate(qf, agent.policy, probe_x, probe.states, config.n_samples, probe_rng).mean() -
        q_data;
    const Scalar exact = log_integral_exp_grid(qf, probe.states, ad, config.grid_resolution).mean() - q_data;
    Scalar success = kNaN, ret = kNaN;
    if (do_eval) {
      const EvalResult e = evaluator(agent);
      success = e.success_rate;
      ret = e.mean_return;
    }
    result.trace.add_row(step, {loss_q, bellman, penalty, loss_pi, estimated, exact, std::abs(estimated - exact),
                                success, ret});
  }
  return result;
}

ContinuousTrainResult train_continuous_bc(const TransitionDataset& dataset, const ContinuousConfig& config,
                                          const ContinuousEvaluator& evaluator) {
  config.validate();
  check_continuous_dataset(dataset);
  Rng init_rng(derive_seed(config.seed, "continuous-init"));
  Rng batch_rng(derive_seed(config.seed, "continuous-batches"));
  ContinuousTrainResult result{
      ContinuousAgent::create(dataset.metadata().state_dim, dataset.metadata().action_dim, config, init_rng),
      MetricTrace({"loss_policy", "success_rate", "mean_return"})};
  ContinuousAgent& agent = result.agent;
  agent.state_norm = Normalizer::fit(dataset.states());

  for (Index step = 1; step <= config.gradient_steps; ++step) {
    IndexVector idx(static_cast<std::size_t>(config.batch_size));
    for (auto& i : idx) i = batch_rng.uniform_index(dataset.size());
    const Batch b = make_batch(dataset, idx);
    Tape tape;
    const Var loss = continuous_bc_loss(agent.policy, tape, agent.state_norm.apply(b.states), b.actions);
    const Scalar v = loss.item();
    tape.backward(loss);
    adam_step(agent.policy.net().params(), config.policy_learning_rate);

    const bool last = step == config.gradient_steps;
    const bool do_eval = evaluator && (last || (config.eval_period > 0 && step % config.eval_period == 0));
    if (!(last || step % config.log_period == 0 || do_eval)) continue;
    Scalar success = kNaN, ret = kNaN;
    if (do_eval) {
      const EvalResult e = evaluator(agent);
      success = e.success_rate;
      ret = e.mean_return;
    }
    result.trace.add_row(step, {v, success, ret});
  }
  return result;
}

EvalResult evaluate_continuous_agent(const ContinuousAgent& agent, const MazeSpec& spec, Index episodes,
                                     std::uint64_t seed) {
  const PolicyFn policy = [&](const Vector2& s) -> Vector2 {
    const Matrix a = agent.act(s.transpose());
    return {a(0, 0), a(0, 1)};
  };
  return evaluate_maze_policy(spec, policy, episodes, seed);
}

}  // namespace saq
