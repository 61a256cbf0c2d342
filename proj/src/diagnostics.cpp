#include "saq/diagnostics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"
#include "saq/discrete_math.hpp"

namespace saq {

namespace {

constexpr Scalar kNaN = std::numeric_limits<Scalar>::quiet_NaN();
constexpr Scalar kInf = std::numeric_limits<Scalar>::infinity();

std::string real(Scalar v) { return format_real(v); }

Scalar config_real(const ExperimentReport& r, const std::string& key) {
  auto it = r.config.find(key);
  if (it == r.config.end()) throw std::invalid_argument("report config lacks '" + key + "'");
  return parse_real(it->second);
}

Scalar mean_of(const std::vector<Scalar>& v) {
  if (v.empty()) return kNaN;
  Scalar s = 0.0;
  for (Scalar x : v) s += x;
  return s / static_cast<Scalar>(v.size());
}

Scalar std_of(const std::vector<Scalar>& v) {
  if (v.size() < 2) return 0.0;
  const Scalar m = mean_of(v);
  Scalar s = 0.0;
  for (Scalar x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<Scalar>(v.size() - 1));
}

Verdict make_verdict(std::string name, std::string claim, std::string threshold, Scalar value, bool passed) {
  return {std::move(name), std::move(claim), std::move(threshold), value, passed && !std::isnan(value)};
}

void parallel_for(Index n, Index threads, const std::function<void(Index)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<Index> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (Index t = 0; t < std::min(threads, n); ++t) {
    pool.emplace_back([&] {
      for (Index i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

std::string seed_list(const std::vector<std::uint64_t>& seeds) {
  std::string s;
  for (std::size_t i = 0; i < seeds.size(); ++i) s += (i ? "," : "") + std::to_string(seeds[i]);
  return s;
}

std::string index_list(const std::vector<Index>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

void add_settings(std::map<std::string, std::string>& c, const DiagnosticSettings& s) {
  c["maze.layout"] = s.maze.to_text();
  c["demonstrations"] = std::to_string(s.demonstrations);
  c["demo_noise"] = real(s.demo_noise);
  c["quantizer.codebook_size"] = std::to_string(s.quantizer.codebook_size);
  c["quantizer.embedding_dim"] = std::to_string(s.quantizer.embedding_dim);
  c["quantizer.hidden"] = index_list(s.quantizer.hidden);
  c["quantizer.epochs"] = std::to_string(s.quantizer.epochs);
  c["quantizer.batch_size"] = std::to_string(s.quantizer.batch_size);
  c["quantizer.learning_rate"] = real(s.quantizer.learning_rate);
  c["quantizer.commitment_weight"] = real(s.quantizer.commitment_weight);
  c["quantizer.dead_code_period"] = std::to_string(s.quantizer.dead_code_period);
  c["quantizer.state_conditioned"] = s.quantizer.state_conditioned ? "1" : "0";
  c["agent.algorithm"] = to_string(s.agent.algorithm);
  c["agent.cql_alpha"] = real(s.agent.cql_alpha);
  c["agent.discount"] = real(s.agent.discount);
  c["agent.hidden"] = index_list(s.agent.hidden);
  c["agent.batch_size"] = std::to_string(s.agent.batch_size);
  c["agent.gradient_steps"] = std::to_string(s.agent.gradient_steps);
  c["agent.q_learning_rate"] = real(s.agent.q_learning_rate);
  c["agent.target_update_period"] = std::to_string(s.agent.target_update_period);
  c["agent.exact_backup"] = s.agent.exact_backup ? "1" : "0";
  c["agent.log_period"] = std::to_string(s.agent.log_period);
  c["eval_episodes"] = std::to_string(s.eval_episodes);
  c["eval_seed"] = std::to_string(s.eval_seed);
  c["smoothing_window"] = std::to_string(s.smoothing_window);
}

void add_continuous_settings(std::map<std::string, std::string>& c, const ContinuousConfig& cc) {
  c["continuous.cql_alpha"] = real(cc.cql_alpha);
  c["continuous.discount"] = real(cc.discount);
  c["continuous.entropy_weight"] = real(cc.entropy_weight);
  c["continuous.n_samples"] = std::to_string(cc.n_samples);
  c["continuous.hidden"] = index_list(cc.hidden);
  c["continuous.batch_size"] = std::to_string(cc.batch_size);
  c["continuous.gradient_steps"] = std::to_string(cc.gradient_steps);
  c["continuous.target_update_period"] = std::to_string(cc.target_update_period);
  c["continuous.q_learning_rate"] = real(cc.q_learning_rate);
  c["continuous.policy_learning_rate"] = real(cc.policy_learning_rate);
  c["continuous.grid_resolution"] = std::to_string(cc.grid_resolution);
  c["continuous.probe_states"] = std::to_string(cc.probe_states);
  c["continuous.log_period"] = std::to_string(cc.log_period);
}

std::string pipeline_key(const DiagnosticSettings& s, std::uint64_t seed) {
  std::map<std::string, std::string> c;
  add_settings(c, s);
  c.erase("smoothing_window");
  c["agent.eval_period"] = std::to_string(s.agent.eval_period);
  c["agent.iql_tau"] = real(s.agent.iql_tau);
  c["agent.iql_lambda"] = real(s.agent.iql_lambda);
  c["agent.brac_beta"] = real(s.agent.brac_beta);
  c["agent.brac_entropy"] = real(s.agent.brac_entropy);
  c["agent.value_learning_rate"] = real(s.agent.value_learning_rate);
  c["agent.policy_learning_rate"] = real(s.agent.policy_learning_rate);
  c["agent.behavior_learning_rate"] = real(s.agent.behavior_learning_rate);
  c["maze.dt"] = real(s.maze.dt);
  c["maze.goal_radius"] = real(s.maze.goal_radius);
  c["maze.max_episode_steps"] = std::to_string(s.maze.max_episode_steps);
  std::string key = "seed=" + std::to_string(seed);
  for (const auto& [k, v] : c) key += ";" + k + "=" + v;
  return key;
}

/// Row of `trace` whose step is the first at or beyond `step`; -1 if none.
Index row_at_or_after(const std::vector<Scalar>& steps, Scalar step) {
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (steps[i] >= step) return static_cast<Index>(i);
  }
  return -1;
}

std::vector<Scalar> finite_only(const std::vector<Scalar>& v) {
  std::vector<Scalar> out;
  for (Scalar x : v) {
    if (!std::isnan(x)) out.push_back(x);
  }
  return out;
}

Vector random_distribution(Rng& rng, Index k, Scalar spread) {
  Vector logits(k);
  for (Index i = 0; i < k; ++i) logits(i) = rng.normal(0.0, spread);
  return softmax(logits);
}

Scalar log_uniform(Rng& rng, Scalar lo, Scalar hi) { return std::exp(rng.uniform(std::log(lo), std::log(hi))); }

}  // namespace

// ------------------------------------------------------------------ report

bool ExperimentReport::passed() const {
  return !verdicts.empty() && std::all_of(verdicts.begin(), verdicts.end(), [](const Verdict& v) { return v.passed; });
}

bool ExperimentReport::has_cell(const std::string& name) const {
  return std::any_of(cells.begin(), cells.end(), [&](const auto& c) { return c.first == name; });
}

const MetricTrace& ExperimentReport::cell(const std::string& name) const {
  for (const auto& [n, t] : cells) {
    if (n == name) return t;
  }
  throw std::out_of_range("report '" + id + "' has no cell '" + name + "'");
}

std::string ExperimentReport::summary_text() const {
  std::ostringstream out;
  out << "experiment " << id << ": " << (passed() ? "PASS" : "FAIL") << "\n\n";
  std::size_t w = 7;
  for (const auto& v : verdicts) w = std::max(w, v.name.size());
  for (const auto& v : verdicts) {
    out << (v.passed ? "PASS  " : "FAIL  ") << v.name << std::string(w - v.name.size() + 2, ' ') << real(v.value)
        << "  (" << v.threshold << ")\n      " << v.claim << "\n";
  }
  if (!summary.empty()) {
    out << "\nsummary\n";
    for (const auto& [k, v] : summary) out << "  " << k << " = " << real(v) << "\n";
  }
  return out.str();
}

void ExperimentReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir / "cells");
  nlohmann::ordered_json j;
  j["id"] = id;
  j["passed"] = passed();
  j["config"] = config;
  nlohmann::ordered_json sum = nlohmann::ordered_json::object();
  for (const auto& [k, v] : summary) sum[k] = real(v);
  j["summary"] = sum;
  j["verdicts"] = nlohmann::ordered_json::array();
  for (const auto& v : verdicts) {
    j["verdicts"].push_back(
        {{"name", v.name}, {"claim", v.claim}, {"threshold", v.threshold}, {"value", real(v.value)}, {"passed", v.passed}});
  }
  j["cells"] = nlohmann::ordered_json::array();
  for (const auto& [name, trace] : cells) {
    const std::string file = "cells/" + name + ".csv";
    trace.write_csv(dir / file);
    j["cells"].push_back({{"name", name}, {"file", file}});
  }
  std::ofstream(dir / "report.json", std::ios::binary | std::ios::trunc) << j.dump(2) << "\n";
  std::ofstream(dir / "summary.txt", std::ios::binary | std::ios::trunc) << summary_text();
}

ExperimentReport ExperimentReport::read(const std::filesystem::path& dir) {
  std::ifstream in(dir / "report.json", std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + (dir / "report.json").string());
  const nlohmann::json j = nlohmann::json::parse(in);
  ExperimentReport r;
  r.id = j.at("id").get<std::string>();
  r.config = j.at("config").get<std::map<std::string, std::string>>();
  for (const auto& [k, v] : j.at("summary").items()) r.summary[k] = parse_real(v.get<std::string>());
  for (const auto& v : j.at("verdicts")) {
    r.verdicts.push_back({v.at("name").get<std::string>(), v.at("claim").get<std::string>(),
                          v.at("threshold").get<std::string>(), parse_real(v.at("value").get<std::string>()),
                          v.at("passed").get<bool>()});
  }
  for (const auto& c : j.at("cells")) {
    r.cells.emplace_back(c.at("name").get<std::string>(), MetricTrace::read_csv(dir / c.at("file").get<std::string>()));
  }
  return r;
}

// ---------------------------------------------------------- trace analysis

std::vector<Scalar> moving_average(const std::vector<Scalar>& values, Index window) {
  if (window <= 0) throw std::invalid_argument("moving_average: window must be positive");
  std::vector<Scalar> out;
  const Index n = static_cast<Index>(values.size());
  if (n < window) return out;
  Scalar acc = 0.0;
  for (Index i = 0; i < window; ++i) acc += values[static_cast<std::size_t>(i)];
  out.push_back(acc / static_cast<Scalar>(window));
  for (Index i = window; i < n; ++i) {
    acc += values[static_cast<std::size_t>(i)] - values[static_cast<std::size_t>(i - window)];
    out.push_back(acc / static_cast<Scalar>(window));
  }
  return out;
}

Scalar smoothed_monotone_fraction(const std::vector<Scalar>& values, Index window) {
  const std::vector<Scalar> s = moving_average(finite_only(values), window);
  if (s.size() < 2) return kNaN;
  Index ok = 0;
  for (std::size_t i = 1; i < s.size(); ++i) ok += s[i] <= s[i - 1] ? 1 : 0;
  return static_cast<Scalar>(ok) / static_cast<Scalar>(s.size() - 1);
}

// ------------------------------------------------------- constrained oracle

PenalizedSolution mirror_descent_penalized(const Vector& advantages, const Vector& behavior, Scalar lambda,
                                           const MirrorDescentOptions& options) {
  const Index k = advantages.size();
  if (behavior.size() != k) throw std::invalid_argument("mirror_descent: size mismatch");
  if (!(lambda >= 0.0)) throw std::invalid_argument("mirror_descent: lambda must be non-negative");
  std::vector<bool> support(static_cast<std::size_t>(k));
  Vector log_beta(k);
  for (Index i = 0; i < k; ++i) {
    support[static_cast<std::size_t>(i)] = behavior(i) > 0.0;
    log_beta(i) = behavior(i) > 0.0 ? std::log(behavior(i)) : -kInf;
  }
  auto residual = [&](const Vector& log_pi) {
    if (lambda > 0.0) {
      Scalar lo = kInf, hi = -kInf;
      for (Index i = 0; i < k; ++i) {
        if (!support[static_cast<std::size_t>(i)]) continue;
        const Scalar g = advantages(i) - lambda * (log_pi(i) - log_beta(i));
        lo = std::min(lo, g);
        hi = std::max(hi, g);
      }
      return hi - lo;
    }
    Scalar best = -kInf;
    for (Index i = 0; i < k; ++i) {
      if (support[static_cast<std::size_t>(i)]) best = std::max(best, advantages(i));
    }
    Scalar off = 0.0;
    for (Index i = 0; i < k; ++i) {
      if (advantages(i) < best) off += std::exp(log_pi(i));
    }
    return off;
  };

  Vector log_pi = log_beta;
  PenalizedSolution s;
  for (Index it = 1; it <= options.max_iterations; ++it) {
    for (Index i = 0; i < k; ++i) {
      if (!support[static_cast<std::size_t>(i)]) continue;
      log_pi(i) += options.step * (advantages(i) - lambda * (log_pi(i) - log_beta(i)));
    }
    log_pi.array() -= logsumexp(log_pi);
    if (it >= options.iterations && it % 100 == 0 && residual(log_pi) <= options.tolerance) break;
  }
  s.policy = log_pi.array().exp();
  s.residual = residual(log_pi);
  s.converged = s.residual <= options.tolerance;
  return s;
}

KlConstrainedSolution solve_kl_constrained(const Vector& advantages, const Vector& behavior, Scalar epsilon,
                                           const MirrorDescentOptions& options, Scalar kl_tolerance) {
  if (!(epsilon >= 0.0)) throw std::invalid_argument("solve_kl_constrained: epsilon must be non-negative");
  auto finish = [&](Vector policy, Scalar multiplier, bool converged) {
    KlConstrainedSolution r;
    r.kl = exact_kl(policy, behavior);
    r.objective = policy.dot(advantages);
    r.policy = std::move(policy);
    r.multiplier = multiplier;
    r.converged = converged;
    return r;
  };
  if (epsilon == 0.0) return finish(behavior, kInf, true);

  const PenalizedSolution free = mirror_descent_penalized(advantages, behavior, 0.0, options);
  if (exact_kl(free.policy, behavior) <= epsilon + kl_tolerance) return finish(free.policy, 0.0, free.converged);

  auto kl_at = [&](Scalar lambda, PenalizedSolution& sol) {
    sol = mirror_descent_penalized(advantages, behavior, lambda, options);
    return exact_kl(sol.policy, behavior);
  };
  // The exponentiated-gradient map is stable for step * lambda < 2.
  const Scalar lambda_max = 1.0 / options.step;
  PenalizedSolution sol;
  Scalar hi = 1.0;
  while (kl_at(hi, sol) > epsilon && hi < lambda_max) hi = std::min(2.0 * hi, lambda_max);
  if (kl_at(hi, sol) > epsilon + kl_tolerance) return finish(sol.policy, hi, false);
  Scalar lo = hi / 2.0;
  while (kl_at(lo, sol) < epsilon && lo > 1e-8) lo /= 2.0;
  for (int it = 0; it < 200; ++it) {
    const Scalar mid = 0.5 * (lo + hi);
    const Scalar kl = kl_at(mid, sol);
    if (std::abs(kl - epsilon) <= kl_tolerance) return finish(sol.policy, mid, sol.converged);
    (kl > epsilon ? lo : hi) = mid;
  }
  return finish(sol.policy, 0.5 * (lo + hi), false);
}

Scalar total_variation(const Vector& p, const Vector& q) {
  if (p.size() != q.size()) throw std::invalid_argument("total_variation: size mismatch");
  return 0.5 * (p - q).cwiseAbs().sum();
}

// ----------------------------------------------------------------- pipeline

DiagnosticSettings::DiagnosticSettings() {
  agent.algorithm = Algorithm::kCql;
  agent.gradient_steps = 20000;
  agent.log_period = 10;
  agent.eval_period = 0;
  continuous.gradient_steps = 50000;
  continuous.log_period = 100;
  continuous.eval_period = 0;
}

bool PipelineCache::find(const std::string& key, PipelineRun& out) const {
  std::lock_guard lock(mutex_);
  auto it = runs_.find(key);
  if (it == runs_.end()) return false;
  out = it->second;
  return true;
}

void PipelineCache::store(const std::string& key, const PipelineRun& run) {
  std::lock_guard lock(mutex_);
  runs_[key] = run;
}

TransitionDataset maze_demonstrations(const DiagnosticSettings& settings, std::uint64_t seed) {
  return generate_demonstrations(settings.maze, settings.demonstrations, settings.demo_noise,
                                 derive_seed(seed, "dataset"));
}

PipelineRun run_saq_pipeline(const DiagnosticSettings& settings, std::uint64_t seed, PipelineCache* cache) {
  const std::string key = pipeline_key(settings, seed);
  PipelineRun run;
  if (cache && cache->find(key, run)) return run;

  const TransitionDataset data = maze_demonstrations(settings, seed);
  QuantizerTrainConfig qc = settings.quantizer;
  qc.seed = derive_seed(seed, "quantizer");
  QuantizerTrainResult q = train_quantizer(data, qc);
  run.quantizer_trace = std::move(q.trace);
  run.reconstruction_mse = reconstruction_mse(q.model, data);
  const DiscreteTransitionDataset codes = quantize_dataset(data, q.model);
  run.live_codes = codebook_utilization(codes).live_codes();

  AlgoConfig ac = settings.agent;
  ac.seed = derive_seed(seed, "agent");
  AgentEvaluator evaluator;
  if (ac.eval_period > 0) {
    evaluator = [&](const DiscreteAgent& a) {
      return evaluate_discrete_agent(a, q.model, settings.maze, settings.eval_episodes, settings.eval_seed);
    };
  }
  DiscreteTrainResult trained = train_agent(codes, q.model, ac, evaluator);
  run.agent_trace = std::move(trained.trace);
  const EvalResult e =
      evaluate_discrete_agent(trained.agent, q.model, settings.maze, settings.eval_episodes, settings.eval_seed);
  run.success_rate = e.success_rate;
  run.mean_return = e.mean_return;
  if (cache) cache->store(key, run);
  return run;
}

// ---------------------------------------------------------------- verdicts

namespace {

void verdicts_penalty_gap(ExperimentReport& r) {
  const MetricTrace& out = r.cell("outcomes");
  const std::vector<Scalar> seeds = out.column("seed");
  const std::vector<Scalar> saq = out.column("saq_success");
  const std::vector<Scalar> cont = out.column("continuous_success");
  const Scalar saq_min = config_real(r, "threshold.saq_success");
  const Scalar cont_max = config_real(r, "threshold.continuous_success");
  const Scalar mono_min = config_real(r, "threshold.monotone_fraction");
  const Index window = static_cast<Index>(config_real(r, "smoothing_window"));
  const Scalar early = config_real(r, "gap.early_fraction");

  Scalar min_growth = kInf, min_mono = kInf;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const std::string s = std::to_string(static_cast<std::uint64_t>(seeds[i]));
    const MetricTrace& ct = r.cell("continuous-seed" + s);
    const std::vector<Scalar> steps = ct.column("step");
    const std::vector<Scalar> gap = ct.column("penalty_gap");
    Scalar growth = kNaN;
    if (!steps.empty()) {
      const Index at = row_at_or_after(steps, early * steps.back());
      growth = gap.back() - gap[static_cast<std::size_t>(at)];
      r.summary["gap_early.seed" + s] = gap[static_cast<std::size_t>(at)];
      r.summary["gap_end.seed" + s] = gap.back();
    }
    min_growth = std::isnan(growth) ? kNaN : std::min(min_growth, growth);
    const Scalar mono =
        smoothed_monotone_fraction(r.cell("saq-seed" + s).column("penalty_dataset"), window);
    r.summary["saq_monotone_fraction.seed" + s] = mono;
    min_mono = std::isnan(mono) ? kNaN : std::min(min_mono, mono);
  }
  const Scalar saq_mean = mean_of(saq), cont_mean = mean_of(cont);
  r.summary["saq_success.mean"] = saq_mean;
  r.summary["saq_success.std"] = std_of(saq);
  r.summary["continuous_success.mean"] = cont_mean;
  r.summary["continuous_success.std"] = std_of(cont);
  r.verdicts = {
      make_verdict("saq_mean_success", "discrete CQL over learned action codes solves the narrow-data maze",
                   ">= " + real(saq_min), saq_mean, saq_mean >= saq_min),
      make_verdict("continuous_mean_success", "continuous CQL with a sampled penalty degrades on the same data",
                   "<= " + real(cont_max), cont_mean, cont_mean <= cont_max),
      make_verdict("continuous_gap_growth",
                   "the sampled penalty drifts away from the exact integral as training proceeds (min over seeds)",
                   "> 0", min_growth, min_growth > 0.0),
      make_verdict("saq_penalty_monotone", "the exact discrete penalty is minimized smoothly (min over seeds)",
                   ">= " + real(mono_min), min_mono, min_mono >= mono_min),
  };
}

void verdicts_iql_oracle(ExperimentReport& r) {
  const MetricTrace& t = r.cell("instances");
  const std::vector<Scalar> tv = t.column("tv_gap");
  const std::vector<Scalar> obj = t.column("objective_gap");
  const std::vector<Scalar> excess = t.column("kl_excess");
  const std::vector<Scalar> conv = t.column("converged");
  const std::vector<Scalar> kind = t.column("kind");
  const Scalar tv_max = config_real(r, "threshold.tv");
  const Scalar obj_max = config_real(r, "threshold.objective");
  const Scalar kl_tol = config_real(r, "threshold.kl");
  Scalar worst_tv = 0.0, worst_obj = 0.0, worst_excess = -kInf, worst_limit = 0.0;
  Scalar flagged = 0.0;
  for (std::size_t i = 0; i < tv.size(); ++i) {
    if (conv[i] == 0.0) {
      flagged += 1.0;
      continue;
    }
    worst_tv = std::max(worst_tv, tv[i]);
    worst_obj = std::max(worst_obj, obj[i]);
    worst_excess = std::max(worst_excess, excess[i]);
    if (kind[i] != 0.0) worst_limit = std::max(worst_limit, tv[i]);
  }
  r.summary["instances"] = static_cast<Scalar>(tv.size());
  r.summary["flagged"] = flagged;
  r.verdicts = {
      make_verdict("oracle_converged", "every numeric solve converged (non-converged instances are flagged)", "== 0",
                   flagged, flagged == 0.0),
      make_verdict("max_tv_gap", "the closed-form policy solves the KL-constrained problem", "< " + real(tv_max),
                   worst_tv, worst_tv < tv_max),
      make_verdict("limit_tv_gap", "zero budget returns the behavior policy; infinite budget the argmax",
                   "< " + real(tv_max), worst_limit, worst_limit < tv_max),
      make_verdict("max_objective_gap", "oracle and closed form reach the same expected advantage",
                   "< " + real(obj_max), worst_obj, worst_obj < obj_max),
      make_verdict("max_kl_excess", "the oracle solution respects its KL budget", "<= " + real(kl_tol), worst_excess,
                   worst_excess <= kl_tol),
  };
}

void verdicts_codebook(ExperimentReport& r) {
  const MetricTrace& t = r.cell("outcomes");
  const std::vector<Scalar> ks = t.column("codebook_size");
  const std::vector<Scalar> success = t.column("success");
  const Scalar k_min = config_real(r, "ablation.k_min");
  const Scalar spread_max = config_real(r, "threshold.spread");
  std::map<Scalar, std::vector<Scalar>> by_k;
  std::vector<Scalar> in_range;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] < k_min) continue;
    by_k[ks[i]].push_back(success[i]);
    in_range.push_back(success[i]);
  }
  const Scalar grand = mean_of(in_range);
  Scalar dev = by_k.empty() ? kNaN : 0.0, lo = kInf, hi = -kInf;
  for (const auto& [k, v] : by_k) {
    const Scalar m = mean_of(v);
    r.summary["success.k" + std::to_string(static_cast<Index>(k)) + ".mean"] = m;
    r.summary["success.k" + std::to_string(static_cast<Index>(k)) + ".std"] = std_of(v);
    dev = std::max(dev, std::abs(m - grand));
    lo = std::min(lo, m);
    hi = std::max(hi, m);
  }
  r.summary["success.grand_mean"] = grand;
  const Scalar range = by_k.empty() ? kNaN : hi - lo;
  r.verdicts = {
      make_verdict("max_deviation_from_grand_mean", "success is insensitive to the codebook size",
                   "<= " + real(spread_max), dev, dev <= spread_max),
      make_verdict("success_range", "largest difference in mean success between codebook sizes",
                   "<= " + real(spread_max), range, range <= spread_max),
  };
}

void verdicts_state_cond(ExperimentReport& r) {
  const MetricTrace& t = r.cell("outcomes");
  const std::vector<Scalar> mc = t.column("bandit_mse_conditioned");
  const std::vector<Scalar> mb = t.column("bandit_mse_blinded");
  const std::vector<Scalar> sc = t.column("maze_success_conditioned");
  const std::vector<Scalar> sb = t.column("maze_success_blinded");
  const Scalar ratio_min = config_real(r, "threshold.mse_ratio");
  Scalar worst_ratio = kInf, worst_margin = kInf;
  for (std::size_t i = 0; i < mc.size(); ++i) {
    worst_ratio = std::min(worst_ratio, mb[i] / mc[i]);
    worst_margin = std::min(worst_margin, sc[i] - sb[i]);
  }
  if (mc.empty()) worst_ratio = worst_margin = kNaN;
  r.summary["bandit_mse_conditioned.mean"] = mean_of(mc);
  r.summary["bandit_mse_blinded.mean"] = mean_of(mb);
  r.summary["maze_success_conditioned.mean"] = mean_of(sc);
  r.summary["maze_success_blinded.mean"] = mean_of(sb);
  r.summary["control_mse_conditioned.mean"] = mean_of(t.column("control_mse_conditioned"));
  r.summary["control_mse_blinded.mean"] = mean_of(t.column("control_mse_blinded"));
  r.verdicts = {
      make_verdict("bandit_mse_ratio", "a state-blind codebook cannot separate a = +s from a = -s (min over seeds)",
                   ">= " + real(ratio_min), worst_ratio, worst_ratio >= ratio_min),
      make_verdict("maze_success_margin", "conditioning codes on the state improves downstream control (min over seeds)",
                   "> 0", worst_margin, worst_margin > 0.0),
  };
}

void verdicts_constraint_sweep(ExperimentReport& r) {
  const MetricTrace& t = r.cell("outcomes");
  const std::vector<Scalar> alpha = t.column("alpha");
  const std::vector<Scalar> success = t.column("success");
  std::map<Scalar, std::vector<Scalar>> by_alpha;
  for (std::size_t i = 0; i < alpha.size(); ++i) by_alpha[alpha[i]].push_back(success[i]);
  Scalar smallest = kNaN, best = -kInf;
  for (const auto& [a, v] : by_alpha) {
    const Scalar m = mean_of(v);
    r.summary["success.alpha=" + real(a) + ".mean"] = m;
    r.summary["success.alpha=" + real(a) + ".std"] = std_of(v);
    if (a <= 0.0) continue;
    if (std::isnan(smallest)) smallest = m;
    best = std::max(best, m);
  }
  r.verdicts = {make_verdict("smallest_alpha_vs_best",
                             "too little conservatism is no better than the best constraint level (best - smallest)",
                             ">= 0", best - smallest, best >= smallest)};
}

void verdicts_identities(ExperimentReport& r) {
  const Scalar tol = config_real(r, "threshold.identity");
  const Scalar z_max = config_real(r, "threshold.z");
  const MetricTrace& eq = r.cell("nll_identity");
  const std::vector<Scalar> gaps = eq.column("gap");
  const Scalar max_gap = gaps.empty() ? kNaN : *std::max_element(gaps.begin(), gaps.end());

  const MetricTrace& kl = r.cell("kl_properties");
  const std::vector<Scalar> kpq = kl.column("kl_pq");
  const std::vector<Scalar> kpp = kl.column("kl_pp");
  const std::vector<Scalar> tv = kl.column("tv");
  Scalar min_kl = kInf, max_self = 0.0, min_distinct = kInf;
  for (std::size_t i = 0; i < kpq.size(); ++i) {
    min_kl = std::min(min_kl, kpq[i]);
    max_self = std::max(max_self, kpp[i]);
    if (tv[i] > 0.0) min_distinct = std::min(min_distinct, kpq[i]);
  }

  auto max_abs = [](const std::vector<Scalar>& v) {
    Scalar m = 0.0;
    for (Scalar x : v) m = std::max(m, std::abs(x));
    return v.empty() ? kNaN : m;
  };
  const Scalar kl_z = max_abs(r.cell("kl_monte_carlo").column("z"));
  const Scalar brac_z = max_abs(r.cell("brac_monte_carlo").column("z"));
  const Scalar norm_err = max_abs(r.cell("closed_form").column("sum_error"));
  const Scalar min_prob = [&] {
    const std::vector<Scalar> v = r.cell("closed_form").column("min_prob");
    return v.empty() ? kNaN : *std::min_element(v.begin(), v.end());
  }();

  r.summary["nll_identity.instances"] = static_cast<Scalar>(gaps.size());
  r.summary["kl_monte_carlo.instances"] = static_cast<Scalar>(r.cell("kl_monte_carlo").rows());
  r.verdicts = {
      make_verdict("penalty_equals_nll", "the exact discrete conservatism penalty is the behavior-cloning NLL",
                   "< " + real(tol), max_gap, max_gap < tol),
      make_verdict("kl_non_negative", "KL divergence is never negative", ">= 0", min_kl, min_kl >= 0.0),
      make_verdict("kl_self_zero", "KL(p || p) vanishes", "<= " + real(tol), max_self, max_self <= tol),
      make_verdict("kl_distinct_positive", "KL of distinct distributions is positive", "> " + real(tol),
                   min_distinct, min_distinct > tol),
      make_verdict("kl_monte_carlo_z", "exact KL agrees with a sampling estimate (max |z|)", "<= " + real(z_max),
                   kl_z, kl_z <= z_max),
      make_verdict("brac_target_monte_carlo_z",
                   "exact expected backup target agrees with a sampling estimate (max |z|)", "<= " + real(z_max),
                   brac_z, brac_z <= z_max),
      make_verdict("closed_form_normalized", "closed-form policies sum to one", "<= " + real(tol), norm_err,
                   norm_err <= tol),
      make_verdict("closed_form_non_negative", "closed-form policies are non-negative", ">= 0", min_prob,
                   min_prob >= 0.0),
  };
}

}  // namespace

void recompute_verdicts(ExperimentReport& report) {
  report.summary.clear();
  report.verdicts.clear();
  if (report.id == "penalty-gap") verdicts_penalty_gap(report);
  else if (report.id == "iql-oracle") verdicts_iql_oracle(report);
  else if (report.id == "codebook") verdicts_codebook(report);
  else if (report.id == "state-cond") verdicts_state_cond(report);
  else if (report.id == "constraint-sweep") verdicts_constraint_sweep(report);
  else if (report.id == "identities") verdicts_identities(report);
  else throw std::invalid_argument("unknown experiment '" + report.id + "'");
}

// -------------------------------------------------------------- experiments

ExperimentReport run_penalty_gap_diagnostic(const std::vector<std::uint64_t>& seeds,
                                            const DiagnosticSettings& settings, PipelineCache* cache) {
  if (seeds.size() < 3) throw std::invalid_argument("penalty-gap needs at least 3 seeds");
  ExperimentReport r;
  r.id = "penalty-gap";
  add_settings(r.config, settings);
  add_continuous_settings(r.config, settings.continuous);
  r.config["seeds"] = seed_list(seeds);
  r.config["threshold.saq_success"] = "0.9";
  r.config["threshold.continuous_success"] = "0.5";
  r.config["threshold.monotone_fraction"] = "0.95";
  r.config["gap.early_fraction"] = "0.1";

  const Index n = static_cast<Index>(seeds.size());
  std::vector<PipelineRun> saq(static_cast<std::size_t>(n));
  std::vector<ContinuousTrainResult> cont(static_cast<std::size_t>(n));
  std::vector<Scalar> cont_success(static_cast<std::size_t>(n));
  parallel_for(2 * n, settings.threads, [&](Index cell) {
    const auto i = static_cast<std::size_t>(cell % n);
    if (cell < n) {
      saq[i] = run_saq_pipeline(settings, seeds[i], cache);
      return;
    }
    ContinuousConfig cc = settings.continuous;
    cc.seed = derive_seed(seeds[i], "continuous");
    cont[i] = train_continuous_cql(maze_demonstrations(settings, seeds[i]), cc);
    cont_success[i] = evaluate_continuous_agent(cont[i].agent, settings.maze, settings.eval_episodes,
                                                settings.eval_seed).success_rate;
  });

  MetricTrace outcomes({"seed", "saq_success", "continuous_success"});
  for (Index i = 0; i < n; ++i) {
    const auto u = static_cast<std::size_t>(i);
    outcomes.add_row(i, {static_cast<Scalar>(seeds[u]), saq[u].success_rate, cont_success[u]});
  }
  r.cells.emplace_back("outcomes", outcomes);
  for (Index i = 0; i < n; ++i) {
    const auto u = static_cast<std::size_t>(i);
    r.cells.emplace_back("saq-seed" + std::to_string(seeds[u]), saq[u].agent_trace);
    r.cells.emplace_back("continuous-seed" + std::to_string(seeds[u]), cont[u].trace);
  }
  recompute_verdicts(r);
  return r;
}

ExperimentReport run_iql_oracle_check(Index n_instances, Index k_max, std::uint64_t seed) {
  if (n_instances < 100) throw std::invalid_argument("iql-oracle needs at least 100 instances");
  if (k_max < 2) throw std::invalid_argument("iql-oracle needs k_max >= 2");
  ExperimentReport r;
  r.id = "iql-oracle";
  const MirrorDescentOptions opt;
  r.config["instances"] = std::to_string(n_instances);
  r.config["k_max"] = std::to_string(k_max);
  r.config["seed"] = std::to_string(seed);
  r.config["oracle.step"] = real(opt.step);
  r.config["oracle.iterations"] = std::to_string(opt.iterations);
  r.config["oracle.max_iterations"] = std::to_string(opt.max_iterations);
  r.config["oracle.kl_tolerance"] = "1e-06";
  r.config["threshold.tv"] = "0.001";
  r.config["threshold.objective"] = "0.0001";
  r.config["threshold.kl"] = "1e-06";

  Rng rng(derive_seed(seed, "iql-oracle"));
  MetricTrace t({"kind", "k", "epsilon", "multiplier", "tv_gap", "objective_gap", "kl_excess", "converged"});
  // kind 0: random budget; 1: zero budget; 2: unbounded budget.
  for (Index i = 0; i < n_instances + 2; ++i) {
    const Index kind = i < n_instances ? 0 : i - n_instances + 1;
    const Index k = 2 + rng.uniform_index(k_max - 1);
    Vector adv(k);
    for (Index j = 0; j < k; ++j) adv(j) = rng.normal();
    const Vector beta = random_distribution(rng, k, 1.0);
    Scalar eps;
    if (kind == 1) {
      eps = 0.0;
    } else if (kind == 2) {
      eps = kInf;
    } else {
      eps = rng.uniform(0.1, 0.6) * -std::log(beta(argmax(adv)));
    }
    const KlConstrainedSolution sol = solve_kl_constrained(adv, beta, eps, opt, 1e-6);
    Scalar lambda = sol.multiplier;
    if (kind == 1) lambda = 1e12;
    if (lambda == 0.0) lambda = 1e-9;
    const Vector closed = iql_closed_form_policy(adv, beta, lambda);
    const Scalar obj_gap = std::abs(closed.dot(adv) - sol.objective);
    const Scalar excess = std::isinf(eps) ? -kInf : sol.kl - eps;
    t.add_row(i, {static_cast<Scalar>(kind), static_cast<Scalar>(k), eps, sol.multiplier,
                  total_variation(closed, sol.policy), obj_gap, excess, sol.converged ? 1.0 : 0.0});
  }
  r.cells.emplace_back("instances", t);
  recompute_verdicts(r);
  return r;
}

ExperimentReport run_codebook_ablation(const std::vector<Index>& codebook_sizes,
                                       const std::vector<std::uint64_t>& seeds, const DiagnosticSettings& settings,
                                       PipelineCache* cache) {
  if (seeds.size() < 3) throw std::invalid_argument("codebook ablation needs at least 3 seeds");
  if (codebook_sizes.empty()) throw std::invalid_argument("codebook ablation needs codebook sizes");
  ExperimentReport r;
  r.id = "codebook";
  add_settings(r.config, settings);
  r.config["seeds"] = seed_list(seeds);
  r.config["codebook_sizes"] = index_list(codebook_sizes);
  r.config["ablation.k_min"] = "8";
  r.config["threshold.spread"] = "0.15";

  const Index nk = static_cast<Index>(codebook_sizes.size()), ns = static_cast<Index>(seeds.size());
  std::vector<PipelineRun> runs(static_cast<std::size_t>(nk * ns));
  parallel_for(nk * ns, settings.threads, [&](Index cell) {
    DiagnosticSettings s = settings;
    s.quantizer.codebook_size = codebook_sizes[static_cast<std::size_t>(cell / ns)];
    runs[static_cast<std::size_t>(cell)] = run_saq_pipeline(s, seeds[static_cast<std::size_t>(cell % ns)], cache);
  });
  MetricTrace outcomes({"codebook_size", "seed", "success", "live_codes", "reconstruction_mse"});
  for (Index c = 0; c < nk * ns; ++c) {
    const PipelineRun& run = runs[static_cast<std::size_t>(c)];
    outcomes.add_row(c, {static_cast<Scalar>(codebook_sizes[static_cast<std::size_t>(c / ns)]),
                         static_cast<Scalar>(seeds[static_cast<std::size_t>(c % ns)]), run.success_rate,
                         static_cast<Scalar>(run.live_codes), run.reconstruction_mse});
  }
  r.cells.emplace_back("outcomes", outcomes);
  for (Index c = 0; c < nk * ns; ++c) {
    r.cells.emplace_back("k" + std::to_string(codebook_sizes[static_cast<std::size_t>(c / ns)]) + "-seed" +
                             std::to_string(seeds[static_cast<std::size_t>(c % ns)]),
                         runs[static_cast<std::size_t>(c)].agent_trace);
  }
  recompute_verdicts(r);
  return r;
}

ExperimentReport run_state_conditioning_ablation(const std::vector<std::uint64_t>& seeds,
                                                 const DiagnosticSettings& settings, PipelineCache* cache) {
  if (seeds.size() < 3) throw std::invalid_argument("state-conditioning ablation needs at least 3 seeds");
  ExperimentReport r;
  r.id = "state-cond";
  add_settings(r.config, settings);
  r.config["seeds"] = seed_list(seeds);
  r.config["bandit.samples"] = std::to_string(settings.bandit_samples);
  r.config["bandit.noise"] = real(settings.bandit_noise);
  r.config["bandit.codebook_size"] = std::to_string(settings.bandit_codebook);
  r.config["threshold.mse_ratio"] = "5";

  const Index ns = static_cast<Index>(seeds.size());
  // Per seed: bimodal conditioned/blinded, control conditioned/blinded, maze conditioned/blinded.
  std::vector<Scalar> mse(static_cast<std::size_t>(4 * ns));
  std::vector<PipelineRun> maze(static_cast<std::size_t>(2 * ns));
  parallel_for(6 * ns, settings.threads, [&](Index cell) {
    const Index s = cell % ns, arm = cell / ns;
    const std::uint64_t seed = seeds[static_cast<std::size_t>(s)];
    const bool conditioned = arm % 2 == 0;
    if (arm >= 4) {
      DiagnosticSettings ms = settings;
      ms.quantizer.state_conditioned = conditioned;
      maze[static_cast<std::size_t>((arm - 4) * ns + s)] = run_saq_pipeline(ms, seed, cache);
      return;
    }
    const TransitionDataset data =
        arm < 2 ? generate_bimodal_bandit(settings.bandit_samples, settings.bandit_noise, derive_seed(seed, "bandit"))
                : generate_unimodal_bandit(settings.bandit_samples, 0.0, derive_seed(seed, "bandit-control"));
    QuantizerTrainConfig qc = settings.quantizer;
    qc.codebook_size = settings.bandit_codebook;
    qc.state_conditioned = conditioned;
    qc.seed = derive_seed(seed, "bandit-quantizer");
    const QuantizerTrainResult q = train_quantizer(data, qc);
    mse[static_cast<std::size_t>(arm * ns + s)] = reconstruction_mse(q.model, data);
  });

  MetricTrace outcomes({"seed", "bandit_mse_conditioned", "bandit_mse_blinded", "control_mse_conditioned",
                        "control_mse_blinded", "maze_success_conditioned", "maze_success_blinded"});
  for (Index s = 0; s < ns; ++s) {
    auto at = [&](Index arm) { return mse[static_cast<std::size_t>(arm * ns + s)]; };
    outcomes.add_row(s, {static_cast<Scalar>(seeds[static_cast<std::size_t>(s)]), at(0), at(1), at(2), at(3),
                         maze[static_cast<std::size_t>(s)].success_rate,
                         maze[static_cast<std::size_t>(ns + s)].success_rate});
  }
  r.cells.emplace_back("outcomes", outcomes);
  for (Index s = 0; s < ns; ++s) {
    const std::string tag = std::to_string(seeds[static_cast<std::size_t>(s)]);
    r.cells.emplace_back("maze-conditioned-seed" + tag, maze[static_cast<std::size_t>(s)].agent_trace);
    r.cells.emplace_back("maze-blinded-seed" + tag, maze[static_cast<std::size_t>(ns + s)].agent_trace);
  }
  recompute_verdicts(r);
  return r;
}

ExperimentReport run_constraint_sweep(const std::vector<Scalar>& alphas, const std::vector<std::uint64_t>& seeds,
                                      const DiagnosticSettings& settings, PipelineCache* cache) {
  if (seeds.size() < 3) throw std::invalid_argument("constraint sweep needs at least 3 seeds");
  std::vector<Scalar> positive;
  for (Scalar a : alphas) {
    if (a < 0.0) throw std::invalid_argument("constraint sweep: alpha must be non-negative");
    if (a > 0.0) positive.push_back(a);
  }
  if (positive.size() < 3) throw std::invalid_argument("constraint sweep needs at least 3 positive alpha values");
  const auto [lo, hi] = std::minmax_element(positive.begin(), positive.end());
  if (*hi / *lo < 100.0) throw std::invalid_argument("constraint sweep must span two orders of magnitude");

  ExperimentReport r;
  r.id = "constraint-sweep";
  add_settings(r.config, settings);
  r.config["seeds"] = seed_list(seeds);
  std::string list;
  for (std::size_t i = 0; i < alphas.size(); ++i) list += (i ? "," : "") + real(alphas[i]);
  r.config["alphas"] = list;

  const Index na = static_cast<Index>(alphas.size()), ns = static_cast<Index>(seeds.size());
  std::vector<PipelineRun> runs(static_cast<std::size_t>(na * ns));
  parallel_for(na * ns, settings.threads, [&](Index cell) {
    DiagnosticSettings s = settings;
    s.agent.cql_alpha = alphas[static_cast<std::size_t>(cell / ns)];
    runs[static_cast<std::size_t>(cell)] = run_saq_pipeline(s, seeds[static_cast<std::size_t>(cell % ns)], cache);
  });
  MetricTrace outcomes({"alpha", "seed", "success"});
  for (Index c = 0; c < na * ns; ++c) {
    outcomes.add_row(c, {alphas[static_cast<std::size_t>(c / ns)], static_cast<Scalar>(seeds[static_cast<std::size_t>(c % ns)]),
                         runs[static_cast<std::size_t>(c)].success_rate});
  }
  r.cells.emplace_back("outcomes", outcomes);
  for (Index c = 0; c < na * ns; ++c) {
    r.cells.emplace_back("alpha" + real(alphas[static_cast<std::size_t>(c / ns)]) + "-seed" +
                             std::to_string(seeds[static_cast<std::size_t>(c % ns)]),
                         runs[static_cast<std::size_t>(c)].agent_trace);
  }
  recompute_verdicts(r);
  return r;
}

ExperimentReport run_identity_suite(std::uint64_t seed, Index instances, Index mc_instances, Index mc_samples) {
  if (instances <= 0 || mc_instances <= 0 || mc_samples <= 1) throw std::invalid_argument("identity suite sizes");
  ExperimentReport r;
  r.id = "identities";
  r.config["seed"] = std::to_string(seed);
  r.config["instances"] = std::to_string(instances);
  r.config["mc_instances"] = std::to_string(mc_instances);
  r.config["mc_samples"] = std::to_string(mc_samples);
  r.config["threshold.identity"] = "1e-12";
  r.config["threshold.z"] = "3";

  {
    Rng rng(derive_seed(seed, "identity-nll"));
    MetricTrace t({"k", "batch", "penalty", "nll", "gap"});
    for (Index i = 0; i < instances; ++i) {
      const Index k = 1 + rng.uniform_index(128);
      const Index b = 1 + rng.uniform_index(64);
      const Scalar spread = log_uniform(rng, 0.1, 10.0);
      const Matrix q = rng.normal_matrix(b, k, spread);
      IndexVector codes(static_cast<std::size_t>(b));
      for (auto& c : codes) c = rng.uniform_index(k);
      const Scalar pen = cql_penalty_exact(q, codes), nll = softmax_nll(q, codes);
      t.add_row(i, {static_cast<Scalar>(k), static_cast<Scalar>(b), pen, nll, std::abs(pen - nll)});
    }
    r.cells.emplace_back("nll_identity", std::move(t));
  }
  {
    Rng rng(derive_seed(seed, "identity-kl"));
    MetricTrace t({"k", "kl_pq", "kl_pp", "tv"});
    for (Index i = 0; i < instances; ++i) {
      const Index k = 2 + rng.uniform_index(31);
      const Vector p = random_distribution(rng, k, log_uniform(rng, 0.1, 3.0));
      const Vector q = random_distribution(rng, k, log_uniform(rng, 0.1, 3.0));
      t.add_row(i, {static_cast<Scalar>(k), exact_kl(p, q), exact_kl(p, p), total_variation(p, q)});
    }
    r.cells.emplace_back("kl_properties", std::move(t));
  }
  auto monte_carlo = [&](const char* stream, auto&& instance) {
    Rng rng(derive_seed(seed, stream));
    MetricTrace t({"k", "exact", "estimate", "std_error", "z"});
    for (Index i = 0; i < mc_instances; ++i) {
      const Index k = 2 + rng.uniform_index(31);
      Vector p, f;
      Scalar exact;
      instance(rng, k, p, f, exact);
      Scalar sum = 0.0, sq = 0.0;
      for (Index s = 0; s < mc_samples; ++s) {
        const Scalar v = f(rng.categorical(p));
        sum += v;
        sq += v * v;
      }
      const Scalar n = static_cast<Scalar>(mc_samples);
      const Scalar est = sum / n;
      const Scalar var = std::max(0.0, (sq - n * est * est) / (n - 1.0));
      const Scalar se = std::sqrt(var / n);
      t.add_row(i, {static_cast<Scalar>(k), exact, est, se, se > 0.0 ? (est - exact) / se : 0.0});
    }
    return t;
  };
  r.cells.emplace_back("kl_monte_carlo", monte_carlo("identity-kl-mc", [](Rng& rng, Index k, Vector& p, Vector& f,
                                                                          Scalar& exact) {
    p = random_distribution(rng, k, log_uniform(rng, 0.1, 3.0));
    const Vector q = random_distribution(rng, k, log_uniform(rng, 0.1, 3.0));
    f = p.array().log() - q.array().log();
    exact = exact_kl(p, q);
  }));
  r.cells.emplace_back("brac_monte_carlo", monte_carlo("identity-brac-mc", [](Rng& rng, Index k, Vector& p, Vector& f,
                                                                              Scalar& exact) {
    p = random_distribution(rng, k, log_uniform(rng, 0.1, 3.0));
    const Vector behavior = random_distribution(rng, k, log_uniform(rng, 0.1, 3.0));
    Vector target_q(k);
    for (Index j = 0; j < k; ++j) target_q(j) = rng.normal(0.0, 2.0);
    const Scalar beta = rng.uniform(0.0, 2.0);
    const Matrix row = brac_backup_targets(Matrix::Zero(1, 1), Matrix::Ones(1, 1), target_q.transpose(),
                                           p.transpose(), floored_log_softmax(behavior.array().log().matrix().transpose()),
                                           1.0, beta);
    f = target_q.array() + beta * behavior.array().log().max(kLogProbFloor);
    exact = row(0, 0);
  }));
  {
    Rng rng(derive_seed(seed, "identity-closed-form"));
    MetricTrace t({"k", "lambda", "sum_error", "min_prob"});
    for (Index i = 0; i < instances; ++i) {
      const Index k = 2 + rng.uniform_index(31);
      Vector adv(k);
      for (Index j = 0; j < k; ++j) adv(j) = rng.normal(0.0, 3.0);
      const Vector beta = random_distribution(rng, k, log_uniform(rng, 0.1, 3.0));
      const Scalar lambda = log_uniform(rng, 0.01, 100.0);
      const Vector pi = iql_closed_form_policy(adv, beta, lambda);
      t.add_row(i, {static_cast<Scalar>(k), lambda, std::abs(pi.sum() - 1.0), pi.minCoeff()});
    }
    r.cells.emplace_back("closed_form", std::move(t));
  }
  recompute_verdicts(r);
  return r;
}

}  // namespace saq
