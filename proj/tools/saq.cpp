// saq: dataset generation, quantizer and agent training, evaluation and
// diagnostics from the command line.
//
// Exit codes: 0 success, 1 usage error, 2 data/model/IO error, 3 failed
// diagnostic verdict.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "saq/binio.hpp"
#include "saq/continuous.hpp"
#include "saq/dataset.hpp"
#include "saq/diagnostics.hpp"
#include "saq/envs.hpp"
#include "saq/offline_rl.hpp"
#include "saq/quantizer.hpp"
#include "saq/run_dir.hpp"

namespace fs = std::filesystem;
using namespace saq;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitVerdict = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
std::vector<T> parse_list(const std::string& s) {
  std::vector<T> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    if constexpr (std::is_same_v<T, Scalar>) {
      out.push_back(parse_real(item));
    } else {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size()) throw UsageError("bad list entry '" + item + "'");
      out.push_back(static_cast<T>(v));
    }
  }
  return out;
}

/// Values actually in effect for every option of `sub` (CLI, then config file, then default).
KeyValues resolved_options(const CLI::App& sub) {
  KeyValues kv;
  for (const CLI::Option* opt : sub.get_options()) {
    const auto& names = opt->get_lnames();
    if (names.empty()) continue;
    const std::string& name = names.front();
    if (name == "help" || name == "help-all" || name == "config" || name == "force") continue;
    const bool flag = opt->get_expected_max() == 0;
    std::string value;
    if (flag) {
      value = opt->count() > 0 && opt->as<bool>() ? "true" : "false";
    } else if (opt->count() > 0) {
      value = opt->results().back();
    } else {
      value = opt->get_default_str();
    }
    kv.emplace_back(name, value);
  }
  return kv;
}

fs::path default_run_dir(const std::string& command, std::uint64_t seed) {
  return run_root() / (command + "-seed" + std::to_string(seed));
}

MazeSpec load_maze(const std::string& path) {
  if (path.empty()) return MazeSpec::default_maze();
  const std::vector<std::uint8_t> bytes = read_file(path);
  return MazeSpec::parse(std::string(bytes.begin(), bytes.end()));
}

void print_eval(const EvalResult& r) {
  std::cout << "success_rate=" << format_real(r.success_rate) << "\nmean_return=" << format_real(r.mean_return)
            << "\nmean_length=" << format_real(r.mean_length) << "\n";
}

/// Options of each subcommand, bound to plain variables.
struct Options {
  // shared
  std::uint64_t seed = 0;
  std::string out;
  bool force = false;
  // gen-data
  std::string env = "maze";
  Index n = 3;
  Scalar noise = 0.05;
  std::string maze_file;
  // datasets and models
  std::string dataset, model, quantizer, agent;
  // quantizer
  QuantizerTrainConfig qc;
  bool blind = false;
  std::string q_hidden = "64,64";
  // agents
  std::string algo = "cql";
  AlgoConfig ac;
  ContinuousConfig cc;
  std::string hidden = "";
  Scalar lr = -1.0;
  Index batch = -1;
  Index steps = -1;
  Index episodes = 20;
  std::uint64_t eval_seed = 12345;
  // diagnose
  std::string experiment;
  std::string seeds = "0,1,2";
  Index threads = 1;
  std::string k_values = "8,16,32";
  std::string alphas = "0,0.01,1,10";
  Index instances = 100;
  Index k_max = 16;
  Index continuous_steps = -1;
};

void add_common(CLI::App* sub, Options& o, bool run_dir) {
  sub->add_option("--seed", o.seed, "Global seed");
  if (run_dir) {
    sub->add_option("--out", o.out, "Run directory (default: $SAQ_RUN_ROOT/<command>-seed<seed>)");
    sub->add_flag("--force", o.force, "Reuse a non-empty run directory");
  }
}

// ------------------------------------------------------------- commands

int cmd_gen_data(const Options& o) {
  TransitionDataset d;
  if (o.env == "maze") {
    d = generate_demonstrations(load_maze(o.maze_file), o.n, o.noise, o.seed);
  } else if (o.env == "bandit") {
    d = generate_bimodal_bandit(o.n, o.noise, o.seed);
  } else if (o.env == "bandit-unimodal") {
    d = generate_unimodal_bandit(o.n, o.noise, o.seed);
  } else {
    throw UsageError("unknown env '" + o.env + "' (maze, bandit, bandit-unimodal)");
  }
  save_dataset(d, o.out);
  std::cout << "wrote " << d.size() << " transitions to " << o.out << "\n";
  return kExitOk;
}

int cmd_train_quantizer(const Options& o, const CLI::App& sub) {
  const TransitionDataset d = load_dataset(o.dataset);
  QuantizerTrainConfig qc = o.qc;
  qc.seed = derive_seed(o.seed, "quantizer");
  qc.state_conditioned = !o.blind;
  qc.hidden = parse_list<Index>(o.q_hidden);
  qc.validate();
  RunDir run(o.out.empty() ? default_run_dir("train-quantizer", o.seed) : fs::path(o.out), o.force);
  run.write_config(resolved_options(sub));
  const QuantizerTrainResult r = train_quantizer(d, qc);
  r.model.save(run.file("quantizer.saqm"));
  run.add("quantizer.saqm");
  r.trace.write_csv(run.file("metrics.csv"));
  run.add("metrics.csv");
  run.write_manifest();
  std::cout << "reconstruction_mse=" << format_real(reconstruction_mse(r.model, d)) << "\nrun_dir=" << run.path().string()
            << "\n";
  return kExitOk;
}

int cmd_quantize(const Options& o) {
  const TransitionDataset d = load_dataset(o.dataset);
  const QuantizerModel m = QuantizerModel::load(o.model);
  const DiscreteTransitionDataset q = quantize_dataset(d, m);
  save_dataset(q, o.out);
  const CodebookUtilization u = codebook_utilization(q);
  std::cout << "wrote " << q.size() << " coded transitions to " << o.out << " (" << u.live_codes() << " of "
            << q.codebook_size << " codes used)\n";
  return kExitOk;
}

bool is_continuous_algo(const std::string& a) { return a == "cont-cql" || a == "cont-bc"; }

int cmd_train(const Options& o, const CLI::App& sub) {
  RunDir run(o.out.empty() ? default_run_dir("train-" + o.algo, o.seed) : fs::path(o.out), o.force);
  if (is_continuous_algo(o.algo)) {
    const TransitionDataset d = load_dataset(o.dataset);
    ContinuousConfig cc = o.cc;
    cc.seed = derive_seed(o.seed, "continuous");
    if (!o.hidden.empty()) cc.hidden = parse_list<Index>(o.hidden);
    if (o.lr > 0) cc.q_learning_rate = o.lr;
    if (o.batch > 0) cc.batch_size = o.batch;
    if (o.steps >= 0) cc.gradient_steps = o.steps;
    cc.validate();
    run.write_config(resolved_options(sub));
    ContinuousEvaluator ev;
    if (cc.eval_period > 0 && d.metadata().attributes.count("maze.layout")) {
      const MazeSpec maze = maze_from_metadata(d.metadata());
      ev = [maze, &o](const ContinuousAgent& a) { return evaluate_continuous_agent(a, maze, o.episodes, o.eval_seed); };
    }
    const ContinuousTrainResult r = o.algo == "cont-cql" ? train_continuous_cql(d, cc, ev) : train_continuous_bc(d, cc, ev);
    r.agent.save(run.file("agent.saqc"));
    run.add("agent.saqc");
    r.trace.write_csv(run.file("metrics.csv"));
    run.add("metrics.csv");
    run.write_manifest();
    std::cout << "run_dir=" << run.path().string() << "\n";
    return kExitOk;
  }

  AlgoConfig ac = o.ac;
  try {
    ac.algorithm = parse_algorithm(o.algo);
  } catch (const std::invalid_argument&) {
    throw UsageError("unknown algorithm '" + o.algo + "' (cql, iql, brac, bc, cont-cql, cont-bc)");
  }
  ac.seed = derive_seed(o.seed, "agent");
  if (!o.hidden.empty()) ac.hidden = parse_list<Index>(o.hidden);
  if (o.lr > 0) ac.q_learning_rate = ac.value_learning_rate = ac.policy_learning_rate = o.lr;
  if (o.batch > 0) ac.batch_size = o.batch;
  if (o.steps >= 0) ac.gradient_steps = o.steps;
  ac.validate();
  if (o.quantizer.empty()) throw UsageError("--quantizer is required for discrete algorithms");
  const QuantizerModel q = QuantizerModel::load(o.quantizer);
  const DiscreteTransitionDataset d = is_discrete_dataset_file(o.dataset) ? load_discrete_dataset(o.dataset)
                                                                          : quantize_dataset(load_dataset(o.dataset), q);
  run.write_config(resolved_options(sub));
  AgentEvaluator ev;
  if (ac.eval_period > 0 && d.source.metadata().attributes.count("maze.layout")) {
    const MazeSpec maze = maze_from_metadata(d.source.metadata());
    ev = [maze, &q, &o](const DiscreteAgent& a) { return evaluate_discrete_agent(a, q, maze, o.episodes, o.eval_seed); };
  }
  const DiscreteTrainResult r = train_agent(d, q, ac, ev);
  r.agent.save(run.file("agent.saqa"));
  run.add("agent.saqa");
  r.trace.write_csv(run.file("metrics.csv"));
  run.add("metrics.csv");
  run.write_manifest();
  std::cout << "run_dir=" << run.path().string() << "\n";
  return kExitOk;
}

int cmd_eval(const Options& o) {
  const MazeSpec maze = load_maze(o.maze_file);
  if (o.env != "maze") throw UsageError("eval supports --env maze only");
  const std::vector<std::uint8_t> bytes = read_file(o.agent);
  const std::string magic(bytes.begin(), bytes.begin() + std::min<std::size_t>(4, bytes.size()));
  if (magic == "SAQC") {
    print_eval(evaluate_continuous_agent(ContinuousAgent::deserialize(bytes), maze, o.episodes, o.seed));
    return kExitOk;
  }
  if (o.quantizer.empty()) throw UsageError("--quantizer is required for discrete agents");
  const DiscreteAgent a = DiscreteAgent::deserialize(bytes);
  const QuantizerModel q = QuantizerModel::load(o.quantizer);
  if (q.codebook_size() != a.codebook_size || q.state_dim() != a.state_dim) {
    throw std::invalid_argument("agent and quantizer disagree on codebook size or state dimension");
  }
  print_eval(evaluate_discrete_agent(a, q, maze, o.episodes, o.seed));
  return kExitOk;
}

int cmd_diagnose(const Options& o, const CLI::App& sub) {
  const std::vector<std::uint64_t> seeds = parse_list<std::uint64_t>(o.seeds);
  DiagnosticSettings s;
  s.maze = load_maze(o.maze_file);
  s.demo_noise = o.noise;
  s.threads = o.threads;
  s.eval_episodes = o.episodes;
  s.eval_seed = o.eval_seed;
  if (o.steps >= 0) s.agent.gradient_steps = o.steps;
  if (o.continuous_steps >= 0) s.continuous.gradient_steps = o.continuous_steps;

  ExperimentReport r;
  const std::string& e = o.experiment;
  if (e == "penalty-gap") {
    r = run_penalty_gap_diagnostic(seeds, s);
  } else if (e == "iql-oracle") {
    r = run_iql_oracle_check(o.instances, o.k_max, o.seed);
  } else if (e == "codebook") {
    r = run_codebook_ablation(parse_list<Index>(o.k_values), seeds, s);
  } else if (e == "state-cond") {
    r = run_state_conditioning_ablation(seeds, s);
  } else if (e == "constraint-sweep") {
    r = run_constraint_sweep(parse_list<Scalar>(o.alphas), seeds, s);
  } else if (e == "identities") {
    r = run_identity_suite(o.seed);
  } else {
    throw UsageError("unknown experiment '" + e +
                     "' (penalty-gap, iql-oracle, codebook, state-cond, constraint-sweep, identities)");
  }
  RunDir run(o.out.empty() ? default_run_dir("diagnose-" + e, o.seed) : fs::path(o.out), o.force);
  run.write_config(resolved_options(sub));
  r.write(run.path());
  run.add("report.json");
  run.add("summary.txt");
  for (const auto& [name, trace] : r.cells) run.add("cells/" + name + ".csv");
  r.cells.front().second.write_csv(run.file("metrics.csv"));
  run.add("metrics.csv");
  run.write_manifest();
  std::cout << r.summary_text() << "run_dir=" << run.path().string() << "\n";
  return r.passed() ? kExitOk : kExitVerdict;
}

/// Expands `--config FILE` into `--key=value` arguments placed before the
/// command-line ones, so explicit flags win.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string path;
    std::size_t consumed = 0;
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      consumed = 2;
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      consumed = 1;
    }
    if (consumed == 0) continue;
    const KeyValues kv = read_key_value_file(path);
    args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + consumed));
    if (args.empty()) throw UsageError("--config must follow a subcommand");
    std::vector<std::string> injected;
    for (const auto& [k, v] : kv) injected.push_back("--" + k + "=" + v);
    // After the subcommand name (first argument), before everything else.
    args.insert(args.begin() + 1, injected.begin(), injected.end());
    break;
  }
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"State-conditioned action quantization toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  Options o;
  std::string config_path;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate an offline dataset");
  add_common(gen, o, false);
  gen->add_option("--env", o.env, "maze | bandit | bandit-unimodal");
  gen->add_option("--n", o.n, "Trajectories (maze) or samples (bandit)");
  gen->add_option("--noise", o.noise, "Action noise standard deviation");
  gen->add_option("--maze", o.maze_file, "Maze layout file ('#' wall, '.' free, 'S', 'G')");
  gen->add_option("--out", o.out, "Output dataset file")->required();

  CLI::App* tq = app.add_subcommand("train-quantizer", "Train the action quantizer");
  add_common(tq, o, true);
  tq->add_option("--dataset", o.dataset, "Continuous dataset file")->required();
  tq->add_option("--K", o.qc.codebook_size, "Codebook size");
  tq->add_option("--D", o.qc.embedding_dim, "Embedding dimension");
  tq->add_option("--epochs", o.qc.epochs, "Training epochs");
  tq->add_option("--batch", o.qc.batch_size, "Batch size");
  tq->add_option("--lr", o.qc.learning_rate, "Learning rate");
  tq->add_option("--commitment", o.qc.commitment_weight, "Commitment weight");
  tq->add_option("--dead-code-period", o.qc.dead_code_period, "Epochs between dead-code reinitializations");
  tq->add_option("--hidden", o.q_hidden, "Hidden layer sizes, comma separated");
  tq->add_flag("--blind", o.blind, "Neither encoder nor decoder sees the state");

  CLI::App* qz = app.add_subcommand("quantize", "Replace dataset actions by codes");
  qz->add_option("--dataset", o.dataset, "Continuous dataset file")->required();
  qz->add_option("--model", o.model, "Quantizer model file")->required();
  qz->add_option("--out", o.out, "Output coded dataset file")->required();

  CLI::App* tr = app.add_subcommand("train", "Train an offline RL agent");
  add_common(tr, o, true);
  tr->add_option("--algo", o.algo, "cql | iql | brac | bc | cont-cql | cont-bc");
  tr->add_option("--dataset", o.dataset, "Dataset file (continuous or coded)")->required();
  tr->add_option("--quantizer", o.quantizer, "Quantizer model (discrete algorithms)");
  tr->add_option("--alpha", o.ac.cql_alpha, "CQL penalty weight");
  tr->add_option("--cont-alpha", o.cc.cql_alpha, "Continuous CQL penalty weight");
  tr->add_option("--tau", o.ac.iql_tau, "IQL expectile");
  tr->add_option("--lambda", o.ac.iql_lambda, "IQL temperature");
  tr->add_option("--beta", o.ac.brac_beta, "BRAC KL weight");
  tr->add_option("--entropy", o.ac.brac_entropy, "BRAC entropy weight");
  tr->add_option("--cont-entropy", o.cc.entropy_weight, "Continuous policy entropy weight");
  tr->add_option("--gamma", o.ac.discount, "Discount");
  tr->add_option("--cont-gamma", o.cc.discount, "Continuous discount");
  tr->add_option("--lr", o.lr, "Learning rate for all networks (default per algorithm)");
  tr->add_option("--batch", o.batch, "Batch size (default per algorithm)");
  tr->add_option("--steps", o.steps, "Gradient steps (default per algorithm)");
  tr->add_option("--hidden", o.hidden, "Hidden layer sizes, comma separated (default per algorithm)");
  tr->add_option("--target-period", o.ac.target_update_period, "Steps between target network copies");
  tr->add_flag("--exact-backup", o.ac.exact_backup, "CQL backup takes the exact expectation over codes");
  tr->add_option("--n-samples", o.cc.n_samples, "Samples per source in the continuous penalty estimate");
  tr->add_option("--grid", o.cc.grid_resolution, "Grid resolution of the exact continuous penalty");
  tr->add_option("--log-period", o.ac.log_period, "Steps between metric rows (discrete)");
  tr->add_option("--cont-log-period", o.cc.log_period, "Steps between metric rows (continuous)");
  tr->add_option("--eval-period", o.ac.eval_period, "Steps between evaluations, 0 for final only");
  tr->add_option("--cont-eval-period", o.cc.eval_period, "Steps between evaluations (continuous)");
  tr->add_option("--episodes", o.episodes, "Evaluation episodes");
  tr->add_option("--eval-seed", o.eval_seed, "Evaluation seed");

  CLI::App* ev = app.add_subcommand("eval", "Roll out a trained agent");
  ev->add_option("--agent", o.agent, "Agent file")->required();
  ev->add_option("--quantizer", o.quantizer, "Quantizer model (discrete agents)");
  ev->add_option("--env", o.env, "Environment (maze)");
  ev->add_option("--maze", o.maze_file, "Maze layout file");
  ev->add_option("--episodes", o.episodes, "Episodes");
  ev->add_option("--seed", o.seed, "Evaluation seed");

  CLI::App* dg = app.add_subcommand("diagnose", "Run a diagnostic experiment");
  add_common(dg, o, true);
  dg->add_option("experiment", o.experiment,
                 "penalty-gap | iql-oracle | codebook | state-cond | constraint-sweep | identities")
      ->required();
  dg->add_option("--seeds", o.seeds, "Comma-separated seeds");
  dg->add_option("--threads", o.threads, "Worker threads for independent cells");
  dg->add_option("--steps", o.steps, "Discrete agent gradient steps");
  dg->add_option("--continuous-steps", o.continuous_steps, "Continuous agent gradient steps");
  dg->add_option("--episodes", o.episodes, "Evaluation episodes");
  dg->add_option("--eval-seed", o.eval_seed, "Evaluation seed");
  dg->add_option("--noise", o.noise, "Demonstration action noise");
  dg->add_option("--maze", o.maze_file, "Maze layout file");
  dg->add_option("--k-values", o.k_values, "Codebook sizes for the codebook ablation");
  dg->add_option("--alphas", o.alphas, "Penalty weights for the constraint sweep");
  dg->add_option("--instances", o.instances, "Random instances for the oracle check");
  dg->add_option("--k-max", o.k_max, "Largest codebook size in the oracle check");

  for (CLI::App* sub : {gen, tq, tr, ev, dg}) {
    sub->add_option("--config", config_path, "key=value file; command-line flags take precedence");
  }

  std::vector<std::string> args;
  try {
    args = expand_config(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*tq) return cmd_train_quantizer(o, *tq);
    if (*qz) return cmd_quantize(o);
    if (*tr) return cmd_train(o, *tr);
    if (*ev) return cmd_eval(o);
    if (*dg) return cmd_diagnose(o, *dg);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
