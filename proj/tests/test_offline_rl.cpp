#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "saq/binio.hpp"
#include "saq/diagnostics.hpp"
#include "saq/offline_rl.hpp"

using namespace saq;

namespace {

IndexVector random_codes(Rng& rng, Index n, Index k) {
  IndexVector c(static_cast<std::size_t>(n));
  for (auto& x : c) x = rng.uniform_index(k);
  return c;
}

Vector random_simplex(Rng& rng, Index k) {
  Vector p = rng.uniform_matrix(k, 1, 0.05, 1.0);
  return p / p.sum();
}

Matrix col(std::initializer_list<Scalar> v) {
  Matrix m(static_cast<Index>(v.size()), 1);
  Index i = 0;
  for (Scalar x : v) m(i++, 0) = x;
  return m;
}

Parameter& last_weight(Mlp& net) { return net.params()[net.params().size() - 2]; }
Parameter& last_bias(Mlp& net) { return net.params()[net.params().size() - 1]; }

struct Fixture {
  TransitionDataset data = generate_demonstrations(MazeSpec::default_maze(), 2, 0.05, 5);
  QuantizerModel quantizer;
  DiscreteTransitionDataset coded;

  explicit Fixture(Index k = 6) {
    QuantizerTrainConfig qc;
    qc.codebook_size = k;
    qc.embedding_dim = 4;
    qc.hidden = {16};
    Rng rng(3);
    quantizer = QuantizerModel(2, 2, qc, rng);
    quantizer.set_state_normalizer(Normalizer::fit(data.states()));
    coded = quantize_dataset(data, quantizer);
  }

  AlgoConfig config(Algorithm a, Index steps) const {
    AlgoConfig c;
    c.algorithm = a;
    c.hidden = {16, 16};
    c.batch_size = 16;
    c.gradient_steps = steps;
    c.target_update_period = 10;
    c.seed = 9;
    return c;
  }
};

}  // namespace

TEST_CASE("cql penalty values") {
  Tape t;
  for (Scalar c : {-3.0, 0.0, 7.5}) {
    const Matrix q = Matrix::Constant(3, 4, c);
    const CqlTerms terms = cql_loss(t.constant(q), {0, 1, 3}, Matrix::Zero(3, 1), 1.0);
    CHECK(terms.penalty.item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  }
  Matrix q = Matrix::Zero(2, 5);
  q(0, 2) = 30.0;
  q(1, 0) = 30.0;
  const Scalar p = cql_penalty_exact(q, {2, 0});
  CHECK(p > 0.0);
  CHECK(p < 1e-12);
  CHECK_THROWS_AS(cql_penalty_exact(q, {2, 5}), std::out_of_range);
  CHECK_THROWS_AS(cql_loss(t.constant(q), {2, 5}, Matrix::Zero(2, 1), 1.0), std::out_of_range);

  SUBCASE("total combines bellman and alpha times penalty") {
    Rng rng(1);
    const Matrix qv = rng.normal_matrix(6, 4);
    const IndexVector codes = random_codes(rng, 6, 4);
    const Matrix y = rng.normal_matrix(6, 1);
    const CqlTerms terms = cql_loss(t.constant(qv), codes, y, 2.5);
    Scalar bell = 0.0;
    for (Index i = 0; i < 6; ++i) bell += 0.5 * std::pow(qv(i, codes[static_cast<std::size_t>(i)]) - y(i, 0), 2) / 6.0;
    CHECK(terms.bellman.item() == doctest::Approx(bell).epsilon(1e-13));
    CHECK(terms.total.item() == doctest::Approx(bell + 2.5 * terms.penalty.item()).epsilon(1e-13));
  }
}

TEST_CASE("penalty equals the softmax negative log-likelihood") {
  {
    Matrix q(1, 2);
    q << 0.0, std::log(3.0);
    const CqlBcIdentity id = cql_bc_identity(q, {1});
    CHECK(id.penalty == doctest::Approx(-std::log(0.75)).epsilon(1e-14));
    CHECK(id.nll == doctest::Approx(0.287682).epsilon(1e-6));
  }
  CHECK(cql_bc_identity(Matrix::Constant(3, 1, 4.2), {0, 0, 0}).penalty == 0.0);

  Rng rng(2);
  for (int i = 0; i < 300; ++i) {
    const Index k = 1 + rng.uniform_index(128), n = 1 + rng.uniform_index(20);
    const Matrix q = rng.normal_matrix(n, k, 5.0);
    const IndexVector codes = random_codes(rng, n, k);
    const CqlBcIdentity id = cql_bc_identity(q, codes);
    CHECK(id.gap < 1e-12);
    // Independent NLL from explicit probabilities.
    Scalar nll = 0.0;
    for (Index r = 0; r < n; ++r) {
      const Scalar c = q(r, codes[static_cast<std::size_t>(r)]);
      Scalar z = 0.0;
      for (Index j = 0; j < k; ++j) z += std::exp(q(r, j) - c);
      nll += std::log(z) / static_cast<Scalar>(n);
    }
    CHECK(std::abs(id.penalty - nll) < 1e-12);
    Tape t;
    CHECK(std::abs(bc_loss(t.constant(q), codes).item() - id.penalty) < 1e-12);
  }
}

TEST_CASE("iql losses") {
  Tape t;
  CHECK(expectile_loss(2.0, 0.5) == 2.0);
  CHECK(expectile_loss(-1.0, 0.9) == doctest::Approx(0.1));
  CHECK(expectile_loss(1.0, 0.9) == doctest::Approx(0.9));
  // values V, target Q: u = Q - V.
  CHECK(iql_value_loss(t.constant(col({0.0})), col({2.0}), 0.5).item() == doctest::Approx(2.0));
  CHECK(iql_value_loss(t.constant(col({1.0})), col({0.0}), 0.9).item() == doctest::Approx(0.1));
  Rng rng(3);
  const Matrix v = rng.normal_matrix(10, 1), q = rng.normal_matrix(10, 1);
  CHECK(iql_value_loss(t.constant(v), q, 0.5).item() == doctest::Approx(0.5 * (q - v).squaredNorm() / 10.0));

  CHECK(iql_q_loss(t.constant(col({1.0})), col({1.0}), col({0.0}), col({5.0}), 0.99).item() == 0.0);
  const Matrix r = rng.normal_matrix(8, 1), qs = rng.normal_matrix(8, 1), nd = Matrix::Ones(8, 1);
  const Scalar plain = iql_q_loss(t.constant(qs), r, nd, Matrix::Zero(8, 1), 0.99).item();
  CHECK(plain == doctest::Approx((r - qs).squaredNorm() / 8.0));
  CHECK(iql_q_loss(t.constant(qs), r, nd, rng.normal_matrix(8, 1), 0.0).item() == doctest::Approx(plain));
}

TEST_CASE("iql closed-form policy") {
  const Vector p = iql_closed_form_policy(col({1.0, 0.0}), col({0.5, 0.5}), 1.0);
  CHECK(p(0) == doctest::Approx(0.731059).epsilon(1e-6));
  CHECK(p(1) == doctest::Approx(0.268941).epsilon(1e-6));
  CHECK(iql_closed_form_policy(col({1.0, 2.0, 0.0}), col({0.5, 0.0, 0.5}), 1.0)(1) == 0.0);
  CHECK_THROWS_AS(iql_closed_form_policy(col({1.0}), col({1.0}), 0.0), std::invalid_argument);

  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    const Index k = 2 + rng.uniform_index(10);
    const Vector a = rng.normal_matrix(k, 1), b = random_simplex(rng, k);
    CHECK(total_variation(iql_closed_form_policy(a, b, 1e6), b) < 1e-5);
  }
  SUBCASE("agrees with the KL-ball solver") {
    for (int i = 0; i < 30; ++i) {
      const Index k = 2 + rng.uniform_index(8);
      const Vector a = rng.normal_matrix(k, 1), b = random_simplex(rng, k);
      const Vector pi = iql_closed_form_policy(a, b, 0.7);
      const Scalar eps = exact_kl(pi, b);
      const KlConstrainedSolution s = solve_kl_constrained(a, b, eps);
      CHECK(s.converged);
      CHECK(total_variation(pi, s.policy) < 1e-3);
      CHECK(std::abs(pi.dot(a) - s.policy.dot(a)) < 1e-4);
      CHECK(s.kl <= eps + 1e-6);
    }
  }
}

TEST_CASE("brac losses") {
  Tape t;
  const Scalar gamma = 0.9, beta = 0.7;
  const Matrix half = Matrix::Constant(1, 2, 0.5), log_half = Matrix::Constant(1, 2, std::log(0.5));
  const Matrix y = brac_backup_targets(col({0.0}), col({1.0}), Matrix::Zero(1, 2), half, log_half, gamma, beta);
  CHECK(y(0, 0) == doctest::Approx(gamma * beta * std::log(0.5)).epsilon(1e-14));
  const Scalar loss = brac_q_loss(t.constant(col({0.3})), col({0.0}), col({1.0}), Matrix::Zero(1, 2), half, log_half,
                                  gamma, beta)
                          .item();
  CHECK(loss == doctest::Approx(std::pow(y(0, 0) - 0.3, 2)).epsilon(1e-14));

  Rng rng(5);
  SUBCASE("beta zero is the expected Bellman target") {
    const Matrix qn = rng.normal_matrix(4, 3), pi = Matrix::Constant(4, 3, 1.0 / 3.0);
    const Matrix r = rng.normal_matrix(4, 1), nd = col({1, 0, 1, 1});
    const Matrix y0 = brac_backup_targets(r, nd, qn, pi, rng.normal_matrix(4, 3), gamma, 0.0);
    const Matrix expected = r + gamma * nd.cwiseProduct(qn.rowwise().mean());
    CHECK((y0 - expected).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("exact expectation matches sampling") {
    for (int i = 0; i < 5; ++i) {
      const Index k = 3 + rng.uniform_index(6);
      const Vector pi = random_simplex(rng, k), qn = rng.normal_matrix(k, 1);
      const Vector lb = random_simplex(rng, k).array().log();
      const Matrix y = brac_backup_targets(col({0.0}), col({1.0}), qn.transpose(), pi.transpose(), lb.transpose(),
                                           1.0, beta);
      Scalar mc = 0.0;
      const int n = 100000;
      for (int s = 0; s < n; ++s) {
        const Index a = rng.categorical(pi);
        mc += (qn(a) + beta * lb(a)) / n;
      }
      CHECK(std::abs(mc - y(0, 0)) < 1e-2);
    }
  }
  SUBCASE("policy loss") {
    // Q = 0, uniform behavior, beta = 0: loss is minus the entropy term.
    const Matrix logits = rng.normal_matrix(1, 4);
    const Vector p = softmax(logits);
    const Scalar h = -(p.array() * p.array().log()).sum();
    const Scalar l = brac_policy_loss(t.constant(logits), Matrix::Zero(1, 4), Matrix::Constant(1, 4, -std::log(4.0)),
                                      0.0, 0.2)
                         .item();
    CHECK(l == doctest::Approx(-0.2 * h).epsilon(1e-13));
    const Scalar l_uniform = brac_policy_loss(t.constant(Matrix::Zero(1, 4)), Matrix::Zero(1, 4),
                                              Matrix::Constant(1, 4, -std::log(4.0)), 0.0, 0.2)
                                 .item();
    CHECK(l_uniform < l);

    // With alpha_ent = beta the regularizer is -beta KL(pi || pi_beta).
    for (int i = 0; i < 100; ++i) {
      const Index k = 2 + rng.uniform_index(10);
      const Matrix lg = rng.normal_matrix(1, k);
      const Vector pb = random_simplex(rng, k);
      const Scalar b = rng.uniform(0.1, 3.0);
      const Scalar v = brac_policy_loss(t.constant(lg), Matrix::Zero(1, k), pb.array().log().matrix().transpose(), b, b)
                           .item();
      CHECK(std::abs(v - b * exact_kl(softmax(lg), pb)) < 1e-12);
    }
  }
  SUBCASE("uniform policy is optimal when Q plus the behavior term is flat") {
    const Index k = 5;
    const Vector pb = random_simplex(rng, k);
    const Matrix lb = pb.array().log().matrix().transpose();
    const Matrix q = (2.0 - 0.5 * lb.array()).matrix();
    ParameterSet ps;
    ps.add("logits", rng.normal_matrix(1, k));
    for (int i = 0; i < 3000; ++i) {
      Tape tp;
      tp.backward(brac_policy_loss(tp.param(ps[0]), q, lb, 0.5, 0.1));
      adam_step(ps, 0.05);
    }
    const Vector p = softmax(ps[0].value);
    CHECK((p.array() - 1.0 / k).abs().maxCoeff() < 1e-3);
  }
}

TEST_CASE("exact kl") {
  Rng rng(6);
  const Vector p = random_simplex(rng, 5);
  CHECK(exact_kl(p, p) == 0.0);
  CHECK(exact_kl(col({1.0, 0.0}), col({0.5, 0.5})) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(std::isinf(exact_kl(col({0.5, 0.5}), col({1.0, 0.0}))));
  for (int i = 0; i < 5; ++i) {
    const Index k = 3 + rng.uniform_index(6);
    const Vector a = random_simplex(rng, k), b = random_simplex(rng, k);
    const int n = 100000;
    Scalar m = 0.0, m2 = 0.0;
    for (int s = 0; s < n; ++s) {
      const Index j = rng.categorical(a);
      const Scalar x = std::log(a(j)) - std::log(b(j));
      m += x / n;
      m2 += x * x / n;
    }
    const Scalar se = std::sqrt((m2 - m * m) / n);
    CHECK(std::abs(m - exact_kl(a, b)) < 3.0 * se + 1e-12);
  }
}

TEST_CASE("bc loss") {
  Tape t;
  CHECK(bc_loss(t.constant(Matrix::Zero(3, 8)), {0, 4, 7}).item() == doctest::Approx(std::log(8.0)).epsilon(1e-14));
  Matrix big = Matrix::Zero(2, 3);
  big(0, 1) = 50.0;
  big(1, 2) = 50.0;
  const Scalar l = bc_loss(t.constant(big), {1, 2}).item();
  CHECK(l >= 0.0);
  CHECK(l < 1e-20);
}

TEST_CASE("algorithm config") {
  CHECK(parse_algorithm("brac") == Algorithm::kBrac);
  CHECK(to_string(Algorithm::kIql) == "iql");
  CHECK_THROWS_AS(parse_algorithm("sac"), std::invalid_argument);
  AlgoConfig c;
  c.validate();
  c.discount = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = AlgoConfig{};
  c.iql_tau = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = AlgoConfig{};
  c.brac_beta = -1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("train_agent") {
  const Fixture f;
  SUBCASE("zero steps returns the initial agent with an empty trace") {
    const DiscreteTrainResult r = train_agent(f.coded, f.quantizer, f.config(Algorithm::kCql, 0));
    CHECK(r.trace.empty());
    CHECK(r.agent.codebook_size == 6);
    Rng rng(derive_seed(9, "agent-init"));
    const DiscreteAgent fresh = DiscreteAgent::create(2, 6, f.config(Algorithm::kCql, 0), rng);
    CHECK(fresh.q.params()[0].value == r.agent.q.params()[0].value);
  }
  SUBCASE("mismatched codebook size") {
    DiscreteTransitionDataset bad = f.coded;
    bad.codebook_size = 7;
    CHECK_THROWS_AS(train_agent(bad, f.quantizer, f.config(Algorithm::kCql, 5)), std::invalid_argument);
  }
  SUBCASE("every algorithm trains, logs and is deterministic") {
    for (Algorithm a : {Algorithm::kCql, Algorithm::kIql, Algorithm::kBrac, Algorithm::kBc}) {
      CAPTURE(to_string(a));
      AlgoConfig c = f.config(a, 60);
      c.eval_period = 30;
      const AgentEvaluator ev = [&](const DiscreteAgent& ag) {
        return evaluate_discrete_agent(ag, f.quantizer, MazeSpec::default_maze(), 2, 1);
      };
      const DiscreteTrainResult r1 = train_agent(f.coded, f.quantizer, c, ev);
      const DiscreteTrainResult r2 = train_agent(f.coded, f.quantizer, c, ev);
      CHECK(r1.trace == r2.trace);
      CHECK(r1.trace.rows() >= 6);
      CHECK(r1.agent.serialize() == r2.agent.serialize());
      const auto success = r1.trace.column("success_rate");
      CHECK(!std::isnan(success.back()));
      const Matrix probs = r1.agent.policy_probs(f.data.states().topRows(5));
      CHECK((probs.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
      CHECK(probs.minCoeff() >= 0.0);
      if (a == Algorithm::kCql) {
        const auto pb = r1.trace.column("penalty_batch");
        CHECK(std::isfinite(pb.back()));
      }
      if (a == Algorithm::kBrac) CHECK(std::isfinite(r1.trace.column("kl_dataset").back()));
    }
  }
  SUBCASE("agent files round-trip") {
    const DiscreteTrainResult r = train_agent(f.coded, f.quantizer, f.config(Algorithm::kIql, 20));
    const auto dir = testing::scratch_dir("agent");
    r.agent.save(dir / "a.saqa");
    const DiscreteAgent back = DiscreteAgent::load(dir / "a.saqa");
    CHECK(back.serialize() == r.agent.serialize());
    CHECK(back.policy_probs(f.data.states()) == r.agent.policy_probs(f.data.states()));
    std::vector<std::uint8_t> bytes = r.agent.serialize();
    bytes[bytes.size() / 2] ^= 0x10;
    CHECK_THROWS_AS(DiscreteAgent::deserialize(bytes), FormatError);
  }
}

TEST_CASE("act") {
  const Fixture f;
  Rng rng(9);
  DiscreteAgent agent = DiscreteAgent::create(2, 6, f.config(Algorithm::kCql, 0), rng);
  agent.state_norm = Normalizer::fit(f.data.states());
  const Vector s = f.data.states().row(3).transpose();

  SUBCASE("uniform policy picks code zero") {
    last_weight(agent.q).value.setZero();
    CHECK(select_code(agent, s, ActMode::kGreedy) == 0);
    CHECK(act(agent, f.quantizer, s, ActMode::kGreedy) == decode_action(f.quantizer, s, 0));
  }
  SUBCASE("one-hot policy") {
    last_weight(agent.q).value.setZero();
    last_bias(agent.q).value(0, 4) = 100.0;
    CHECK(act(agent, f.quantizer, s, ActMode::kGreedy) == decode_action(f.quantizer, s, 4));
    Rng r2(1);
    for (int i = 0; i < 20; ++i) CHECK(select_code(agent, s, ActMode::kSample, &r2) == 4);
  }
  SUBCASE("greedy action ignores a constant shift of Q and follows argmax Q") {
    for (Index i = 0; i < f.data.size(); i += 7) {
      const Vector si = f.data.states().row(i).transpose();
      const Index before = select_code(agent, si, ActMode::kGreedy);
      CHECK(before == argmax(agent.q.evaluate(agent.normalized(si.transpose())).row(0)));
      DiscreteAgent shifted = agent;
      last_bias(shifted.q).value.array() += 12.5;
      CHECK(select_code(shifted, si, ActMode::kGreedy) == before);
    }
  }
  SUBCASE("sampling follows the policy distribution") {
    const Vector p = agent.policy_probs(s.transpose()).row(0).transpose();
    Vector counts = Vector::Zero(6);
    Rng r2(2);
    const int n = 20000;
    for (int i = 0; i < n; ++i) counts(select_code(agent, s, ActMode::kSample, &r2)) += 1.0 / n;
    CHECK((counts - p).cwiseAbs().maxCoeff() < 0.02);
  }
}

TEST_CASE("iql policy uses the closed form on the trained networks") {
  const Fixture f;
  const DiscreteTrainResult r = train_agent(f.coded, f.quantizer, f.config(Algorithm::kIql, 30));
  const DiscreteAgent& ag = r.agent;
  const Matrix states = f.data.states().topRows(4);
  const Matrix x = ag.normalized(states);
  const Matrix q = ag.q_target.evaluate(x), v = ag.value->evaluate(x);
  const Matrix lb = ag.behavior_log_probs(states);
  const Matrix probs = ag.policy_probs(states);
  for (Index i = 0; i < 4; ++i) {
    const Vector adv = (q.row(i).array() - v(i, 0)).transpose();
    const Vector expected = iql_closed_form_policy_log(adv, lb.row(i).transpose(), ag.iql_lambda);
    CHECK((probs.row(i).transpose() - expected).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("behavior cloning on maze demonstrations" * doctest::timeout(900)) {
  DiagnosticSettings s;
  s.agent.algorithm = Algorithm::kBc;
  const PipelineRun run = run_saq_pipeline(s, 0);
  CHECK(run.success_rate >= 0.8);
}
