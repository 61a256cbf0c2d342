#include <cmath>
#include <set>

#include "doctest.h"
#include "fixtures.hpp"
#include "saq/binio.hpp"
#include "saq/envs.hpp"
#include "saq/quantizer.hpp"

using namespace saq;
using testing::make_dataset;

namespace {

QuantizerTrainConfig small_config(Index k, std::uint64_t seed) {
  QuantizerTrainConfig c;
  c.codebook_size = k;
  c.embedding_dim = 4;
  c.hidden = {32, 32};
  c.seed = seed;
  return c;
}

/// Encoder whose embedding ignores the action (first-layer action rows zeroed).
void blind_encoder_to_action(QuantizerModel& m) {
  Matrix& w = m.encoder().params()[0].value;
  w.bottomRows(m.action_dim()).setZero();
}

Index brute_force_nearest(const Matrix& codebook, const RowVector& z) {
  Index best = 0;
  Scalar bd = INFINITY;
  for (Index j = 0; j < codebook.rows(); ++j) {
    Scalar d = 0;
    for (Index c = 0; c < z.size(); ++c) d += (codebook(j, c) - z(c)) * (codebook(j, c) - z(c));
    if (d < bd) {
      bd = d;
      best = j;
    }
  }
  return best;
}

const TransitionDataset& bimodal() {
  static const TransitionDataset d = generate_bimodal_bandit(4000, 0.01, 17);
  return d;
}

const QuantizerTrainResult& bimodal_conditioned() {
  static const QuantizerTrainResult r = [] {
    QuantizerTrainConfig c;
    c.codebook_size = 8;
    c.seed = 5;
    return train_quantizer(bimodal(), c);
  }();
  return r;
}

}  // namespace

TEST_CASE("nearest code") {
  Matrix cb(2, 2);
  cb << 0, 0, 10, 10;
  CHECK(nearest_code(RowVector::Constant(2, 1.0), cb) == 0);

  Rng rng(1);
  const Matrix cb5 = rng.normal_matrix(5, 3);
  CHECK(nearest_code(cb5.row(3), cb5) == 3);

  for (int i = 0; i < 200; ++i) {
    const Matrix codebook = rng.normal_matrix(32, 8);
    const RowVector z = rng.normal_matrix(1, 8);
    CHECK(nearest_code(z, codebook) == brute_force_nearest(codebook, z));
  }
}

TEST_CASE("quantizer loss terms") {
  Rng rng(2);
  SUBCASE("exact decoder output gives zero reconstruction") {
    QuantizerModel m(2, 2, small_config(8, 0), rng);
    blind_encoder_to_action(m);
    const Matrix s = rng.normal_matrix(6, 2);
    const IndexVector codes = m.quantize(s, Matrix::Zero(6, 2));
    const Matrix a = m.decode(s, codes);
    const QuantizerLossTerms t = quantizer_loss(m, s, a, 0.25);
    CHECK(t.reconstruction < 1e-28);
  }
  SUBCASE("unit distance between embedding and code") {
    QuantizerTrainConfig c = small_config(2, 0);
    c.embedding_dim = 2;
    QuantizerModel m(1, 1, c, rng);
    for (auto& p : m.encoder().params().params()) p.value.setZero();
    m.encoder().params().params().back().value << 1.0, 0.0;
    m.codebook() << 0, 0, 10, 10;
    const QuantizerLossTerms t = quantizer_loss(m, Matrix::Ones(1, 1), Matrix::Zero(1, 1), 1.0);
    CHECK(t.codebook == doctest::Approx(1.0));
    CHECK(t.commitment == doctest::Approx(1.0));
    CHECK(t.total == doctest::Approx(t.reconstruction + 2.0));
  }
  SUBCASE("one small step on a single sample lowers the loss") {
    int decreased = 0;
    for (int i = 0; i < 100; ++i) {
      QuantizerModel m(2, 2, small_config(8, 0), rng);
      const Matrix s = rng.normal_matrix(1, 2), a = rng.uniform_matrix(1, 2, -1, 1);
      const Scalar before = quantizer_loss(m, s, a, 0.25).total;
      {
        Tape t;
        t.backward(quantizer_loss_graph(m, t, s, a, 0.25).total);
      }
      quantizer_adam_step(m, 1e-6);
      decreased += quantizer_loss(m, s, a, 0.25).total < before;
    }
    CHECK(decreased == 100);
  }
}

TEST_CASE("posterior is one-hot at the euclidean argmin") {
  Rng rng(3);
  QuantizerModel m(2, 2, small_config(16, 0), rng);
  const Matrix s = rng.normal_matrix(50, 2), a = rng.uniform_matrix(50, 2, -1, 1);
  const Matrix z = m.encode(s, a);
  const IndexVector codes = m.quantize(s, a);
  for (Index i = 0; i < 50; ++i) CHECK(codes[static_cast<std::size_t>(i)] == brute_force_nearest(m.codebook(), z.row(i)));
}

TEST_CASE("straight-through gradient reaches the encoder unchanged") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    QuantizerModel m(2, 2, small_config(8, 0), rng);
    const Matrix s = rng.normal_matrix(5, 2), a = rng.uniform_matrix(5, 2, -1, 1);

    // Pass through the training graph with the commitment term switched off:
    // the encoder gradient is then the reconstruction gradient alone.
    m.encoder().params().zero_grad();
    {
      Tape t;
      t.backward(quantizer_loss_graph(m, t, s, a, 1e-300).total);
    }
    std::vector<Matrix> st;
    for (const auto& p : m.encoder().params().params()) st.push_back(p.grad);
    m.encoder().params().zero_grad();
    m.decoder().params().zero_grad();
    m.codebook_params().zero_grad();

    // Manual: gradient of the reconstruction w.r.t. the selected code vectors ...
    const IndexVector codes = m.quantize(s, a);
    Matrix e(5, m.embedding_dim());
    for (Index i = 0; i < 5; ++i) e.row(i) = m.codebook().row(codes[static_cast<std::size_t>(i)]);
    Matrix de;
    {
      Tape t;
      const Var ev = t.variable(e);
      const Var in = concat_cols(t.constant(m.state_normalizer().apply(s)), ev);
      de = t.backward(mse(m.decoder().forward(t, in), t.constant(a)))[ev];
    }
    m.decoder().params().zero_grad();
    // ... pulled back through the encoder.
    {
      Tape t;
      const Var z = m.encoder().forward(t, t.constant(m.encoder_input(s, a)));
      t.backward(sum(mul(z, t.constant(de))));
    }
    for (std::size_t k = 0; k < st.size(); ++k) {
      CHECK((st[k] - m.encoder().params()[k].grad).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("codebook and commitment terms pull toward each other") {
  Rng rng(5);
  auto distance = [](const QuantizerModel& m, const Matrix& s, const Matrix& a) {
    const Matrix z = m.encode(s, a);
    const IndexVector codes = m.quantize(s, a);
    Scalar d = 0;
    for (Index i = 0; i < z.rows(); ++i) d += (z.row(i) - m.codebook().row(codes[static_cast<std::size_t>(i)])).squaredNorm();
    return d;
  };
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix s = rng.normal_matrix(8, 2), a = rng.uniform_matrix(8, 2, -1, 1);
    for (bool codebook_term : {true, false}) {
      QuantizerModel m(2, 2, small_config(4, 0), rng);
      const Matrix enc_before = m.encoder().params()[0].value;
      const Matrix cb_before = m.codebook();
      const Scalar before = distance(m, s, a);
      {
        Tape t;
        const QuantizerLossGraph g = quantizer_loss_graph(m, t, s, a, 1.0);
        t.backward(codebook_term ? g.codebook : g.commitment);
      }
      quantizer_adam_step(m, 1e-4);
      CHECK(distance(m, s, a) < before);
      if (codebook_term) {
        CHECK(m.encoder().params()[0].value == enc_before);
      } else {
        CHECK(m.codebook() == cb_before);
      }
    }
  }
}

TEST_CASE("train_quantizer on a deterministic target") {
  Rng rng(6);
  const Matrix s = rng.uniform_matrix(1000, 2, -1, 1);
  Matrix a(1000, 2);
  a.col(0) = (s.col(0).array() * 1.5).tanh() * 0.8;
  a.col(1) = 0.5 * s.col(0).array() * s.col(1).array();
  const TransitionDataset d = make_dataset(s, a);
  QuantizerTrainConfig c;
  c.codebook_size = 8;
  const QuantizerTrainResult r = train_quantizer(d, c);
  CHECK(reconstruction_mse(r.model, d) < 1e-3);
  CHECK(r.trace.rows() == c.epochs);
}

TEST_CASE("train_quantizer on the bimodal bandit") {
  const QuantizerTrainResult& cond = bimodal_conditioned();
  const Scalar mse_cond = reconstruction_mse(cond.model, bimodal());
  CHECK(mse_cond <= 2e-4);

  QuantizerTrainConfig c;
  c.codebook_size = 8;
  c.seed = 5;
  c.state_conditioned = false;
  const QuantizerTrainResult blind = train_quantizer(bimodal(), c);
  CHECK(!blind.model.state_conditioned());
  CHECK(reconstruction_mse(blind.model, bimodal()) >= 5.0 * mse_cond);
}

TEST_CASE("train_quantizer rejects bad input") {
  QuantizerTrainConfig c;
  CHECK_THROWS_AS(train_quantizer(TransitionDataset(DatasetMetadata{"x", 2, 2, 0, {}}), c), std::invalid_argument);
  c.codebook_size = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("quantizer training is deterministic") {
  QuantizerTrainConfig c = small_config(8, 9);
  c.epochs = 10;
  const TransitionDataset d = generate_bimodal_bandit(300, 0.01, 2);
  const QuantizerTrainResult a = train_quantizer(d, c), b = train_quantizer(d, c);
  CHECK(a.model == b.model);
  CHECK(a.model.serialize() == b.model.serialize());
  CHECK(a.trace == b.trace);
}

TEST_CASE("quantize_dataset") {
  Rng rng(7);
  SUBCASE("single transition lands on its code") {
    QuantizerModel m(2, 2, small_config(8, 0), rng);
    const Matrix s = rng.normal_matrix(1, 2), a = rng.uniform_matrix(1, 2, -1, 1);
    m.codebook().row(5) = m.encode(s, a).row(0);
    const DiscreteTransitionDataset q = quantize_dataset(make_dataset(s, a), m);
    REQUIRE(q.codes.size() == 1);
    CHECK(q.codes[0] == 5);
  }
  SUBCASE("codes in range and reconstruction consistent") {
    const QuantizerTrainResult& r = bimodal_conditioned();
    const DiscreteTransitionDataset q = quantize_dataset(bimodal(), r.model);
    CHECK(q.codebook_size == 8);
    for (Index c : q.codes) CHECK((c >= 0 && c < 8));
    const Matrix dec = r.model.decode(Matrix(bimodal().states()), q.codes);
    const Scalar mse = (dec - Matrix(bimodal().actions())).array().square().mean();
    CHECK(mse == doctest::Approx(reconstruction_mse(r.model, bimodal())).epsilon(1e-12));
  }
}

TEST_CASE("decode_action") {
  const QuantizerTrainResult& r = bimodal_conditioned();
  Vector s(2);
  s << 0.6, -0.4;
  const Matrix all = r.model.decode_all(s);
  CHECK(all.rows() == 8);
  std::set<std::pair<long, long>> distinct;
  for (Index k = 0; k < 8; ++k) distinct.insert({std::lround(all(k, 0) * 100), std::lround(all(k, 1) * 100)});
  CHECK(distinct.size() >= 2);

  CHECK(decode_action(r.model, s, 3) == decode_action(r.model, s, 3));
  CHECK_THROWS_AS(decode_action(r.model, s, 8), std::out_of_range);

  // In-distribution: each dataset action is recovered within a few train RMSEs.
  const Scalar eps = 5.0 * std::sqrt(reconstruction_mse(r.model, bimodal())) * std::sqrt(2.0);
  const DiscreteTransitionDataset q = quantize_dataset(bimodal(), r.model);
  Index within = 0;
  for (Index i = 0; i < 200; ++i) {
    const Vector st = bimodal().states().row(i).transpose();
    const Vector at = bimodal().actions().row(i).transpose();
    within += (decode_action(r.model, st, q.codes[static_cast<std::size_t>(i)]) - at).norm() <= eps;
  }
  CHECK(within >= 196);
}

TEST_CASE("codebook_utilization") {
  Rng rng(8);
  const Matrix s = rng.normal_matrix(40, 2), a = rng.normal_matrix(40, 2);
  DiscreteTransitionDataset d{make_dataset(s, a), IndexVector(40, 0), 4};
  CodebookUtilization u = codebook_utilization(d);
  CHECK(u.histogram == std::vector<Index>{40, 0, 0, 0});
  CHECK(u.dead_codes == 3);
  for (Index i = 0; i < 40; ++i) d.codes[static_cast<std::size_t>(i)] = i % 4;
  u = codebook_utilization(d);
  CHECK(u.histogram == std::vector<Index>{10, 10, 10, 10});
  CHECK(u.dead_codes == 0);

  const DiscreteTransitionDataset q = quantize_dataset(bimodal(), bimodal_conditioned().model);
  CHECK(codebook_utilization(q).live_codes() >= 2);
}

TEST_CASE("quantizer model serialization") {
  const QuantizerTrainResult& r = bimodal_conditioned();
  const std::vector<std::uint8_t> bytes = r.model.serialize();
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "SAQM");
  const QuantizerModel back = QuantizerModel::deserialize(bytes);
  CHECK(back == r.model);
  CHECK(back.serialize() == bytes);

  const auto dir = testing::scratch_dir("quantizer");
  r.model.save(dir / "q.saqm");
  CHECK(QuantizerModel::load(dir / "q.saqm") == r.model);

  std::vector<std::uint8_t> truncated(bytes.begin(), bytes.end() - 9);
  CHECK_THROWS_AS(QuantizerModel::deserialize(truncated), FormatError);
  std::vector<std::uint8_t> flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  CHECK_THROWS_AS(QuantizerModel::deserialize(flipped), FormatError);
  std::vector<std::uint8_t> wrong = bytes;
  wrong[3] = 'X';
  CHECK_THROWS_AS(QuantizerModel::deserialize(wrong), FormatError);
}

TEST_CASE("model container framing") {
  ModelContainer c;
  c.magic = {'T', 'E', 'S', 'T'};
  c.dims = {1, 2, 3, 4};
  Matrix m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  c.blocks.push_back({"w", m});
  const auto bytes = c.encode();
  const ModelContainer back = ModelContainer::decode(bytes, "TEST");
  CHECK(back.dims == c.dims);
  CHECK(back.block("w") == m);
  CHECK(!back.has_block("v"));
  CHECK_THROWS_AS(ModelContainer::decode(bytes, "SAQM"), FormatError);
}

TEST_CASE("crc32 matches the standard check value") {
  const std::string s = "123456789";
  CHECK(crc32(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())) ==
        0xCBF43926u);
}
