#include "saq/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "saq/binio.hpp"
#include "saq/rng.hpp"

namespace saq {

IndexVector nearest_codes(const Matrix& embeddings, const Matrix& codebook) {
  if (embeddings.cols() != codebook.cols()) {
    throw std::invalid_argument("nearest_codes: embedding width " + std::to_string(embeddings.cols()) +
                                " != codebook width " + std::to_string(codebook.cols()));
  }
  IndexVector out(static_cast<std::size_t>(embeddings.rows()));
  for (Index i = 0; i < embeddings.rows(); ++i) {
    out[static_cast<std::size_t>(i)] = nearest_code(embeddings.row(i), codebook);
  }
  return out;
}

void QuantizerTrainConfig::validate() const {
  if (codebook_size < 2) throw std::invalid_argument("quantizer: codebook size must be >= 2");
  if (embedding_dim <= 0 || epochs <= 0 || batch_size <= 0 || dead_code_period <= 0) {
    throw std::invalid_argument("quantizer: sizes and periods must be positive");
  }
  if (!(learning_rate > 0.0) || !(commitment_weight > 0.0)) {
    throw std::invalid_argument("quantizer: learning rate and commitment weight must be positive");
  }
  for (Index h : hidden) {
    if (h <= 0) throw std::invalid_argument("quantizer: hidden widths must be positive");
  }
}

QuantizerModel::QuantizerModel(Index state_dim, Index action_dim, const QuantizerTrainConfig& config, Rng& rng)
    : state_dim_(state_dim),
      action_dim_(action_dim),
      state_conditioned_(config.state_conditioned),
      state_norm_(Normalizer::identity(state_dim)) {
  config.validate();
  if (state_dim <= 0 || action_dim <= 0) throw std::invalid_argument("quantizer: dimensions must be positive");
  const Index cond = state_conditioned_ ? state_dim : 0;
  std::vector<Index> enc{cond + action_dim};
  enc.insert(enc.end(), config.hidden.begin(), config.hidden.end());
  enc.push_back(config.embedding_dim);
  std::vector<Index> dec{cond + config.embedding_dim};
  dec.insert(dec.end(), config.hidden.begin(), config.hidden.end());
  dec.push_back(action_dim);
  encoder_ = Mlp("encoder", enc, Activation::kTanh, rng);
  decoder_ = Mlp("decoder", dec, Activation::kTanh, rng);
  codebook_.add("codebook", rng.normal_matrix(config.codebook_size, config.embedding_dim, 0.1));
}

void QuantizerModel::check_batch(const Matrix& states, const Matrix& actions) const {
  if (states.cols() != state_dim_ || actions.cols() != action_dim_ || states.rows() != actions.rows()) {
    throw std::invalid_argument("quantizer: batch shapes [" + std::to_string(states.rows()) + "x" +
                                std::to_string(states.cols()) + "], [" + std::to_string(actions.rows()) + "x" +
                                std::to_string(actions.cols()) + "] do not match model (state_dim " +
                                std::to_string(state_dim_) + ", action_dim " + std::to_string(action_dim_) + ")");
  }
}

Matrix QuantizerModel::encoder_input(const Matrix& states, const Matrix& actions) const {
  check_batch(states, actions);
  if (!state_conditioned_) return actions;
  Matrix x(states.rows(), state_dim_ + action_dim_);
  x << state_norm_.apply(states), actions;
  return x;
}

Matrix QuantizerModel::decoder_input(const Matrix& states, const Matrix& code_vectors) const {
  if (!state_conditioned_) return code_vectors;
  Matrix x(states.rows(), state_dim_ + code_vectors.cols());
  x << state_norm_.apply(states), code_vectors;
  return x;
}

Matrix QuantizerModel::encode(const Matrix& states, const Matrix& actions) const {
  return encoder_.evaluate(encoder_input(states, actions));
}

IndexVector QuantizerModel::quantize(const Matrix& states, const Matrix& actions) const {
  return nearest_codes(encode(states, actions), codebook());
}

Matrix QuantizerModel::decode(const Matrix& states, const IndexVector& codes) const {
  if (states.cols() != state_dim_ || states.rows() != static_cast<Index>(codes.size())) {
    throw std::invalid_argument("quantizer decode: state batch does not match codes");
  }
  Matrix vectors(states.rows(), embedding_dim());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] < 0 || codes[i] >= codebook_size()) {
      throw std::out_of_range("code " + std::to_string(codes[i]) + " outside [0, " +
                              std::to_string(codebook_size()) + ")");
    }
    vectors.row(static_cast<Index>(i)) = codebook().row(codes[i]);
  }
  return decoder_.evaluate(decoder_input(states, vectors));
}

Matrix QuantizerModel::decode_all(const Vector& state) const {
  const Index k = codebook_size();
  Matrix states = state.transpose().replicate(k, 1);
  return decoder_.evaluate(decoder_input(states, codebook()));
}

// --------------------------------------------------------- serialization

std::vector<std::uint8_t> QuantizerModel::serialize() const {
  ModelContainer c;
  c.magic = {'S', 'A', 'Q', 'M'};
  c.dims = {static_cast<std::uint32_t>(state_dim_), static_cast<std::uint32_t>(action_dim_),
            static_cast<std::uint32_t>(codebook_size()), static_cast<std::uint32_t>(embedding_dim())};
  c.blocks.push_back({"state_norm.mean", state_norm_.mean});
  c.blocks.push_back({"state_norm.scale", state_norm_.scale});
  for (const auto& p : encoder_.params().params()) c.blocks.push_back({p.name, p.value});
  for (const auto& p : decoder_.params().params()) c.blocks.push_back({p.name, p.value});
  c.blocks.push_back({"codebook", codebook()});
  return c.encode();
}

QuantizerModel QuantizerModel::deserialize(std::span<const std::uint8_t> bytes) {
  const ModelContainer c = ModelContainer::decode(bytes, "SAQM");
  QuantizerModel m;
  m.state_dim_ = c.dims[0];
  m.action_dim_ = c.dims[1];
  m.state_norm_ = {c.block("state_norm.mean"), c.block("state_norm.scale")};
  ParameterSet enc, dec;
  for (const auto& b : c.blocks) {
    if (b.name.starts_with("encoder.")) enc.add(b.name, b.value);
    if (b.name.starts_with("decoder.")) dec.add(b.name, b.value);
  }
  m.encoder_ = Mlp::from_parameters(std::move(enc), Activation::kTanh);
  m.decoder_ = Mlp::from_parameters(std::move(dec), Activation::kTanh);
  m.codebook_.add("codebook", c.block("codebook"));
  if (m.codebook_size() != c.dims[2] || m.embedding_dim() != c.dims[3]) {
    throw FormatError("codebook block disagrees with header dims", 6);
  }
  const Index enc_in = m.encoder_.input_dim();
  if (enc_in == m.state_dim_ + m.action_dim_) {
    m.state_conditioned_ = true;
  } else if (enc_in == m.action_dim_) {
    m.state_conditioned_ = false;
  } else {
    throw FormatError("encoder input width " + std::to_string(enc_in) + " matches neither layout", 6);
  }
  return m;
}

void QuantizerModel::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

QuantizerModel QuantizerModel::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

bool QuantizerModel::operator==(const QuantizerModel& o) const { return serialize() == o.serialize(); }

// ---------------------------------------------------------------- losses

QuantizerLossGraph quantizer_loss_graph(QuantizerModel& model, Tape& tape, const Matrix& states,
                                        const Matrix& actions, Scalar commitment_weight) {
  if (states.rows() == 0) throw std::invalid_argument("quantizer_loss: empty batch");
  QuantizerLossGraph g;
  g.embeddings = model.encoder().forward(tape, tape.constant(model.encoder_input(states, actions)));
  g.codes = nearest_codes(g.embeddings.value(), model.codebook());
  const Var selected = gather_rows(tape.param(model.codebook_params()[0]), g.codes);

  const Var straight_through = add(g.embeddings, stop_gradient(sub(selected, g.embeddings)));
  Var dec_in = straight_through;
  if (model.state_conditioned()) {
    dec_in = concat_cols(tape.constant(model.state_normalizer().apply(states)), straight_through);
  }
  const Var decoded = model.decoder().forward(tape, dec_in);

  g.reconstruction = mse(decoded, tape.constant(actions));
  g.codebook = mean(sqnorm_rows(sub(stop_gradient(g.embeddings), selected)));
  g.commitment = scale(mean(sqnorm_rows(sub(g.embeddings, stop_gradient(selected)))), commitment_weight);
  g.total = add(add(g.reconstruction, g.codebook), g.commitment);
  return g;
}

QuantizerLossTerms quantizer_loss(QuantizerModel& model, const Matrix& states, const Matrix& actions,
                                  Scalar commitment_weight) {
  Tape tape;
  const QuantizerLossGraph g = quantizer_loss_graph(model, tape, states, actions, commitment_weight);
  return {g.total.item(), g.reconstruction.item(), g.codebook.item(), g.commitment.item()};
}

void quantizer_adam_step(QuantizerModel& model, Scalar learning_rate) {
  adam_step(model.encoder().params(), learning_rate);
  adam_step(model.decoder().params(), learning_rate);
  adam_step(model.codebook_params(), learning_rate);
}

// -------------------------------------------------------------- training

namespace {

void seed_codebook(QuantizerModel& model, const Matrix& embeddings, Rng& rng) {
  Matrix& cb = model.codebook();
  const Index k = cb.rows();
  IndexVector order = all_indices(embeddings.rows());
  std::shuffle(order.begin(), order.end(), rng.engine());
  for (Index j = 0; j < k; ++j) {
    const Index src = order[static_cast<std::size_t>(j % embeddings.rows())];
    // Noise separates duplicates when the batch has fewer rows than codes.
    cb.row(j) = embeddings.row(src) + rng.normal_matrix(1, cb.cols(), 1e-3);
  }
}

}  // namespace

QuantizerTrainResult train_quantizer(const TransitionDataset& dataset, const QuantizerTrainConfig& config) {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("train_quantizer: empty dataset");
  const Index sd = dataset.metadata().state_dim;
  const Index ad = dataset.metadata().action_dim;
  Rng init_rng(derive_seed(config.seed, "quantizer-init"));
  Rng shuffle_rng(derive_seed(config.seed, "quantizer-shuffle"));
  Rng reinit_rng(derive_seed(config.seed, "quantizer-dead-codes"));

  QuantizerTrainResult out{QuantizerModel(sd, ad, config, init_rng),
                           MetricTrace({"total", "reconstruction", "codebook", "commitment", "live_codes",
                                        "reinitialized"})};
  QuantizerModel& model = out.model;
  const Matrix states = dataset.states();
  const Matrix actions = dataset.actions();
  model.set_state_normalizer(Normalizer::fit(states));

  const Index n = dataset.size();
  const Index k = config.codebook_size;
  IndexVector order = all_indices(n);
  std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
  {
    const Index first = std::min(n, config.batch_size);
    IndexVector idx(order.begin(), order.begin() + first);
    const Batch b = make_batch(dataset, idx);
    seed_codebook(model, model.encode(b.states, b.actions), init_rng);
  }

  const Index batches_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const Scalar total_steps = static_cast<Scalar>(batches_per_epoch * config.epochs);
  Index step = 0;
  for (Index epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    std::vector<Index> usage(static_cast<std::size_t>(k), 0);
    QuantizerLossTerms sums;
    Index batches = 0;
    Matrix last_embeddings;
    for (Index start = 0; start < n; start += config.batch_size) {
      const Index len = std::min(config.batch_size, n - start);
      IndexVector idx(order.begin() + start, order.begin() + start + len);
      Matrix bs(len, sd), ba(len, ad);
      for (Index i = 0; i < len; ++i) {
        bs.row(i) = states.row(idx[static_cast<std::size_t>(i)]);
        ba.row(i) = actions.row(idx[static_cast<std::size_t>(i)]);
      }
      Tape tape;
      QuantizerLossGraph g = quantizer_loss_graph(model, tape, bs, ba, config.commitment_weight);
      sums.total += g.total.item();
      sums.reconstruction += g.reconstruction.item();
      sums.codebook += g.codebook.item();
      sums.commitment += g.commitment.item();
      for (Index c : g.codes) ++usage[static_cast<std::size_t>(c)];
      last_embeddings = g.embeddings.value();
      tape.backward(g.total);
      // Cosine decay to zero; the reconstruction target is near the data noise floor.
      const Scalar progress = static_cast<Scalar>(step++) / total_steps;
      quantizer_adam_step(model, config.learning_rate * 0.5 * (1.0 + std::cos(M_PI * progress)));
      ++batches;
    }

    Index reinitialized = 0;
    if ((epoch + 1) % config.dead_code_period == 0 && epoch + 1 < config.epochs) {
      Parameter& cb = model.codebook_params()[0];
      for (Index j = 0; j < k; ++j) {
        if (usage[static_cast<std::size_t>(j)] != 0) continue;
        const Index src = reinit_rng.uniform_index(last_embeddings.rows());
        cb.value.row(j) = last_embeddings.row(src) + reinit_rng.normal_matrix(1, cb.value.cols(), 1e-2);
        cb.first_moment.row(j).setZero();
        cb.second_moment.row(j).setZero();
        ++reinitialized;
      }
    }
    const Index live = std::count_if(usage.begin(), usage.end(), [](Index u) { return u > 0; });
    const Scalar nb = static_cast<Scalar>(batches);
    out.trace.add_row(epoch, {sums.total / nb, sums.reconstruction / nb, sums.codebook / nb,
                              sums.commitment / nb, static_cast<Scalar>(live), static_cast<Scalar>(reinitialized)});
  }
  return out;
}

Scalar reconstruction_mse(const QuantizerModel& model, const TransitionDataset& dataset) {
  if (dataset.empty()) throw std::invalid_argument("reconstruction_mse: empty dataset");
  const Matrix s = dataset.states();
  const Matrix a = dataset.actions();
  const Matrix decoded = model.decode(s, model.quantize(s, a));
  return (decoded - a).squaredNorm() / static_cast<Scalar>(a.size());
}

DiscreteTransitionDataset quantize_dataset(const TransitionDataset& dataset, const QuantizerModel& model) {
  if (dataset.metadata().state_dim != model.state_dim() || dataset.metadata().action_dim != model.action_dim()) {
    throw std::invalid_argument("quantize_dataset: dataset dims (" + std::to_string(dataset.metadata().state_dim) +
                                ", " + std::to_string(dataset.metadata().action_dim) + ") != model dims (" +
                                std::to_string(model.state_dim()) + ", " + std::to_string(model.action_dim()) + ")");
  }
  DiscreteTransitionDataset out;
  out.source = dataset;
  out.codebook_size = model.codebook_size();
  if (!dataset.empty()) out.codes = model.quantize(dataset.states(), dataset.actions());
  return out;
}

Vector decode_action(const QuantizerModel& model, const Vector& state, Index code) {
  if (code < 0 || code >= model.codebook_size()) {
    throw std::out_of_range("code " + std::to_string(code) + " outside [0, " +
                            std::to_string(model.codebook_size()) + ")");
  }
  return model.decode(state.transpose(), IndexVector{code}).row(0).transpose();
}

CodebookUtilization codebook_utilization(const DiscreteTransitionDataset& dataset) {
  CodebookUtilization u;
  u.histogram.assign(static_cast<std::size_t>(dataset.codebook_size), 0);
  for (Index c : dataset.codes) ++u.histogram[static_cast<std::size_t>(c)];
  u.dead_codes = std::count(u.histogram.begin(), u.histogram.end(), Index{0});
  return u;
}

}  // namespace saq
