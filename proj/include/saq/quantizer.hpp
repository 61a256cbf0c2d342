#pragma once

// State-conditioned action quantizer: a VQ auto-encoder with a scalar code.
//
// The encoder maps (s, a) to an embedding in R^D, which snaps to the nearest
// of K codebook vectors; the decoder maps (s, e_k) back to an action. Training
// minimizes reconstruction + codebook + commitment terms with a
// straight-through gradient past the nearest-code selection.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "saq/autodiff.hpp"
#include "saq/dataset.hpp"
#include "saq/metrics.hpp"
#include "saq/nn.hpp"

namespace saq {

/// Index of the codebook row closest to `embedding` in Euclidean distance.
/// Ties resolve to the lowest index.
template <typename Derived>
Index nearest_code(const Eigen::MatrixBase<Derived>& embedding, const Matrix& codebook) {
  Index best = 0;
  Scalar best_d = (codebook.row(0) - embedding.reshaped().transpose()).squaredNorm();
  for (Index j = 1; j < codebook.rows(); ++j) {
    const Scalar d = (codebook.row(j) - embedding.reshaped().transpose()).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

/// Row-wise nearest_code for an N x D matrix of embeddings.
IndexVector nearest_codes(const Matrix& embeddings, const Matrix& codebook);

struct QuantizerTrainConfig {
  Index codebook_size = 32;
  Index embedding_dim = 8;
  std::vector<Index> hidden{64, 64};
  Index epochs = 400;
  Index batch_size = 32;
  Scalar learning_rate = 2e-3;
  Scalar commitment_weight = 0.25;
  /// Codes unused over an epoch are re-seeded every this many epochs.
  Index dead_code_period = 5;
  std::uint64_t seed = 0;
  /// False gives the ablation where neither encoder nor decoder sees the state.
  bool state_conditioned = true;

  /// Throws std::invalid_argument unless every field is positive and K >= 2.
  void validate() const;
};

class QuantizerModel {
 public:
  QuantizerModel() = default;
  QuantizerModel(Index state_dim, Index action_dim, const QuantizerTrainConfig& config, Rng& rng);

  Index state_dim() const { return state_dim_; }
  Index action_dim() const { return action_dim_; }
  Index codebook_size() const { return codebook_[0].value.rows(); }
  Index embedding_dim() const { return codebook_[0].value.cols(); }
  bool state_conditioned() const { return state_conditioned_; }

  const Matrix& codebook() const { return codebook_[0].value; }
  Matrix& codebook() { return codebook_[0].value; }
  Mlp& encoder() { return encoder_; }
  Mlp& decoder() { return decoder_; }
  const Mlp& encoder() const { return encoder_; }
  const Mlp& decoder() const { return decoder_; }
  ParameterSet& codebook_params() { return codebook_; }
  const Normalizer& state_normalizer() const { return state_norm_; }
  void set_state_normalizer(Normalizer n) { state_norm_ = std::move(n); }

  /// Encoder input rows for a batch (normalized state ++ action, or action alone).
  Matrix encoder_input(const Matrix& states, const Matrix& actions) const;
  /// Decoder input rows (normalized state ++ code vector, or code vector alone).
  Matrix decoder_input(const Matrix& states, const Matrix& code_vectors) const;

  Matrix encode(const Matrix& states, const Matrix& actions) const;
  IndexVector quantize(const Matrix& states, const Matrix& actions) const;
  Matrix decode(const Matrix& states, const IndexVector& codes) const;
  /// All K decoded actions at one state, one per row.
  Matrix decode_all(const Vector& state) const;

  void save(const std::filesystem::path& path) const;
  static QuantizerModel load(const std::filesystem::path& path);
  std::vector<std::uint8_t> serialize() const;
  static QuantizerModel deserialize(std::span<const std::uint8_t> bytes);

  bool operator==(const QuantizerModel& o) const;

 private:
  void check_batch(const Matrix& states, const Matrix& actions) const;

  Index state_dim_ = 0;
  Index action_dim_ = 0;
  bool state_conditioned_ = true;
  Normalizer state_norm_;
  Mlp encoder_;
  Mlp decoder_;
  ParameterSet codebook_;
};

/// Loss terms of one batch (batch means).
struct QuantizerLossTerms {
  Scalar total = 0.0;
  Scalar reconstruction = 0.0;
  Scalar codebook = 0.0;
  Scalar commitment = 0.0;
};

/// Tape version used for training: the returned `total` is differentiable.
struct QuantizerLossGraph {
  Var total;
  Var reconstruction;
  Var codebook;
  Var commitment;
  Var embeddings;  // encoder output, B x D
  IndexVector codes;
};

/// reconstruction = mse(decoded, actions); codebook = mean ||sg[z_e] - e_k||^2;
/// commitment = beta * mean ||z_e - sg[e_k]||^2. The decoder sees
/// z_e + sg[e_k - z_e], so its gradient reaches the encoder unchanged.
QuantizerLossGraph quantizer_loss_graph(QuantizerModel& model, Tape& tape, const Matrix& states,
                                        const Matrix& actions, Scalar commitment_weight);
QuantizerLossTerms quantizer_loss(QuantizerModel& model, const Matrix& states, const Matrix& actions,
                                  Scalar commitment_weight);

/// Per-parameter-group optimizer step after a backward pass.
void quantizer_adam_step(QuantizerModel& model, Scalar learning_rate);

struct QuantizerTrainResult {
  QuantizerModel model;
  /// Per epoch: total, reconstruction, codebook, commitment, live_codes, reinitialized.
  MetricTrace trace;
};

/// Throws std::invalid_argument on an empty dataset or invalid config.
QuantizerTrainResult train_quantizer(const TransitionDataset& dataset, const QuantizerTrainConfig& config);

/// Mean squared reconstruction error of encode -> nearest -> decode over the dataset.
Scalar reconstruction_mse(const QuantizerModel& model, const TransitionDataset& dataset);

DiscreteTransitionDataset quantize_dataset(const TransitionDataset& dataset, const QuantizerModel& model);

/// Throws std::out_of_range when code >= K.
Vector decode_action(const QuantizerModel& model, const Vector& state, Index code);

struct CodebookUtilization {
  std::vector<Index> histogram;
  Index dead_codes = 0;
  Index live_codes() const { return static_cast<Index>(histogram.size()) - dead_codes; }
};

CodebookUtilization codebook_utilization(const DiscreteTransitionDataset& dataset);

}  // namespace saq
