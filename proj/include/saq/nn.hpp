#pragma once

#include <string>
#include <vector>

#include "saq/autodiff.hpp"
#include "saq/rng.hpp"

namespace saq {

enum class Activation { kTanh, kRelu };

/// Fully connected network; hidden layers use `activation`, the output layer is linear.
/// Weights are uniform in +-1/sqrt(fan_in), biases zero. Copying an Mlp copies
/// its parameters, which is how target networks are made.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string name, std::vector<Index> sizes, Activation activation, Rng& rng);

  Var forward(Tape& tape, Var x);
  /// Tape-free inference.
  Matrix evaluate(const Matrix& x) const;

  Index input_dim() const { return sizes_.front(); }
  Index output_dim() const { return sizes_.back(); }
  const std::vector<Index>& sizes() const { return sizes_; }
  Activation activation() const { return activation_; }

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  /// Rebuilds layer sizes from stored parameters (used after deserialization).
  static Mlp from_parameters(ParameterSet params, Activation activation);

 private:
  std::vector<Index> sizes_;
  Activation activation_ = Activation::kTanh;
  ParameterSet params_;
};

/// Affine per-feature normalization fitted on training data.
struct Normalizer {
  RowVector mean;
  RowVector scale;

  static Normalizer identity(Index dim);
  static Normalizer fit(const Matrix& data);
  Matrix apply(const Matrix& x) const;
};

}  // namespace saq
