#include "saq/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace saq {

Mlp::Mlp(std::string name, std::vector<Index> sizes, Activation activation, Rng& rng)
    : sizes_(std::move(sizes)), activation_(activation) {
  if (sizes_.size() < 2) throw std::invalid_argument("Mlp needs at least input and output sizes");
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const Index fan_in = sizes_[l];
    const Index fan_out = sizes_[l + 1];
    if (fan_in <= 0 || fan_out <= 0) throw std::invalid_argument("Mlp: non-positive layer size");
    const Scalar bound = 1.0 / std::sqrt(static_cast<Scalar>(fan_in));
    params_.add(name + "." + std::to_string(l) + ".w", rng.uniform_matrix(fan_in, fan_out, -bound, bound));
    params_.add(name + "." + std::to_string(l) + ".b", Matrix::Zero(1, fan_out));
  }
}

Mlp Mlp::from_parameters(ParameterSet params, Activation activation) {
  if (params.size() < 2 || params.size() % 2 != 0) {
    throw std::invalid_argument("Mlp: expected weight/bias pairs");
  }
  Mlp m;
  m.activation_ = activation;
  m.sizes_.push_back(params[0].value.rows());
  for (std::size_t i = 0; i < params.size(); i += 2) {
    const Matrix& w = params[i].value;
    const Matrix& b = params[i + 1].value;
    if (w.rows() != m.sizes_.back() || b.rows() != 1 || b.cols() != w.cols()) {
      throw std::invalid_argument("Mlp: inconsistent layer shapes in " + params[i].name);
    }
    m.sizes_.push_back(w.cols());
  }
  m.params_ = std::move(params);
  return m;
}

Var Mlp::forward(Tape& tape, Var x) {
  const std::size_t layers = params_.size() / 2;
  Var h = x;
  for (std::size_t l = 0; l < layers; ++l) {
    h = add(matmul(h, tape.param(params_[2 * l])), tape.param(params_[2 * l + 1]));
    if (l + 1 < layers) h = activation_ == Activation::kTanh ? tanh(h) : relu(h);
  }
  return h;
}

Matrix Mlp::evaluate(const Matrix& x) const {
  if (x.cols() != input_dim()) {
    throw std::invalid_argument("Mlp::evaluate: input has " + std::to_string(x.cols()) +
                                " columns, expected " + std::to_string(input_dim()));
  }
  const std::size_t layers = params_.size() / 2;
  Matrix h = x;
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix z = h * params_[2 * l].value;
    z.rowwise() += params_[2 * l + 1].value.row(0);
    if (l + 1 < layers) {
      if (activation_ == Activation::kTanh) {
        h = z.array().tanh();
      } else {
        h = z.cwiseMax(0.0);
      }
    } else {
      h = std::move(z);
    }
  }
  return h;
}

Normalizer Normalizer::identity(Index dim) {
  return {RowVector::Zero(dim), RowVector::Ones(dim)};
}

Normalizer Normalizer::fit(const Matrix& data) {
  if (data.rows() == 0) return identity(data.cols());
  RowVector mu = data.colwise().mean();
  RowVector sd = ((data.rowwise() - mu).array().square().colwise().mean()).sqrt();
  for (Index i = 0; i < sd.size(); ++i) {
    if (sd(i) < 1e-6) sd(i) = 1.0;
  }
  return {mu, sd};
}

Matrix Normalizer::apply(const Matrix& x) const {
  return (x.rowwise() - mean).array().rowwise() / scale.array();
}

}  // namespace saq
