#pragma once

// Define-by-run reverse-mode differentiation over dense row-major matrices.
//
// Every value on a tape is a 2-D matrix (rows = batch, cols = features);
// scalars are 1x1. A Tape lives for one forward/backward pass.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace saq {

using Scalar = double;
using Index = Eigen::Index;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
using IndexVector = std::vector<Index>;

/// Leaf value with an explicit shape. Rank 0, 1 or 2; row-major storage.
class Tensor {
 public:
  Tensor() = default;

  /// Throws std::invalid_argument if product(shape) != values.size() or a value is non-finite.
  Tensor(std::vector<Index> shape, std::vector<Scalar> values);
  explicit Tensor(Matrix m);

  const std::vector<Index>& shape() const { return shape_; }
  const Matrix& matrix() const { return data_; }
  std::span<const Scalar> values() const { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  Index size() const { return data_.size(); }

 private:
  std::vector<Index> shape_;
  Matrix data_;
};

/// One trainable matrix plus its gradient and adaptive-moment state.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix first_moment;
  Matrix second_moment;
};

/// Named collection of parameters with a shared optimizer step counter.
class ParameterSet {
 public:
  std::size_t add(std::string name, Matrix init);

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }

  std::int64_t step() const { return step_; }
  void zero_grad();
  /// Copies parameter values only; moments and step counter are left alone.
  void copy_values_from(const ParameterSet& other);
  Index parameter_count() const;

 private:
  friend void adam_step(ParameterSet&, Scalar);
  std::vector<Parameter> params_;
  std::int64_t step_ = 0;
};

struct AdamConfig {
  static constexpr Scalar kBeta1 = 0.9;
  static constexpr Scalar kBeta2 = 0.999;
  static constexpr Scalar kEpsilon = 1e-8;
};

/// Bias-corrected adaptive-moment update; zeroes gradients afterwards.
void adam_step(ParameterSet& params, Scalar learning_rate);

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  Scalar item() const;
};

/// Gradients of a backward pass with respect to the tape's variable leaves.
class Gradients {
 public:
  const Matrix& operator[](Var v) const;

 private:
  friend class Tape;
  std::vector<Matrix> by_node_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Non-differentiable input.
  Var constant(Matrix value);
  Var constant(const Tensor& t) { return constant(t.matrix()); }
  /// Differentiable input whose gradient is returned by backward().
  Var variable(Matrix value);
  Var variable(const Tensor& t) { return variable(t.matrix()); }
  /// Parameter leaf; backward() accumulates into Parameter::grad.
  Var param(Parameter& p);

  /// Records an operation. `pullback` receives the node's output gradient and
  /// must call accumulate() for each differentiable parent.
  Var record(Matrix value, std::function<void(Tape&, const Matrix&)> pullback, bool requires_grad);

  void accumulate(std::size_t id, const Matrix& g);
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Loss must be 1x1. Populates parameter gradients, returns leaf gradients, clears the tape.
  Gradients backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  friend struct Var;
  enum class Kind : std::uint8_t { kConstant, kVariable, kParameter, kOp };
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&, const Matrix&)> pullback;
    Parameter* parameter = nullptr;
    Kind kind = Kind::kConstant;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// Primitives. Binary elementwise ops accept equal shapes or a broadcast right
// operand of shape 1xC (row), Rx1 (column) or 1x1.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Scalar c);
Var add_scalar(Var a, Scalar c);
Var neg(Var a);
Var tanh(Var a);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
/// Gradient passes only where lo < x < hi.
Var clamp(Var a, Scalar lo, Scalar hi);
Var softmax(Var a);
Var log_softmax(Var a);
/// Row-wise, max-subtracted. Output Rx1.
Var logsumexp(Var a);
/// out(r) = a(r, idx[r]). Output Rx1.
Var gather(Var a, const IndexVector& idx);
/// out.row(i) = a.row(idx[i]).
Var gather_rows(Var a, const IndexVector& idx);
Var row_sum(Var a);
Var sum(Var a);
Var mean(Var a);
/// Unweighted mean of squared differences (no 1/2 factor). Output 1x1.
Var mse(Var a, Var b);
/// Row-wise squared L2 norm. Output Rx1.
Var sqnorm_rows(Var a);
Var concat_cols(Var a, Var b);
Var slice_cols(Var a, Index start, Index count);
/// Row-major reshape.
Var reshape(Var a, Index rows, Index cols);
Var stop_gradient(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(Var a, Scalar c) { return scale(a, c); }
inline Var operator*(Scalar c, Var a) { return scale(a, c); }

// Plain-matrix helpers shared by tape-free inference paths.
Matrix row_logsumexp(const Matrix& m);
Matrix row_softmax(const Matrix& m);

}  // namespace saq
