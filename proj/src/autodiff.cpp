#include "saq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace saq {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                              shape_str(b));
}

enum class Broadcast { kNone, kRow, kCol, kScalar };

Broadcast broadcast_kind(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::kNone;
  if (b.rows() == 1 && b.cols() == 1) return Broadcast::kScalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::kRow;
  if (b.cols() == 1 && b.rows() == a.rows()) return Broadcast::kCol;
  shape_error(op, a, b);
}

Matrix expand(const Matrix& b, Broadcast kind, Index rows, Index cols) {
  switch (kind) {
    case Broadcast::kNone:
      return b;
    case Broadcast::kRow:
      return b.replicate(rows, 1);
    case Broadcast::kCol:
      return b.replicate(1, cols);
    case Broadcast::kScalar:
      return Matrix::Constant(rows, cols, b(0, 0));
  }
  return b;
}

Matrix reduce_to(const Matrix& g, Broadcast kind) {
  switch (kind) {
    case Broadcast::kNone:
      return g;
    case Broadcast::kRow:
      return g.colwise().sum();
    case Broadcast::kCol:
      return g.rowwise().sum();
    case Broadcast::kScalar:
      return Matrix::Constant(1, 1, g.sum());
  }
  return g;
}

bool any_grad(Var a) { return a.tape->requires_grad(a); }
bool any_grad(Var a, Var b) { return any_grad(a) || any_grad(b); }

void check_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::invalid_argument("operands recorded on different tapes");
}

}  // namespace

Matrix row_logsumexp(const Matrix& m) {
  Matrix out(m.rows(), 1);
  for (Index r = 0; r < m.rows(); ++r) {
    const Scalar mx = m.row(r).maxCoeff();
    out(r, 0) = mx + std::log((m.row(r).array() - mx).exp().sum());
  }
  return out;
}

Matrix row_softmax(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Index r = 0; r < m.rows(); ++r) {
    const Scalar mx = m.row(r).maxCoeff();
    auto e = (m.row(r).array() - mx).exp();
    out.row(r) = e / e.sum();
  }
  return out;
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(std::vector<Index> shape, std::vector<Scalar> values) : shape_(std::move(shape)) {
  if (shape_.size() > 2) throw std::invalid_argument("Tensor: rank > 2 not supported");
  Index n = 1;
  for (Index d : shape_) {
    if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
    n *= d;
  }
  if (n != static_cast<Index>(values.size())) {
    throw std::invalid_argument("Tensor: shape product " + std::to_string(n) +
                                " != value count " + std::to_string(values.size()));
  }
  for (Scalar v : values) {
    if (!std::isfinite(v)) throw std::invalid_argument("Tensor: non-finite value");
  }
  const Index rows = shape_.size() == 2 ? shape_[0] : 1;
  const Index cols = shape_.empty() ? 1 : shape_.back();
  data_ = Eigen::Map<const Matrix>(values.data(), rows, cols);
}

Tensor::Tensor(Matrix m) : shape_{m.rows(), m.cols()}, data_(std::move(m)) {
  if (!data_.allFinite()) throw std::invalid_argument("Tensor: non-finite value");
}

// ---------------------------------------------------------- ParameterSet

std::size_t ParameterSet::add(std::string name, Matrix init) {
  Parameter p;
  p.name = std::move(name);
  p.grad = Matrix::Zero(init.rows(), init.cols());
  p.first_moment = Matrix::Zero(init.rows(), init.cols());
  p.second_moment = Matrix::Zero(init.rows(), init.cols());
  p.value = std::move(init);
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

Parameter& ParameterSet::at(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("no parameter named " + name);
}

const Parameter& ParameterSet::at(const std::string& name) const {
  return const_cast<ParameterSet*>(this)->at(name);
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

void ParameterSet::copy_values_from(const ParameterSet& other) {
  if (other.params_.size() != params_.size()) {
    throw std::invalid_argument("copy_values_from: parameter count mismatch");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].value.rows() != other.params_[i].value.rows() ||
        params_[i].value.cols() != other.params_[i].value.cols()) {
      shape_error("copy_values_from", params_[i].value, other.params_[i].value);
    }
    params_[i].value = other.params_[i].value;
  }
}

Index ParameterSet::parameter_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void adam_step(ParameterSet& params, Scalar learning_rate) {
  constexpr Scalar b1 = AdamConfig::kBeta1;
  constexpr Scalar b2 = AdamConfig::kBeta2;
  ++params.step_;
  const Scalar t = static_cast<Scalar>(params.step_);
  const Scalar c1 = 1.0 - std::pow(b1, t);
  const Scalar c2 = 1.0 - std::pow(b2, t);
  for (auto& p : params.params_) {
    p.first_moment = b1 * p.first_moment + (1.0 - b1) * p.grad;
    p.second_moment = b2 * p.second_moment + (1.0 - b2) * p.grad.cwiseAbs2();
    p.value.array() -= learning_rate * (p.first_moment.array() / c1) /
                       ((p.second_moment.array() / c2).sqrt() + AdamConfig::kEpsilon);
    p.grad.setZero();
  }
}

// ------------------------------------------------------------------ Tape

const Matrix& Var::value() const { return tape->nodes_[id].value; }

Scalar Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw std::invalid_argument("item() on non-scalar " + shape_str(v));
  return v(0, 0);
}

const Matrix& Gradients::operator[](Var v) const {
  if (v.id >= by_node_.size() || by_node_[v.id].size() == 0) {
    throw std::out_of_range("no gradient recorded for this variable");
  }
  return by_node_[v.id];
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::variable(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.kind = Kind::kVariable;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.kind = Kind::kParameter;
  n.parameter = &p;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::record(Matrix value, std::function<void(Tape&, const Matrix&)> pullback,
                 bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.kind = Kind::kOp;
  n.requires_grad = requires_grad;
  if (requires_grad) n.pullback = std::move(pullback);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

Gradients Tape::backward(Var loss) {
  if (loss.tape != this) throw std::invalid_argument("backward: loss from another tape");
  const Matrix& lv = nodes_[loss.id].value;
  if (lv.size() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(lv));
  Gradients out;
  out.by_node_.resize(nodes_.size());
  if (nodes_[loss.id].requires_grad) {
    nodes_[loss.id].grad = Matrix::Ones(1, 1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      switch (n.kind) {
        case Kind::kOp: {
          // Move the grad out so the pullback may safely touch other nodes.
          Matrix g = std::move(n.grad);
          n.pullback(*this, g);
          break;
        }
        case Kind::kParameter:
          n.parameter->grad += n.grad;
          break;
        case Kind::kVariable:
          out.by_node_[i] = std::move(n.grad);
          break;
        case Kind::kConstant:
          break;
      }
    }
  }
  // Variables never touched by the loss get an explicit zero gradient.
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].kind == Kind::kVariable && out.by_node_[i].size() == 0) {
      out.by_node_[i] = Matrix::Zero(nodes_[i].value.rows(), nodes_[i].value.cols());
    }
  }
  nodes_.clear();
  return out;
}

// ------------------------------------------------------------ primitives

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) shape_error("matmul", av, bv);
  Matrix out = av * bv;
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out),
      [ia, ib](Tape& t, const Matrix& g) {
        if (t.requires_grad({&t, ia})) t.accumulate(ia, g * Var{&t, ib}.value().transpose());
        if (t.requires_grad({&t, ib})) t.accumulate(ib, Var{&t, ia}.value().transpose() * g);
      },
      any_grad(a, b));
}

namespace {

template <typename Fwd, typename GradA, typename GradB>
Var binary(const char* name, Var a, Var b, Fwd fwd, GradA ga, GradB gb) {
  check_same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Broadcast kind = broadcast_kind(name, av, bv);
  Matrix bx = expand(bv, kind, av.rows(), av.cols());
  Matrix out = fwd(av, bx);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out),
      [ia, ib, kind, bx = std::move(bx), ga, gb](Tape& t, const Matrix& g) {
        const Matrix& av2 = Var{&t, ia}.value();
        if (t.requires_grad({&t, ia})) t.accumulate(ia, ga(g, av2, bx));
        if (t.requires_grad({&t, ib})) t.accumulate(ib, reduce_to(gb(g, av2, bx), kind));
      },
      any_grad(a, b));
}

template <typename Fwd, typename Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  Matrix out = fwd(a.value());
  const std::size_t ia = a.id;
  return a.tape->record(
      std::move(out),
      [ia, deriv](Tape& t, const Matrix& g) {
        t.accumulate(ia, deriv(g, Var{&t, ia}.value()));
      },
      any_grad(a));
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      "add", a, b, [](const Matrix& x, const Matrix& y) -> Matrix { return x + y; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return g; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return g; });
}

Var sub(Var a, Var b) {
  return binary(
      "sub", a, b, [](const Matrix& x, const Matrix& y) -> Matrix { return x - y; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return g; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return -g; });
}

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b,
      [](const Matrix& x, const Matrix& y) -> Matrix { return x.cwiseProduct(y); },
      [](const Matrix& g, const Matrix&, const Matrix& y) -> Matrix { return g.cwiseProduct(y); },
      [](const Matrix& g, const Matrix& x, const Matrix&) -> Matrix { return g.cwiseProduct(x); });
}

Var scale(Var a, Scalar c) {
  return unary(
      a, [c](const Matrix& x) -> Matrix { return c * x; },
      [c](const Matrix& g, const Matrix&) -> Matrix { return c * g; });
}

Var add_scalar(Var a, Scalar c) {
  return unary(
      a, [c](const Matrix& x) -> Matrix { return x.array() + c; },
      [](const Matrix& g, const Matrix&) -> Matrix { return g; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var tanh(Var a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.array().tanh(); },
      [](const Matrix& g, const Matrix& x) -> Matrix {
        return g.array() * (1.0 - x.array().tanh().square());
      });
}

Var relu(Var a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.cwiseMax(0.0); },
      [](const Matrix& g, const Matrix& x) -> Matrix {
        return (x.array() > 0.0).select(g, Matrix::Zero(g.rows(), g.cols()));
      });
}

Var exp(Var a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.array().exp(); },
      [](const Matrix& g, const Matrix& x) -> Matrix { return g.array() * x.array().exp(); });
}

Var log(Var a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.array().log(); },
      [](const Matrix& g, const Matrix& x) -> Matrix { return g.array() / x.array(); });
}

Var square(Var a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.array().square(); },
      [](const Matrix& g, const Matrix& x) -> Matrix { return 2.0 * g.array() * x.array(); });
}

Var clamp(Var a, Scalar lo, Scalar hi) {
  if (!(lo < hi)) throw std::invalid_argument("clamp: lo must be < hi");
  return unary(
      a, [lo, hi](const Matrix& x) -> Matrix { return x.cwiseMax(lo).cwiseMin(hi); },
      [lo, hi](const Matrix& g, const Matrix& x) -> Matrix {
        return (x.array() > lo && x.array() < hi).select(g, Matrix::Zero(g.rows(), g.cols()));
      });
}

Var softmax(Var a) {
  Matrix p = row_softmax(a.value());
  const std::size_t ia = a.id;
  Matrix keep = p;
  return a.tape->record(
      std::move(p),
      [ia, keep = std::move(keep)](Tape& t, const Matrix& g) {
        // d/dx_j: p_j (g_j - sum_i g_i p_i)
        Matrix dot = g.cwiseProduct(keep).rowwise().sum();
        t.accumulate(ia, keep.cwiseProduct(g - dot.replicate(1, g.cols())));
      },
      any_grad(a));
}

Var log_softmax(Var a) {
  const Matrix& x = a.value();
  Matrix lse = row_logsumexp(x);
  Matrix out = x - lse.replicate(1, x.cols());
  const std::size_t ia = a.id;
  Matrix p = out.array().exp();
  return a.tape->record(
      std::move(out),
      [ia, p = std::move(p)](Tape& t, const Matrix& g) {
        Matrix gs = g.rowwise().sum();
        t.accumulate(ia, g - p.cwiseProduct(gs.replicate(1, g.cols())));
      },
      any_grad(a));
}

Var logsumexp(Var a) {
  const Matrix& x = a.value();
  if (x.cols() == 0) throw std::invalid_argument("logsumexp: empty last axis");
  Matrix out = row_logsumexp(x);
  Matrix p = row_softmax(x);
  const std::size_t ia = a.id;
  return a.tape->record(
      std::move(out),
      [ia, p = std::move(p)](Tape& t, const Matrix& g) {
        t.accumulate(ia, p.cwiseProduct(g.replicate(1, p.cols())));
      },
      any_grad(a));
}

Var gather(Var a, const IndexVector& idx) {
  const Matrix& x = a.value();
  if (static_cast<Index>(idx.size()) != x.rows()) {
    throw std::invalid_argument("gather: index count " + std::to_string(idx.size()) +
                                " != rows " + std::to_string(x.rows()));
  }
  Matrix out(x.rows(), 1);
  for (Index r = 0; r < x.rows(); ++r) {
    const Index c = idx[static_cast<std::size_t>(r)];
    if (c < 0 || c >= x.cols()) {
      throw std::out_of_range("gather: index " + std::to_string(c) + " outside [0, " +
                              std::to_string(x.cols()) + ")");
    }
    out(r, 0) = x(r, c);
  }
  const std::size_t ia = a.id;
  const Index cols = x.cols();
  return a.tape->record(
      std::move(out),
      [ia, idx, cols](Tape& t, const Matrix& g) {
        Matrix d = Matrix::Zero(g.rows(), cols);
        for (Index r = 0; r < g.rows(); ++r) d(r, idx[static_cast<std::size_t>(r)]) = g(r, 0);
        t.accumulate(ia, d);
      },
      any_grad(a));
}

Var gather_rows(Var a, const IndexVector& idx) {
  const Matrix& x = a.value();
  Matrix out(static_cast<Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= x.rows()) {
      throw std::out_of_range("gather_rows: index " + std::to_string(idx[i]) + " outside [0, " +
                              std::to_string(x.rows()) + ")");
    }
    out.row(static_cast<Index>(i)) = x.row(idx[i]);
  }
  const std::size_t ia = a.id;
  const Index rows = x.rows();
  return a.tape->record(
      std::move(out),
      [ia, idx, rows](Tape& t, const Matrix& g) {
        Matrix d = Matrix::Zero(rows, g.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += g.row(static_cast<Index>(i));
        t.accumulate(ia, d);
      },
      any_grad(a));
}

Var row_sum(Var a) {
  const std::size_t ia = a.id;
  const Index cols = a.cols();
  return a.tape->record(
      a.value().rowwise().sum(),
      [ia, cols](Tape& t, const Matrix& g) { t.accumulate(ia, g.replicate(1, cols)); },
      any_grad(a));
}

Var sum(Var a) {
  const std::size_t ia = a.id;
  const Index rows = a.rows(), cols = a.cols();
  return a.tape->record(
      Matrix::Constant(1, 1, a.value().sum()),
      [ia, rows, cols](Tape& t, const Matrix& g) {
        t.accumulate(ia, Matrix::Constant(rows, cols, g(0, 0)));
      },
      any_grad(a));
}

Var mean(Var a) {
  const Index n = a.value().size();
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<Scalar>(n));
}

Var mse(Var a, Var b) {
  check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("mse", a.value(), b.value());
  if (a.value().size() == 0) throw std::invalid_argument("mse: empty tensors");
  Matrix diff = a.value() - b.value();
  const Scalar n = static_cast<Scalar>(diff.size());
  Matrix out = Matrix::Constant(1, 1, diff.squaredNorm() / n);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out),
      [ia, ib, diff = std::move(diff), n](Tape& t, const Matrix& g) {
        Matrix d = (2.0 * g(0, 0) / n) * diff;
        t.accumulate(ia, d);
        t.accumulate(ib, -d);
      },
      any_grad(a, b));
}

Var sqnorm_rows(Var a) {
  const std::size_t ia = a.id;
  return a.tape->record(
      a.value().rowwise().squaredNorm(),
      [ia](Tape& t, const Matrix& g) {
        const Matrix& x = Var{&t, ia}.value();
        t.accumulate(ia, 2.0 * x.cwiseProduct(g.replicate(1, x.cols())));
      },
      any_grad(a));
}

Var concat_cols(Var a, Var b) {
  check_same_tape(a, b);
  if (a.rows() != b.rows()) shape_error("concat_cols", a.value(), b.value());
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const std::size_t ia = a.id, ib = b.id;
  const Index ca = a.cols(), cb = b.cols();
  return a.tape->record(
      std::move(out),
      [ia, ib, ca, cb](Tape& t, const Matrix& g) {
        t.accumulate(ia, g.leftCols(ca));
        t.accumulate(ib, g.rightCols(cb));
      },
      any_grad(a, b));
}

Var slice_cols(Var a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::out_of_range("slice_cols: [" + std::to_string(start) + ", " +
                            std::to_string(start + count) + ") outside " + shape_str(a.value()));
  }
  const std::size_t ia = a.id;
  const Index cols = a.cols();
  return a.tape->record(
      a.value().middleCols(start, count),
      [ia, start, count, cols](Tape& t, const Matrix& g) {
        Matrix d = Matrix::Zero(g.rows(), cols);
        d.middleCols(start, count) = g;
        t.accumulate(ia, d);
      },
      any_grad(a));
}

Var reshape(Var a, Index rows, Index cols) {
  if (rows * cols != a.value().size()) {
    throw std::invalid_argument("reshape: " + shape_str(a.value()) + " into [" +
                                std::to_string(rows) + "x" + std::to_string(cols) + "]");
  }
  const std::size_t ia = a.id;
  const Index r0 = a.rows(), c0 = a.cols();
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return a.tape->record(
      std::move(out),
      [ia, r0, c0](Tape& t, const Matrix& g) {
        t.accumulate(ia, Eigen::Map<const Matrix>(g.data(), r0, c0));
      },
      any_grad(a));
}

Var stop_gradient(Var a) { return a.tape->constant(a.value()); }

}  // namespace saq
