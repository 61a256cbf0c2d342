#pragma once

// Exact quantities over a finite action set, written against Eigen expressions.
// Vectors are probability / logit vectors over K codes; matrices hold one
// state per row.

#include <cmath>
#include <limits>
#include <stdexcept>

#include "saq/autodiff.hpp"

namespace saq {

/// Behavior log-probabilities are floored here before they enter any exact sum.
inline constexpr Scalar kLogProbFloor = -30.0;

template <typename Derived>
Scalar logsumexp(const Eigen::MatrixBase<Derived>& v) {
  const Scalar mx = v.maxCoeff();
  if (mx == -std::numeric_limits<Scalar>::infinity()) return mx;
  return mx + std::log((v.array() - mx).exp().sum());
}

template <typename Derived>
Vector softmax(const Eigen::MatrixBase<Derived>& v) {
  const Scalar mx = v.maxCoeff();
  Vector e = (v.reshaped().array() - mx).exp();
  return e / e.sum();
}

template <typename Derived>
Vector log_softmax(const Eigen::MatrixBase<Derived>& v) {
  return v.reshaped().array() - logsumexp(v);
}

/// Lowest index among maximal entries.
template <typename Derived>
Index argmax(const Eigen::MatrixBase<Derived>& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return best;
}

/// sum_i p_i (log p_i - log q_i); zero-probability terms of p contribute 0,
/// and +infinity is returned when p_i > 0 where q_i = 0.
template <typename DerivedP, typename DerivedQ>
Scalar exact_kl(const Eigen::MatrixBase<DerivedP>& p, const Eigen::MatrixBase<DerivedQ>& q) {
  if (p.size() != q.size()) throw std::invalid_argument("exact_kl: size mismatch");
  Scalar kl = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    if (p(i) <= 0.0) continue;
    if (q(i) <= 0.0) return std::numeric_limits<Scalar>::infinity();
    kl += p(i) * (std::log(p(i)) - std::log(q(i)));
  }
  return kl;
}

/// Maximizer of E_pi[A] subject to KL(pi || pi_beta) <= eps for the multiplier
/// `lambda`: pi(a) proportional to exp(A(a) / lambda + log pi_beta(a)), normalized
/// over all codes. Codes with zero behavior probability get zero probability.
template <typename DerivedA, typename DerivedB>
Vector iql_closed_form_policy(const Eigen::MatrixBase<DerivedA>& advantages,
                              const Eigen::MatrixBase<DerivedB>& behavior_probs, Scalar lambda) {
  if (advantages.size() != behavior_probs.size()) {
    throw std::invalid_argument("iql_closed_form_policy: size mismatch");
  }
  if (!(lambda > 0.0)) throw std::invalid_argument("iql_closed_form_policy: lambda must be positive");
  const Index k = advantages.size();
  Vector logits(k);
  for (Index i = 0; i < k; ++i) {
    if (behavior_probs(i) < 0.0) throw std::invalid_argument("iql_closed_form_policy: negative probability");
    logits(i) = behavior_probs(i) > 0.0 ? advantages(i) / lambda + std::log(behavior_probs(i))
                                        : -std::numeric_limits<Scalar>::infinity();
  }
  const Scalar z = logsumexp(logits);
  if (!std::isfinite(z)) throw std::invalid_argument("iql_closed_form_policy: behavior has no support");
  return (logits.array() - z).exp();
}

/// Same, with behavior given as log-probabilities (already floored).
template <typename DerivedA, typename DerivedB>
Vector iql_closed_form_policy_log(const Eigen::MatrixBase<DerivedA>& advantages,
                                  const Eigen::MatrixBase<DerivedB>& behavior_log_probs, Scalar lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("iql_closed_form_policy: lambda must be positive");
  Vector logits = advantages.reshaped().array() / lambda + behavior_log_probs.reshaped().array();
  return softmax(logits);
}

/// |tau - 1[u < 0]| * u^2.
inline Scalar expectile_loss(Scalar u, Scalar tau) {
  const Scalar w = u < 0.0 ? 1.0 - tau : tau;
  return w * u * u;
}

/// Row-wise log-softmax floored at kLogProbFloor.
inline Matrix floored_log_softmax(const Matrix& logits) {
  Matrix out = logits - row_logsumexp(logits).replicate(1, logits.cols());
  return out.cwiseMax(kLogProbFloor);
}

/// Mean over rows of logsumexp(Q_row) - Q_row[code]; the exact discrete conservatism penalty.
inline Scalar cql_penalty_exact(const Matrix& q_values, const IndexVector& codes) {
  if (static_cast<Index>(codes.size()) != q_values.rows()) throw std::invalid_argument("cql_penalty: row mismatch");
  if (codes.empty()) throw std::invalid_argument("cql_penalty: empty batch");
  const Matrix lse = row_logsumexp(q_values);
  Scalar acc = 0.0;
  for (Index i = 0; i < q_values.rows(); ++i) {
    const Index c = codes[static_cast<std::size_t>(i)];
    if (c < 0 || c >= q_values.cols()) throw std::out_of_range("cql_penalty: code out of range");
    acc += lse(i, 0) - q_values(i, c);
  }
  return acc / static_cast<Scalar>(q_values.rows());
}

/// Mean negative log of the softmax probability of each row's code.
inline Scalar softmax_nll(const Matrix& logits, const IndexVector& codes) {
  if (static_cast<Index>(codes.size()) != logits.rows()) throw std::invalid_argument("softmax_nll: row mismatch");
  if (codes.empty()) throw std::invalid_argument("softmax_nll: empty batch");
  Scalar acc = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const Index c = codes[static_cast<std::size_t>(i)];
    if (c < 0 || c >= logits.cols()) throw std::out_of_range("softmax_nll: code out of range");
    const Vector p = softmax(logits.row(i));
    acc -= std::log(p(c));
  }
  return acc / static_cast<Scalar>(logits.rows());
}

}  // namespace saq
