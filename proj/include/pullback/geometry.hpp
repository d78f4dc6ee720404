#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "pullback/errors.hpp"
#include "pullback/numcore.hpp"

// Induced (pull-back) metric of the loss graph L = f(loss(theta)) embedded in
// parameter space x R, with ambient metric diag(gamma, 1).
//
// The pulled-back metric is gamma + grad grad^T. Its inverse follows from
// Sherman-Morrison, and applied to the gradient it collapses to a scalar
// rescaling of gamma^{-1} grad, which is what the optimizers use. The dense
// matrix routines here are small-N verification oracles only.

namespace pullback {

enum class EmbeddingKind { Identity, LogLoss };

/// Diagonal inverse ambient metric gamma^{-1}.
class InverseMetric {
 public:
  struct Euclidean {};
  struct DiagonalScaled {
    ParamVector scale;
  };

  InverseMetric() = default;

  static InverseMetric euclidean() { return InverseMetric(); }

  static InverseMetric diagonal(ParamVector scale) {
    for (double s : scale) {
      if (!(s > 0.0) || !std::isfinite(s)) {
        throw DomainError("InverseMetric: diagonal entries must be positive and finite");
      }
    }
    InverseMetric m;
    m.repr_ = DiagonalScaled{std::move(scale)};
    return m;
  }

  bool is_euclidean() const noexcept { return std::holds_alternative<Euclidean>(repr_); }

  /// Diagonal entries; only valid when !is_euclidean().
  const ParamVector& scale() const { return std::get<DiagonalScaled>(repr_).scale; }

  /// gamma^{-1} v.
  ParamVector apply(const ParamVector& v) const {
    if (is_euclidean()) return v;
    const ParamVector& s = scale();
    require_same_length(s.size(), v.size(), "apply_inverse_metric");
    return hadamard(s, v);
  }

 private:
  std::variant<Euclidean, DiagonalScaled> repr_;
};

inline ParamVector apply_inverse_metric(const InverseMetric& gamma_inv, const ParamVector& g) {
  return gamma_inv.apply(g);
}

namespace detail {

inline void require_finite(const ParamVector& g, const char* what) {
  if (!g.all_finite()) throw NumericError(std::string(what) + ": non-finite gradient entry");
}

inline void require_rates(double eta, double xi, const char* what) {
  if (!(eta > 0.0)) throw DomainError(std::string(what) + ": eta must be > 0");
  if (!(xi >= 0.0)) throw DomainError(std::string(what) + ": xi must be >= 0");
}

}  // namespace detail

/// Step for the flat embedding: -eta * gamma^{-1} g / (1 + xi * g . gamma^{-1} g).
///
/// The denominator is >= 1, so the step length is bounded by eta/(2 sqrt(xi))
/// for identity gamma however large the gradient.
inline ParamVector induced_update_flat(const ParamVector& g, const InverseMetric& gamma_inv,
                                       double eta, double xi) {
  detail::require_rates(eta, xi, "induced_update_flat");
  detail::require_finite(g, "induced_update_flat");
  ParamVector raised = gamma_inv.apply(g);
  const double denom = 1.0 + xi * dot(g, raised);
  return scaled(-eta / denom, raised);
}

/// Step for the log-loss embedding: -eta * L * gamma^{-1} g / (L^2 + xi * g . gamma^{-1} g).
/// Invariant under (g, L) -> (c g, c L).
inline ParamVector induced_update_log(const ParamVector& g, double loss,
                                      const InverseMetric& gamma_inv, double eta, double xi) {
  detail::require_rates(eta, xi, "induced_update_log");
  if (!(loss > 0.0)) throw DomainError("induced_update_log: loss must be > 0");
  detail::require_finite(g, "induced_update_log");
  ParamVector raised = gamma_inv.apply(g);
  const double denom = loss * loss + xi * dot(g, raised);
  return scaled(-eta * loss / denom, raised);
}

/// Row-major square matrix for the small dense oracles.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  explicit DenseMatrix(std::size_t n) : n_(n), data_(n * n, 0.0) {}

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static DenseMatrix diagonal(const ParamVector& d) {
    DenseMatrix m(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }

  std::size_t size() const noexcept { return n_; }
  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * n_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * n_ + c]; }

  DenseMatrix operator*(const DenseMatrix& rhs) const {
    require_same_length(n_, rhs.n_, "DenseMatrix::operator*");
    DenseMatrix out(n_);
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t k = 0; k < n_; ++k) {
        const double a = (*this)(i, k);
        for (std::size_t j = 0; j < n_; ++j) out(i, j) += a * rhs(k, j);
      }
    }
    return out;
  }

  ParamVector operator*(const ParamVector& v) const {
    require_same_length(n_, v.size(), "DenseMatrix::operator*");
    ParamVector out(n_);
    for (std::size_t i = 0; i < n_; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n_; ++j) acc += (*this)(i, j) * v[j];
      out[i] = acc;
    }
    return out;
  }

  /// Max absolute row sum.
  double norm_inf() const {
    double best = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < n_; ++j) row += std::abs((*this)(i, j));
      best = std::max(best, row);
    }
    return best;
  }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<double> data_;
};

/// True when m is symmetric (to a relative 1e-12) and admits a Cholesky
/// factorization with positive pivots.
inline bool is_spd(const DenseMatrix& m) {
  const std::size_t n = m.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double scale = std::max({1.0, std::abs(m(i, j)), std::abs(m(j, i))});
      if (std::abs(m(i, j) - m(j, i)) > 1e-12 * scale) return false;
    }
  }
  DenseMatrix chol(n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = m(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= chol(j, k) * chol(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    chol(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= chol(i, k) * chol(j, k);
      chol(i, j) = s / chol(j, j);
    }
  }
  return true;
}

/// gamma + g g^T.
inline DenseMatrix pullback_metric_dense(const DenseMatrix& gamma, const ParamVector& g) {
  require_same_length(gamma.size(), g.size(), "pullback_metric_dense");
  if (!is_spd(gamma)) throw DomainError("pullback_metric_dense: gamma is not SPD");
  DenseMatrix out = gamma;
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j = 0; j < g.size(); ++j) out(i, j) += g[i] * g[j];
  }
  return out;
}

/// (gamma + g g^T)^{-1} from gamma^{-1}:
/// gamma^{-1} - (gamma^{-1} g)(gamma^{-1} g)^T / (1 + g^T gamma^{-1} g).
inline DenseMatrix sherman_morrison_inverse(const DenseMatrix& gamma_inv, const ParamVector& g) {
  require_same_length(gamma_inv.size(), g.size(), "sherman_morrison_inverse");
  if (!is_spd(gamma_inv)) throw DomainError("sherman_morrison_inverse: gamma_inv is not SPD");
  const ParamVector raised = gamma_inv * g;
  const double denom = 1.0 + dot(g, raised);
  DenseMatrix out = gamma_inv;
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j = 0; j < g.size(); ++j) out(i, j) -= raised[i] * raised[j] / denom;
  }
  return out;
}

}  // namespace pullback
