#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "pullback/geometry.hpp"
#include "pullback/landscapes.hpp"
#include "pullback/nn.hpp"
#include "pullback/numcore.hpp"
#include "pullback/optim.hpp"

// Property checks run by `pullback-bench selftest`. Each compares the
// production path against an independent route: a pivoted Gauss-Jordan
// inverse, central finite differences, or the baseline optimizer a
// reduction limit should reproduce.

namespace pullback::selftest {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Inverse by Gauss-Jordan elimination with partial pivoting.
inline DenseMatrix gauss_jordan_inverse(const DenseMatrix& a) {
  const std::size_t n = a.size();
  DenseMatrix work = a;
  DenseMatrix inv = DenseMatrix::identity(n);
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(work(r, col)) > std::abs(work(pivot, col))) pivot = r;
    }
    if (work(pivot, col) == 0.0) throw DomainError("gauss_jordan_inverse: singular matrix");
    if (pivot != col) {
      for (std::size_t c = 0; c < n; ++c) {
        std::swap(work(pivot, c), work(col, c));
        std::swap(inv(pivot, c), inv(col, c));
      }
    }
    const double d = work(col, col);
    for (std::size_t c = 0; c < n; ++c) {
      work(col, c) /= d;
      inv(col, c) /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = work(r, col);
      if (f == 0.0) continue;
      for (std::size_t c = 0; c < n; ++c) {
        work(r, c) -= f * work(col, c);
        inv(r, c) -= f * inv(col, c);
      }
    }
  }
  return inv;
}

inline DenseMatrix subtract_identity(DenseMatrix m) {
  for (std::size_t i = 0; i < m.size(); ++i) m(i, i) -= 1.0;
  return m;
}

/// Random (diagonal gamma, gradient) pair of size n.
struct MetricSample {
  ParamVector gamma_diag;
  ParamVector g;
};

inline MetricSample random_metric_sample(RngStream& rng, std::size_t n) {
  MetricSample s{ParamVector(n), ParamVector(n)};
  const double scale = std::pow(10.0, rng.uniform(-2.0, 1.0));
  for (std::size_t i = 0; i < n; ++i) {
    s.gamma_diag[i] = std::pow(10.0, rng.uniform(-1.0, 1.0));
    s.g[i] = scale * rng.normal();
  }
  return s;
}

inline ParamVector reciprocal(const ParamVector& v) {
  ParamVector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = 1.0 / v[i];
  return out;
}

inline CheckResult check_sherman_morrison(std::uint64_t seed, std::size_t trials) {
  RngStream rng(seed);
  double worst = 0.0;
  for (std::size_t k = 0; k < trials; ++k) {
    const std::size_t n = 1 + k % 16;
    const MetricSample s = random_metric_sample(rng, n);
    const DenseMatrix metric = pullback_metric_dense(DenseMatrix::diagonal(s.gamma_diag), s.g);
    const DenseMatrix inv = sherman_morrison_inverse(DenseMatrix::diagonal(reciprocal(s.gamma_diag)), s.g);
    worst = std::max(worst, subtract_identity(inv * metric).norm_inf());
    worst = std::max(worst, max_abs_diff(inv * s.g, gauss_jordan_inverse(metric) * s.g));
  }
  std::ostringstream os;
  os << "max residual " << worst << " over " << trials << " trials";
  return {"sherman-morrison inverse", worst < 1e-10, os.str()};
}

inline CheckResult check_flat_simplification(std::uint64_t seed, std::size_t trials) {
  RngStream rng(seed);
  double worst = 0.0;
  for (std::size_t k = 0; k < trials; ++k) {
    const std::size_t n = 1 + k % 16;
    const MetricSample s = random_metric_sample(rng, n);
    const double eta = std::pow(10.0, rng.uniform(-3.0, 0.0));
    const double xi = std::pow(10.0, rng.uniform(-3.0, 2.0));
    DenseMatrix metric = DenseMatrix::diagonal(s.gamma_diag);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) metric(i, j) += xi * s.g[i] * s.g[j];
    }
    const ParamVector dense = scaled(-eta, gauss_jordan_inverse(metric) * s.g);
    const ParamVector fast =
        induced_update_flat(s.g, InverseMetric::diagonal(reciprocal(s.gamma_diag)), eta, xi);
    worst = std::max(worst, max_abs_diff(dense, fast));
  }
  std::ostringstream os;
  os << "max deviation " << worst;
  return {"flat update equals dense pull-back preconditioning", worst < 1e-10, os.str()};
}

inline CheckResult check_clipping_profile() {
  const double eta = 0.7, xi = 2.5;
  double best = 0.0, best_l = 0.0;
  for (int k = 0; k <= 200000; ++k) {
    const double l = std::pow(10.0, -4.0 + 8.0 * k / 200000.0);
    const double step = std::abs(induced_update_flat(ParamVector{l}, InverseMetric{}, eta, xi)[0]);
    if (step > best) {
      best = step;
      best_l = l;
    }
  }
  const double expect = eta / (2.0 * std::sqrt(xi));
  std::ostringstream os;
  os << "max " << best << " at l=" << best_l << ", expected " << expect << " at "
     << 1.0 / std::sqrt(xi);
  const bool ok = std::abs(best - expect) < 1e-6 && std::abs(best_l - 1.0 / std::sqrt(xi)) < 1e-3;
  return {"smooth clipping profile", ok, os.str()};
}

inline CheckResult check_direction_preserved(std::uint64_t seed, std::size_t trials) {
  RngStream rng(seed);
  double worst = 0.0;
  for (std::size_t k = 0; k < trials; ++k) {
    const std::size_t n = 1 + k % 32;
    ParamVector g(n);
    for (auto& v : g) v = std::pow(10.0, rng.uniform(-3.0, 3.0)) * rng.normal();
    if (norm2(g) == 0.0) continue;
    const ParamVector d = induced_update_flat(g, InverseMetric{}, 0.1, 1.0 / static_cast<double>(n));
    const double cosine = -dot(d, g) / (norm2(d) * norm2(g));
    worst = std::max(worst, std::abs(1.0 - cosine));
  }
  std::ostringstream os;
  os << "max |1 - cos| " << worst;
  return {"steepest-descent direction preserved", worst < 1e-12, os.str()};
}

inline CheckResult check_log_scale_invariance(std::uint64_t seed) {
  RngStream rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    ParamVector g(8);
    for (auto& v : g) v = rng.normal();
    const double loss = std::pow(10.0, rng.uniform(-2.0, 2.0));
    const ParamVector base = induced_update_log(g, loss, InverseMetric{}, 0.1, 0.5);
    for (double c : {1e-6, 1.0, 1e6}) {
      const ParamVector s = induced_update_log(scaled(c, g), c * loss, InverseMetric{}, 0.1, 0.5);
      worst = std::max(worst, max_abs_diff(base, s));
    }
  }
  std::ostringstream os;
  os << "max deviation " << worst;
  return {"log embedding invariant under loss scaling", worst < 1e-9, os.str()};
}

/// Random SPD quadratic 0.5 x^T A x - b^T x + c with diagonal-dominant A.
struct Quadratic {
  DenseMatrix a;
  ParamVector b;
  double c = 1.0;

  double value(const ParamVector& x) const { return 0.5 * dot(x, a * x) - dot(b, x) + c; }
  ParamVector grad(const ParamVector& x) const { return axpy(-1.0, b, a * x); }
};

inline Quadratic random_quadratic(RngStream& rng, std::size_t n) {
  Quadratic q{DenseMatrix(n), ParamVector(n)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      const double v = 0.1 * rng.normal();
      q.a(i, j) = v;
      q.a(j, i) = v;
    }
    q.a(i, i) = 1.0 + rng.uniform();
    q.b[i] = rng.normal();
  }
  return q;
}

inline CheckResult check_reductions(std::uint64_t seed) {
  RngStream rng(seed);
  const Quadratic q = random_quadratic(rng, 6);
  ParamVector start(6);
  for (auto& v : start) v = rng.normal();

  HyperParams h;
  h.eta = 0.05;
  h.mu = 0.9;
  h.xi = 0.0;
  h.beta = 0.9;
  h.lambda = 1e-3;

  double sgd_dev = 0.0;
  {
    ParamVector a = start, b = start;
    Optimizer im({OptimizerKind::ImSgd, h}, 6), sgd({OptimizerKind::Sgd, h}, 6);
    for (int k = 0; k < 100; ++k) {
      im.step(a, q.grad(a), q.value(a));
      sgd.step(b, q.grad(b), q.value(b));
      sgd_dev = std::max(sgd_dev, max_abs_diff(a, b));
    }
  }
  double adamw_dev = 0.0;
  {
    HyperParams hw = h;
    HyperParams hi = h;
    hi.lambda = h.eta * h.lambda;
    ParamVector a = start, b = start;
    Optimizer im({OptimizerKind::ImRms, hi}, 6), adamw({OptimizerKind::AdamW, hw}, 6);
    for (int k = 0; k < 100; ++k) {
      im.step(a, q.grad(a), q.value(a));
      adamw.step(b, q.grad(b), q.value(b));
      adamw_dev = std::max(adamw_dev, max_abs_diff(a, b));
    }
  }
  std::ostringstream os;
  os << "im-sgd vs sgd " << sgd_dev << ", im-rms vs adamw " << adamw_dev;
  return {"xi -> 0 reduces to sgd / adamw", sgd_dev <= 1e-12 && adamw_dev <= 1e-9, os.str()};
}

inline ParamVector central_difference(const std::function<double(const ParamVector&)>& f,
                                      const ParamVector& x, double h) {
  ParamVector g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    ParamVector up = x, down = x;
    up[i] += h;
    down[i] -= h;
    g[i] = (f(up) - f(down)) / (2.0 * h);
  }
  return g;
}

inline double relative_error(const ParamVector& a, const ParamVector& b) {
  const double scale = std::max({norm2(a), norm2(b), 1e-12});
  return norm2(axpy(-1.0, b, a)) / scale;
}

inline CheckResult check_mlp_gradients(std::uint64_t seed) {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    RngStream rng(derive_seed(seed, s));
    nn::MlpSpec spec;
    spec.layer_widths = {3, 1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(3)};
    spec.loss = s % 2 == 0 ? nn::OutputLoss::L2 : nn::OutputLoss::SoftmaxCrossEntropy;
    if (spec.loss == nn::OutputLoss::SoftmaxCrossEntropy) spec.layer_widths.back() += 1;
    const ParamVector params = nn::init_params(spec, rng);
    nn::Batch batch;
    batch.inputs = nn::Matrix(5, 3);
    for (auto& v : batch.inputs.data) v = rng.normal();
    if (spec.loss == nn::OutputLoss::L2) {
      batch.targets = nn::Matrix(5, spec.output_dim());
      for (auto& v : batch.targets.data) v = rng.normal();
    } else {
      for (int k = 0; k < 5; ++k) batch.labels.push_back(rng.below(spec.output_dim()));
    }
    const auto analytic = nn::loss_and_grad(spec, params, batch).second;
    const auto numeric = central_difference(
        [&](const ParamVector& p) { return nn::forward(spec, p, batch).first; }, params, 1e-6);
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  std::ostringstream os;
  os << "max relative error " << worst;
  return {"mlp backprop matches finite differences", worst < 1e-5, os.str()};
}

inline CheckResult check_landscape_gradients(std::uint64_t seed) {
  RngStream rng(seed);
  double worst = 0.0;
  for (auto name : kLandscapeNames) {
    const Landscape l = make_landscape(name);
    for (int k = 0; k < 100; ++k) {
      const ParamVector x{rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0)};
      worst = std::max(worst, relative_error(l.grad(x), central_difference(l.eval, x, 1e-6)));
    }
  }
  std::ostringstream os;
  os << "max relative error " << worst;
  return {"landscape gradients match finite differences", worst < 1e-6, os.str()};
}

inline std::vector<CheckResult> run_all(std::uint64_t seed = 20240601) {
  return {check_sherman_morrison(seed, 1000),
          check_flat_simplification(seed + 1, 1000),
          check_direction_preserved(seed + 2, 1000),
          check_clipping_profile(),
          check_log_scale_invariance(seed + 3),
          check_reductions(seed + 4),
          check_mlp_gradients(seed + 5),
          check_landscape_gradients(seed + 6)};
}

}  // namespace pullback::selftest
