#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pullback/errors.hpp"
#include "pullback/geometry.hpp"
#include "pullback/numcore.hpp"

namespace pullback {

enum class OptimizerKind { Sgd, RmsProp, Adam, AdamW, ImSgd, ImLogSgd, ImRms };

inline constexpr std::array<OptimizerKind, 7> kAllOptimizerKinds = {
    OptimizerKind::Sgd,   OptimizerKind::RmsProp,  OptimizerKind::Adam, OptimizerKind::AdamW,
    OptimizerKind::ImSgd, OptimizerKind::ImLogSgd, OptimizerKind::ImRms};

inline std::string_view to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::Sgd: return "sgd";
    case OptimizerKind::RmsProp: return "rmsprop";
    case OptimizerKind::Adam: return "adam";
    case OptimizerKind::AdamW: return "adamw";
    case OptimizerKind::ImSgd: return "im-sgd";
    case OptimizerKind::ImLogSgd: return "im-log-sgd";
    case OptimizerKind::ImRms: return "im-rms";
  }
  return "?";
}

inline std::string valid_optimizer_names() {
  std::string out;
  for (auto k : kAllOptimizerKinds) {
    if (!out.empty()) out += ", ";
    out += to_string(k);
  }
  return out;
}

inline OptimizerKind parse_optimizer_kind(std::string_view name) {
  for (auto k : kAllOptimizerKinds) {
    if (to_string(k) == name) return k;
  }
  throw UsageError("unknown optimizer '" + std::string(name) +
                   "'; valid kinds: " + valid_optimizer_names());
}

/// True for the induced-metric optimizers (carry the scalar metric EMA).
inline bool is_induced(OptimizerKind kind) {
  return kind == OptimizerKind::ImSgd || kind == OptimizerKind::ImLogSgd ||
         kind == OptimizerKind::ImRms;
}

inline bool uses_second_moment(OptimizerKind kind) {
  return kind == OptimizerKind::RmsProp || kind == OptimizerKind::Adam ||
         kind == OptimizerKind::AdamW || kind == OptimizerKind::ImRms;
}

enum class GammaMode { Identity, RmsImplied };

/// Optimizer hyperparameters.
///
/// `mu` doubles as Adam's beta1 and `beta2` as the second-moment decay for
/// Adam/AdamW/RMSprop and the RMSprop-implied metric. An unset `xi` resolves
/// to 1/N for an N-parameter problem.
struct HyperParams {
  double eta = 1e-2;
  double mu = 0.9;
  std::optional<double> xi;
  double beta = 0.9;
  double lambda = 0.0;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  /// Throws UsageError naming the first out-of-range field.
  void validate() const {
    auto fail = [](const char* field, const char* rule) {
      throw UsageError(std::string("hyperparameter '") + field + "' must be " + rule);
    };
    if (!(eta > 0.0) || !std::isfinite(eta)) fail("eta", "> 0");
    if (!(mu >= 0.0 && mu < 1.0)) fail("mu", "in [0, 1)");
    if (xi && (!(*xi >= 0.0) || !std::isfinite(*xi))) fail("xi", ">= 0");
    if (!(beta >= 0.0 && beta <= 1.0)) fail("beta", "in [0, 1]");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail("lambda", ">= 0");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2", "in [0, 1)");
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) fail("epsilon", "> 0");
  }

  double xi_for(std::size_t num_params) const {
    return xi.value_or(num_params > 0 ? 1.0 / static_cast<double>(num_params) : 1.0);
  }

  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Sgd;
  std::uint64_t t = 0;
  ParamVector m;
  double v = 0.0;
  std::optional<ParamVector> rms;

  static OptimizerState initial(OptimizerKind kind, std::size_t n) {
    OptimizerState s;
    s.kind = kind;
    s.m = ParamVector(n);
    if (uses_second_moment(kind)) s.rms = ParamVector(n);
    return s;
  }

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

/// Per-step diagnostics. `r` is the effective learning-rate factor.
struct StepTrace {
  double s = 0.0;
  double v_hat = 0.0;
  double r = 1.0;
  double loss = 0.0;

  friend bool operator==(const StepTrace&, const StepTrace&) = default;
};

struct StepResult {
  OptimizerState state;
  ParamVector theta;
  StepTrace trace;
};

namespace detail {

inline double bias_correction(double decay, std::uint64_t t) {
  return 1.0 - std::pow(decay, static_cast<double>(t));
}

inline void check_step_inputs(const OptimizerState& state, const ParamVector& theta,
                              const ParamVector& g) {
  require_same_length(theta.size(), g.size(), "optimizer step");
  require_same_length(theta.size(), state.m.size(), "optimizer state");
  if (!g.all_finite()) throw NumericError("optimizer step: non-finite gradient");
}

// m <- mu m + (1 - mu) g, returned bias-corrected.
inline ParamVector update_momentum(ParamVector& m, const ParamVector& g, double mu,
                                   std::uint64_t t) {
  const double corr = bias_correction(mu, t);
  ParamVector m_hat(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    m[i] = mu * m[i] + (1.0 - mu) * g[i];
    m_hat[i] = m[i] / corr;
  }
  return m_hat;
}

// theta - eta r step - lambda theta
inline ParamVector descend(const ParamVector& theta, const ParamVector& step, double eta,
                           double r, double lambda) {
  ParamVector out(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    out[i] = theta[i] - eta * r * step[i] - lambda * theta[i];
  }
  return out;
}

enum class Embedding { Flat, Log };

inline StepResult induced_step(OptimizerState state, const ParamVector& theta,
                               const ParamVector& g, double loss, const HyperParams& h,
                               GammaMode gamma_mode, Embedding embedding);

}  // namespace detail

/// Refreshes the second-moment EMA with g and returns the RMSprop-implied
/// inverse metric 1/(sqrt(rms_hat) + epsilon).
///
/// `state.t` is the index of the current step (already incremented by the
/// caller); t = 0 is treated as t = 1.
inline std::pair<OptimizerState, InverseMetric> rms_implied_inverse_metric(
    OptimizerState state, const ParamVector& g, const HyperParams& h) {
  if (!state.rms) throw UsageError("rms_implied_inverse_metric: state has no second moment");
  ParamVector& rms = *state.rms;
  require_same_length(rms.size(), g.size(), "rms_implied_inverse_metric");
  const double corr = detail::bias_correction(h.beta2, std::max<std::uint64_t>(state.t, 1));
  ParamVector scale(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    rms[i] = h.beta2 * rms[i] + (1.0 - h.beta2) * g[i] * g[i];
    scale[i] = 1.0 / (std::sqrt(rms[i] / corr) + h.epsilon);
  }
  return {std::move(state), InverseMetric::diagonal(std::move(scale))};
}

inline StepResult detail::induced_step(OptimizerState state, const ParamVector& theta,
                                       const ParamVector& g, double loss,
                                       const HyperParams& h, GammaMode gamma_mode,
                                       Embedding embedding) {
  check_step_inputs(state, theta, g);
  if (embedding == Embedding::Log && !(loss > 0.0)) {
    throw DomainError("log-loss embedding requires loss > 0");
  }
  if (gamma_mode == GammaMode::RmsImplied && !state.rms) {
    throw UsageError("RMS-implied metric requires a second-moment buffer");
  }
  const double xi = h.xi_for(theta.size());

  state.t += 1;
  InverseMetric gamma_inv;
  if (gamma_mode == GammaMode::RmsImplied) {
    auto [next, metric] = rms_implied_inverse_metric(std::move(state), g, h);
    state = std::move(next);
    gamma_inv = std::move(metric);
  }

  StepTrace trace;
  trace.loss = loss;
  const ParamVector g_raised = gamma_inv.apply(g);
  trace.s = xi * dot(g, g_raised);
  state.v = h.beta * state.v + (1.0 - h.beta) * trace.s;
  // beta = 1 disables the EMA; the bias-correction divisor would be zero.
  trace.v_hat = h.beta == 1.0 ? trace.s : state.v / bias_correction(h.beta, state.t);
  if (embedding == Embedding::Flat) {
    trace.r = 1.0 / (1.0 + std::abs(trace.v_hat));
  } else {
    trace.r = loss / (loss * loss + std::abs(trace.v_hat));
  }

  const ParamVector m_hat = gamma_inv.apply(update_momentum(state.m, g, h.mu, state.t));
  ParamVector next_theta = descend(theta, m_hat, h.eta, trace.r, h.lambda);
  return {std::move(state), std::move(next_theta), trace};
}

/// One step of the flat-embedding induced-metric optimizer:
/// EMA estimate of xi * g.gamma^{-1}g, r = 1/(1 + |v_hat|), EMA momentum
/// preconditioned by gamma^{-1}, decoupled weight decay.
inline StepResult step_alg1(OptimizerState state, const ParamVector& theta, const ParamVector& g,
                            double loss, const HyperParams& h, GammaMode gamma_mode) {
  return detail::induced_step(std::move(state), theta, g, loss, h, gamma_mode,
                              detail::Embedding::Flat);
}

/// As step_alg1 with the log-loss embedding: r = L/(L^2 + |v_hat|).
inline StepResult step_alg2(OptimizerState state, const ParamVector& theta, const ParamVector& g,
                            double loss, const HyperParams& h, GammaMode gamma_mode) {
  return detail::induced_step(std::move(state), theta, g, loss, h, gamma_mode,
                              detail::Embedding::Log);
}

/// Reference optimizers.
///
///   sgd      EMA momentum with bias correction, theta -= eta m_hat + lambda theta
///   rmsprop  theta -= eta g/(sqrt(rms) + eps) + lambda theta (no bias correction)
///   adam     coupled L2 (g += lambda theta), bias-corrected moments
///   adamw    Adam moments, decay scaled by eta: theta -= eta (u + lambda theta)
inline std::pair<OptimizerState, ParamVector> step_baseline(OptimizerKind kind,
                                                            OptimizerState state,
                                                            const ParamVector& theta,
                                                            const ParamVector& g,
                                                            const HyperParams& h) {
  if (is_induced(kind)) throw UsageError("step_baseline: not a baseline optimizer");
  if (state.kind != kind) {
    throw UsageError("step_baseline: state belongs to '" + std::string(to_string(state.kind)) +
                     "', not '" + std::string(to_string(kind)) + "'");
  }
  detail::check_step_inputs(state, theta, g);
  if (uses_second_moment(kind) && !state.rms) {
    throw UsageError("step_baseline: state has no second-moment buffer");
  }
  state.t += 1;
  const std::size_t n = theta.size();

  switch (kind) {
    case OptimizerKind::Sgd: {
      const ParamVector m_hat = detail::update_momentum(state.m, g, h.mu, state.t);
      return {std::move(state), detail::descend(theta, m_hat, h.eta, 1.0, h.lambda)};
    }
    case OptimizerKind::RmsProp: {
      ParamVector& rms = *state.rms;
      ParamVector out(n);
      for (std::size_t i = 0; i < n; ++i) {
        rms[i] = h.beta2 * rms[i] + (1.0 - h.beta2) * g[i] * g[i];
        out[i] = theta[i] - h.eta * g[i] / (std::sqrt(rms[i]) + h.epsilon) - h.lambda * theta[i];
      }
      return {std::move(state), std::move(out)};
    }
    case OptimizerKind::Adam:
    case OptimizerKind::AdamW: {
      const bool decoupled = kind == OptimizerKind::AdamW;
      const double c1 = detail::bias_correction(h.mu, state.t);
      const double c2 = detail::bias_correction(h.beta2, state.t);
      ParamVector& rms = *state.rms;
      ParamVector out(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = decoupled ? g[i] : g[i] + h.lambda * theta[i];
        state.m[i] = h.mu * state.m[i] + (1.0 - h.mu) * gi;
        rms[i] = h.beta2 * rms[i] + (1.0 - h.beta2) * gi * gi;
        const double u = (state.m[i] / c1) / (std::sqrt(rms[i] / c2) + h.epsilon);
        out[i] = theta[i] - h.eta * u;
        if (decoupled) out[i] -= h.eta * h.lambda * theta[i];
      }
      return {std::move(state), std::move(out)};
    }
    default:
      break;
  }
  throw UsageError("step_baseline: unsupported kind");
}

/// (t, r_t) series with t counted from 1.
inline std::vector<std::pair<std::uint64_t, double>> effective_lr_trace(
    std::span<const StepTrace> run) {
  std::vector<std::pair<std::uint64_t, double>> out;
  out.reserve(run.size());
  for (std::size_t i = 0; i < run.size(); ++i) out.emplace_back(i + 1, run[i].r);
  return out;
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::ImSgd;
  HyperParams hyper;

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

/// Stateful wrapper dispatching on kind; owns its state exclusively.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::size_t num_params)
      : config_(std::move(config)), state_(OptimizerState::initial(config_.kind, num_params)) {
    config_.hyper.validate();
    if (!config_.hyper.xi) config_.hyper.xi = config_.hyper.xi_for(num_params);
  }

  const OptimizerConfig& config() const noexcept { return config_; }
  const OptimizerState& state() const noexcept { return state_; }

  /// Updates theta in place. `loss` is the loss at theta (used by the log
  /// embedding and recorded in the trace).
  StepTrace step(ParamVector& theta, const ParamVector& g, double loss) {
    const HyperParams& h = config_.hyper;
    switch (config_.kind) {
      case OptimizerKind::ImSgd:
      case OptimizerKind::ImRms:
      case OptimizerKind::ImLogSgd: {
        const GammaMode mode =
            config_.kind == OptimizerKind::ImRms ? GammaMode::RmsImplied : GammaMode::Identity;
        StepResult res = config_.kind == OptimizerKind::ImLogSgd
                             ? step_alg2(std::move(state_), theta, g, loss, h, mode)
                             : step_alg1(std::move(state_), theta, g, loss, h, mode);
        state_ = std::move(res.state);
        theta = std::move(res.theta);
        return res.trace;
      }
      default: {
        auto [state, next] = step_baseline(config_.kind, std::move(state_), theta, g, h);
        state_ = std::move(state);
        theta = std::move(next);
        StepTrace trace;
        trace.loss = loss;
        return trace;
      }
    }
  }

 private:
  OptimizerConfig config_;
  OptimizerState state_;
};

// JSON form: {kind, eta, mu, xi, beta, lambda, beta2, epsilon}. Missing
// fields take their defaults; xi may be null (resolve to 1/N). Unknown keys
// are rejected.

inline void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = nlohmann::json{{"kind", std::string(to_string(c.kind))},
                     {"eta", c.hyper.eta},
                     {"mu", c.hyper.mu},
                     {"xi", c.hyper.xi ? nlohmann::json(*c.hyper.xi) : nlohmann::json(nullptr)},
                     {"beta", c.hyper.beta},
                     {"lambda", c.hyper.lambda},
                     {"beta2", c.hyper.beta2},
                     {"epsilon", c.hyper.epsilon}};
}

namespace detail {

inline double json_number(const nlohmann::json& j, const std::string& key) {
  if (!j.is_number()) throw UsageError("field '" + key + "' must be a number");
  return j.get<double>();
}

}  // namespace detail

inline void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  if (!j.is_object()) throw UsageError("optimizer config must be a JSON object");
  OptimizerConfig out;
  for (const auto& [key, value] : j.items()) {
    if (key == "kind") {
      if (!value.is_string()) throw UsageError("field 'kind' must be a string");
      out.kind = parse_optimizer_kind(value.get<std::string>());
    } else if (key == "eta") {
      out.hyper.eta = detail::json_number(value, key);
    } else if (key == "mu") {
      out.hyper.mu = detail::json_number(value, key);
    } else if (key == "xi") {
      if (value.is_null()) {
        out.hyper.xi.reset();
      } else {
        out.hyper.xi = detail::json_number(value, key);
      }
    } else if (key == "beta") {
      out.hyper.beta = detail::json_number(value, key);
    } else if (key == "lambda") {
      out.hyper.lambda = detail::json_number(value, key);
    } else if (key == "beta2") {
      out.hyper.beta2 = detail::json_number(value, key);
    } else if (key == "epsilon") {
      out.hyper.epsilon = detail::json_number(value, key);
    } else {
      throw UsageError("unknown optimizer config key '" + key + "'");
    }
  }
  out.hyper.validate();
  c = std::move(out);
}

}  // namespace pullback
