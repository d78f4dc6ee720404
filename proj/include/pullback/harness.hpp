#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pullback/errors.hpp"
#include "pullback/landscapes.hpp"
#include "pullback/nn.hpp"
#include "pullback/numcore.hpp"
#include "pullback/optim.hpp"

namespace pullback {

/// Loss above this (or non-finite) marks a run as diverged.
inline constexpr double kDivergenceThreshold = 1e12;

/// Offset added to the zero-minimum landscapes for the log embedding.
inline constexpr double kDefaultLogOffset = 1e-12;

/// One run: a landscape (low-dimensional) or an nn task ("poly" or "blobs").
struct RunConfig {
  std::string landscape;
  std::string task;
  OptimizerConfig optimizer;
  std::uint64_t max_iters = 100000;  // iterations, or epochs for nn tasks
  double tol = 1e-10;
  std::uint64_t seed = 0;
  std::size_t batch_size = 256;
  double log_offset = kDefaultLogOffset;
  std::optional<std::vector<double>> start;
  /// Keep every k-th step in the trace; 0 keeps none.
  std::uint64_t trace_every = 1;

  // nn tasks
  std::size_t poly_degree = 6;
  std::size_t samples = 2560;
  std::uint64_t data_seed = 0;
  std::size_t classes = 3;
  std::vector<std::size_t> hidden = {64, 64};

  bool is_nn() const noexcept { return !task.empty(); }

  void validate() const {
    if (landscape.empty() == task.empty()) {
      throw UsageError("run config: set exactly one of 'landscape' or 'task'");
    }
    if (!landscape.empty()) (void)make_landscape(landscape);
    if (!task.empty() && task != "poly" && task != "blobs") {
      throw UsageError("unknown task '" + task + "'; valid tasks: poly, blobs");
    }
    if (!is_nn() && max_iters < 1) throw UsageError("field 'max_iters' must be >= 1");
    if (!(tol > 0.0)) throw UsageError("field 'tol' must be > 0");
    if (!(log_offset > 0.0)) throw UsageError("field 'log_offset' must be > 0");
    if (batch_size < 1) throw UsageError("field 'batch_size' must be >= 1");
    if (samples < 2) throw UsageError("field 'samples' must be >= 2");
    if (task == "blobs" && classes < 2) throw UsageError("field 'classes' must be >= 2");
    if (hidden.empty()) throw UsageError("field 'hidden' needs at least one layer");
    optimizer.hyper.validate();
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

struct TracePoint {
  std::uint64_t step = 0;
  double loss = 0.0;
  double r = 1.0;
  double grad_norm = 0.0;

  friend bool operator==(const TracePoint&, const TracePoint&) = default;
};

struct RunRecord {
  std::uint64_t run_id = 0;
  RunConfig config;
  bool converged = false;
  bool diverged = false;
  std::string error;
  /// Steps taken (iterations or epochs).
  std::uint64_t iterations = 0;
  std::optional<std::uint64_t> iters_to_converge;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> final_theta;
  double wall_time_seconds = 0.0;
  std::vector<TracePoint> trace;

  // low-dimensional
  double min_value = 0.0;
  double offset = 0.0;
  double final_gap = std::numeric_limits<double>::quiet_NaN();
  double final_distance_to_minimum = std::numeric_limits<double>::quiet_NaN();

  // nn
  std::vector<double> val_losses;       // index = epoch (0 = initialization)
  std::vector<double> best_val_series;  // running minimum of val_losses
  double best_val_loss = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t best_epoch = 0;
  std::optional<double> final_val_accuracy;

  bool failed() const noexcept { return diverged || !error.empty(); }
};

namespace detail {

inline bool is_divergent(double loss) {
  return !std::isfinite(loss) || loss > kDivergenceThreshold;
}

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace detail

/// Landscape a run uses: the log embedding gets the offset copy.
inline Landscape landscape_for(const RunConfig& cfg) {
  Landscape l = make_landscape(cfg.landscape);
  if (cfg.optimizer.kind == OptimizerKind::ImLogSgd) l = offset_loss(std::move(l), cfg.log_offset);
  return l;
}

/// Optimizes a benchmark landscape until loss - min_value <= tol or
/// max_iters steps. Non-finite or huge losses end the run as diverged.
inline RunRecord run_lowdim(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.is_nn()) throw UsageError("run_lowdim: config names an nn task");
  const Landscape land = landscape_for(cfg);
  RunRecord rec;
  rec.config = cfg;
  rec.min_value = land.min_value;
  rec.offset = land.offset;

  ParamVector theta = cfg.start ? ParamVector(*cfg.start) : land.default_start;
  require_same_length(theta.size(), land.dim, "run_lowdim start");
  Optimizer opt(cfg.optimizer, theta.size());

  auto t0 = detail::Clock::now();
  double timed_offset = 0.0;
  std::uint64_t it = 0;
  double loss = 0.0;
  try {
    for (;; ++it) {
      loss = land.eval(theta);
      if (detail::is_divergent(loss)) {
        rec.diverged = true;
        break;
      }
      if (loss - land.min_value <= cfg.tol) {
        rec.converged = true;
        rec.iters_to_converge = it;
        break;
      }
      if (it == cfg.max_iters) break;
      const ParamVector g = land.grad(theta);
      if (!g.all_finite()) {
        rec.diverged = true;
        break;
      }
      const StepTrace st = opt.step(theta, g, loss);
      if (cfg.trace_every && it % cfg.trace_every == 0) {
        rec.trace.push_back({it, loss, st.r, norm2(g)});
      }
      // The first step is warm-up and excluded from the wall time.
      if (it == 0) timed_offset = detail::seconds_since(t0);
    }
  } catch (const std::exception& e) {
    rec.error = e.what();
  }
  rec.wall_time_seconds = std::max(0.0, detail::seconds_since(t0) - timed_offset);
  rec.iterations = it;
  rec.final_loss = loss;
  rec.final_gap = loss - land.min_value;
  rec.final_theta = theta.values();
  rec.final_distance_to_minimum = land.distance_to_minimum(theta);
  return rec;
}

/// Network shape and data split for an nn task config.
struct NnProblem {
  nn::MlpSpec spec;
  nn::Split data;
};

inline NnProblem make_nn_problem(const RunConfig& cfg) {
  NnProblem p;
  RngStream data_rng(cfg.data_seed);
  if (cfg.task == "poly") {
    nn::PolyTask task;
    task.degree = cfg.poly_degree;
    task.seed = derive_seed(cfg.data_seed, 7);
    p.data = nn::gen_poly_data(task, cfg.samples, data_rng);
    p.spec.layer_widths.push_back(task.num_vars);
    p.spec.loss = nn::OutputLoss::L2;
  } else if (cfg.task == "blobs") {
    nn::BlobsTask task;
    task.classes = cfg.classes;
    p.data = nn::gen_blobs_classification(task, cfg.samples, data_rng);
    p.spec.layer_widths.push_back(task.dim);
    p.spec.loss = nn::OutputLoss::SoftmaxCrossEntropy;
  } else {
    throw UsageError("unknown task '" + cfg.task + "'");
  }
  for (auto h : cfg.hidden) p.spec.layer_widths.push_back(h);
  p.spec.layer_widths.push_back(cfg.task == "poly" ? 1 : cfg.classes);
  p.spec.validate();
  return p;
}

/// Mini-batch training for max_iters epochs with per-epoch reshuffling.
/// Tracks validation loss per epoch (epoch 0 = initialization) and the best
/// epoch. Trace points are per epoch: mean train loss, last r_t, mean
/// gradient norm.
inline RunRecord run_nn(const RunConfig& cfg) {
  cfg.validate();
  if (!cfg.is_nn()) throw UsageError("run_nn: config names a landscape");
  const NnProblem prob = make_nn_problem(cfg);
  RunRecord rec;
  rec.config = cfg;

  RngStream init_rng(derive_seed(cfg.seed, 1));
  RngStream shuffle_rng(derive_seed(cfg.seed, 2));
  ParamVector theta = nn::init_params(prob.spec, init_rng);
  Optimizer opt(cfg.optimizer, theta.size());

  auto eval_val = [&] { return nn::forward(prob.spec, theta, prob.data.val).first; };
  auto note_val = [&](double v, std::uint64_t epoch) {
    rec.val_losses.push_back(v);
    if (rec.best_val_series.empty() || v < rec.best_val_loss) {
      rec.best_val_loss = v;
      rec.best_epoch = epoch;
    }
    rec.best_val_series.push_back(rec.best_val_loss);
  };

  const std::size_t n_train = prob.data.train.size();
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = std::min(cfg.batch_size, n_train);

  auto t0 = detail::Clock::now();
  double timed_offset = 0.0;
  bool first_step = true;
  std::uint64_t epoch = 0;
  try {
    const double v0 = eval_val();
    if (detail::is_divergent(v0)) {
      rec.diverged = true;
    } else {
      note_val(v0, 0);
      rec.final_loss = nn::forward(prob.spec, theta, prob.data.train).first;
    }
    while (!rec.diverged && epoch < cfg.max_iters) {
      ++epoch;
      shuffle_rng.shuffle(order);
      double loss_sum = 0.0, gnorm_sum = 0.0, last_r = 1.0;
      std::size_t steps = 0;
      for (std::size_t first = 0; first < n_train; first += bs) {
        const std::size_t count = std::min(bs, n_train - first);
        const nn::Batch mb =
            prob.data.train.gather(std::span<const std::size_t>(order).subspan(first, count));
        auto [loss, grad] = nn::loss_and_grad(prob.spec, theta, mb);
        if (detail::is_divergent(loss) || !grad.all_finite()) {
          rec.diverged = true;
          break;
        }
        const StepTrace st = opt.step(theta, grad, loss);
        if (first_step) {
          timed_offset = detail::seconds_since(t0);
          first_step = false;
        }
        loss_sum += loss;
        gnorm_sum += norm2(grad);
        last_r = st.r;
        ++steps;
      }
      if (rec.diverged) break;
      const double v = eval_val();
      if (detail::is_divergent(v)) {
        rec.diverged = true;
        break;
      }
      note_val(v, epoch);
      rec.final_loss = loss_sum / static_cast<double>(steps);
      if (cfg.trace_every && epoch % cfg.trace_every == 0) {
        rec.trace.push_back({epoch, rec.final_loss, last_r, gnorm_sum / static_cast<double>(steps)});
      }
    }
    if (!rec.diverged && prob.spec.loss == nn::OutputLoss::SoftmaxCrossEntropy) {
      rec.final_val_accuracy = nn::accuracy(prob.spec, theta, prob.data.val);
    }
  } catch (const std::exception& e) {
    rec.error = e.what();
  }
  rec.wall_time_seconds = std::max(0.0, detail::seconds_since(t0) - timed_offset);
  rec.iterations = epoch;
  rec.final_theta = theta.values();
  return rec;
}

inline RunRecord run(const RunConfig& cfg) { return cfg.is_nn() ? run_nn(cfg) : run_lowdim(cfg); }

/// `count` points spaced evenly in log10 between lo and hi inclusive.
inline std::vector<double> log_grid(double lo, double hi, std::size_t count) {
  if (count == 1) return {lo};
  std::vector<double> out;
  const double a = std::log10(lo), b = std::log10(hi);
  for (std::size_t k = 0; k < count; ++k) {
    const double e = a + (b - a) * static_cast<double>(k) / static_cast<double>(count - 1);
    out.push_back(std::pow(10.0, e));
  }
  return out;
}

/// Hyperparameter search. Axes are shared by every optimizer; an empty axis
/// means "use the base config's value". xi and beta only vary for the
/// induced-metric optimizers. With random_runs > 0, each (target,
/// optimizer) pair instead draws that many configurations: log-uniform in
/// [min, max] of the eta/xi/lambda axes, uniform for mu/beta.
struct SweepSpec {
  RunConfig base;
  std::vector<std::string> targets;
  std::vector<OptimizerKind> optimizers;
  std::vector<double> eta, xi, mu, beta, lambda;
  std::size_t random_runs = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (targets.empty()) throw UsageError("sweep: 'targets' must not be empty");
    if (optimizers.empty()) throw UsageError("sweep: 'optimizers' must not be empty");
    for (const auto& t : targets) {
      RunConfig c = base;
      if (t == "poly" || t == "blobs") {
        c.task = t;
        c.landscape.clear();
      } else {
        c.landscape = t;
        c.task.clear();
      }
      c.validate();
    }
    auto positive = [](const std::vector<double>& axis, const char* name) {
      for (double v : axis) {
        if (!(v > 0.0)) throw UsageError(std::string("sweep axis '") + name + "' must be > 0");
      }
    };
    positive(eta, "eta");
    for (double v : xi) {
      if (!(v >= 0.0)) throw UsageError("sweep axis 'xi' must be >= 0");
    }
    for (double v : mu) {
      if (!(v >= 0.0 && v < 1.0)) throw UsageError("sweep axis 'mu' must be in [0, 1)");
    }
    for (double v : beta) {
      if (!(v >= 0.0 && v <= 1.0)) throw UsageError("sweep axis 'beta' must be in [0, 1]");
    }
    for (double v : lambda) {
      if (!(v >= 0.0)) throw UsageError("sweep axis 'lambda' must be >= 0");
    }
    if (random_runs > 0) {
      positive(xi, "xi");
      positive(lambda, "lambda");
    }
  }
};

namespace detail {

inline RunConfig with_target(RunConfig c, const std::string& target) {
  if (target == "poly" || target == "blobs") {
    c.task = target;
    c.landscape.clear();
  } else {
    c.landscape = target;
    c.task.clear();
  }
  return c;
}

template <typename F>
void for_axis(const std::vector<double>& axis, double fallback, F&& f) {
  if (axis.empty()) {
    f(fallback);
  } else {
    for (double v : axis) f(v);
  }
}

inline double draw_log(RngStream& rng, const std::vector<double>& axis, double fallback) {
  if (axis.empty()) return fallback;
  const auto [lo, hi] = std::minmax_element(axis.begin(), axis.end());
  return std::pow(10.0, rng.uniform(std::log10(*lo), std::log10(*hi)));
}

inline double draw_lin(RngStream& rng, const std::vector<double>& axis, double fallback) {
  if (axis.empty()) return fallback;
  const auto [lo, hi] = std::minmax_element(axis.begin(), axis.end());
  return rng.uniform(*lo, *hi);
}

}  // namespace detail

/// Default low-dimensional protocol: all five landscapes, the optimizers
/// compared there, eta on 1e-4..1 and xi on 1e-3..1e3 (one point per
/// decade), mu in {0, 0.9, 0.99}, beta = 1 (full-batch metric), 1e5 steps.
inline SweepSpec default_lowdim_sweep() {
  SweepSpec s;
  s.base.landscape = "rosenbrock";
  s.base.max_iters = 100000;
  s.base.trace_every = 0;
  s.base.optimizer.hyper.beta = 1.0;
  s.base.optimizer.hyper.lambda = 0.0;
  s.targets.assign(std::begin(kLandscapeNames), std::end(kLandscapeNames));
  s.optimizers = {OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::ImSgd,
                  OptimizerKind::ImLogSgd, OptimizerKind::ImRms};
  s.eta = log_grid(1e-4, 1.0, 5);
  s.xi = log_grid(1e-3, 1e3, 7);
  s.mu = {0.0, 0.9, 0.99};
  return s;
}

/// Default desk-scale regression protocol: degree-6 polynomial in four
/// variables, [4, 64, 64, 1] GELU net, batch 256, 200 epochs, every
/// optimizer kind, eta in {1e-3, 3e-3, ..., 0.3}, xi in {1e-4, 1e-2},
/// mu = 0.9, beta = 0.9, no weight decay.
inline SweepSpec default_regression_sweep() {
  SweepSpec s;
  s.base.task = "poly";
  s.base.max_iters = 200;
  s.base.trace_every = 1;
  s.base.batch_size = 256;
  s.base.optimizer.hyper.mu = 0.9;
  s.base.optimizer.hyper.beta = 0.9;
  s.base.optimizer.hyper.lambda = 0.0;
  s.targets = {"poly"};
  s.optimizers.assign(kAllOptimizerKinds.begin(), kAllOptimizerKinds.end());
  s.eta = {1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1};
  s.xi = {1e-4, 1e-2};
  return s;
}

/// Deterministic enumeration of every run config in a sweep.
inline std::vector<RunConfig> expand_sweep(const SweepSpec& spec) {
  spec.validate();
  std::vector<RunConfig> out;
  const HyperParams& b = spec.base.optimizer.hyper;
  for (std::size_t ti = 0; ti < spec.targets.size(); ++ti) {
    const RunConfig base = detail::with_target(spec.base, spec.targets[ti]);
    for (std::size_t oi = 0; oi < spec.optimizers.size(); ++oi) {
      const OptimizerKind kind = spec.optimizers[oi];
      const bool induced = is_induced(kind);
      if (spec.random_runs > 0) {
        RngStream rng(derive_seed(spec.seed, ti * 1000 + static_cast<std::uint64_t>(kind)));
        for (std::size_t k = 0; k < spec.random_runs; ++k) {
          RunConfig c = base;
          c.optimizer.kind = kind;
          HyperParams& h = c.optimizer.hyper;
          h.eta = detail::draw_log(rng, spec.eta, b.eta);
          const double xi = detail::draw_log(rng, spec.xi, b.xi_for(2));
          h.mu = detail::draw_lin(rng, spec.mu, b.mu);
          const double beta = detail::draw_lin(rng, spec.beta, b.beta);
          h.lambda = detail::draw_log(rng, spec.lambda, b.lambda);
          if (induced) {
            if (!spec.xi.empty()) h.xi = xi;
            h.beta = beta;
          }
          out.push_back(std::move(c));
        }
        continue;
      }
      const std::vector<double> no_axis;
      detail::for_axis(spec.eta, b.eta, [&](double eta) {
        detail::for_axis(induced ? spec.xi : no_axis, -1.0, [&](double xi) {
          detail::for_axis(spec.mu, b.mu, [&](double mu) {
            detail::for_axis(induced ? spec.beta : no_axis, b.beta, [&](double beta) {
              detail::for_axis(spec.lambda, b.lambda, [&](double lambda) {
                RunConfig c = base;
                c.optimizer.kind = kind;
                HyperParams& h = c.optimizer.hyper;
                h.eta = eta;
                if (xi >= 0.0) h.xi = xi;
                h.mu = mu;
                h.beta = beta;
                h.lambda = lambda;
                out.push_back(std::move(c));
              });
            });
          });
        });
      });
    }
  }
  return out;
}

/// Worker count: requested parallelism capped by PULLBACK_OPTIM_THREADS.
inline std::size_t effective_workers(std::size_t parallelism, std::size_t jobs) {
  std::size_t n = std::max<std::size_t>(parallelism, 1);
  if (const char* env = std::getenv("PULLBACK_OPTIM_THREADS")) {
    char* end = nullptr;
    const unsigned long long cap = std::strtoull(env, &end, 10);
    if (end != env && cap > 0) n = std::min<std::size_t>(n, cap);
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

/// Runs every config of the sweep on a bounded worker pool. Record i is
/// always configs[i] regardless of scheduling; failed runs are recorded,
/// never rethrown.
inline std::vector<RunRecord> run_all(const std::vector<RunConfig>& configs,
                                      std::size_t parallelism) {
  std::vector<RunRecord> out(configs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      try {
        out[i] = run(configs[i]);
      } catch (const std::exception& e) {
        out[i] = RunRecord{};
        out[i].config = configs[i];
        out[i].error = e.what();
      }
      out[i].run_id = i;
    }
  };
  const std::size_t workers = effective_workers(parallelism, configs.size());
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  return out;
}

inline std::vector<RunRecord> sweep(const SweepSpec& spec, std::size_t parallelism) {
  return run_all(expand_sweep(spec), parallelism);
}

/// Ordering for "best performing": converged runs first by iterations,
/// then unconverged by distance to the nearest minimum (low-dimensional),
/// or by best validation loss (nn). Failed runs rank last.
inline bool better_run(const RunRecord& a, const RunRecord& b) {
  if (a.failed() != b.failed()) return !a.failed();
  if (a.config.is_nn()) {
    const double va = std::isnan(a.best_val_loss) ? std::numeric_limits<double>::infinity()
                                                  : a.best_val_loss;
    const double vb = std::isnan(b.best_val_loss) ? std::numeric_limits<double>::infinity()
                                                  : b.best_val_loss;
    if (va != vb) return va < vb;
    return a.best_epoch < b.best_epoch;
  }
  if (a.converged != b.converged) return a.converged;
  if (a.converged) return *a.iters_to_converge < *b.iters_to_converge;
  const double da = std::isnan(a.final_distance_to_minimum) ? std::numeric_limits<double>::infinity()
                                                            : a.final_distance_to_minimum;
  const double db = std::isnan(b.final_distance_to_minimum) ? std::numeric_limits<double>::infinity()
                                                            : b.final_distance_to_minimum;
  return da < db;
}

/// Best run per (target, optimizer), keyed by "target/optimizer".
inline std::map<std::string, RunRecord> best_runs(const std::vector<RunRecord>& records) {
  std::map<std::string, RunRecord> best;
  for (const auto& r : records) {
    const std::string key = (r.config.is_nn() ? r.config.task : r.config.landscape) + "/" +
                            std::string(to_string(r.config.optimizer.kind));
    auto it = best.find(key);
    if (it == best.end()) {
      best.emplace(key, r);
    } else if (better_run(r, it->second)) {
      it->second = r;
    }
  }
  return best;
}

/// One summary row: statistics over the top_k best runs of one optimizer
/// on one target. metric is best_val_loss (nn) or final loss gap
/// (low-dimensional); epoch is best_epoch or iterations. Standard
/// deviations are sample (n - 1) deviations, 0 for a single run.
struct SummaryRow {
  std::string target;
  std::string optimizer;
  std::size_t runs = 0;
  double metric_mean = 0.0;
  double metric_std = 0.0;
  double epoch_mean = 0.0;
  double epoch_std = 0.0;
  double best_metric = 0.0;
  std::uint64_t best_epoch = 0;
  double best_wall_time_seconds = 0.0;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

inline double record_metric(const RunRecord& r) {
  return r.config.is_nn() ? r.best_val_loss : r.final_gap;
}

inline std::uint64_t record_epoch(const RunRecord& r) {
  return r.config.is_nn() ? r.best_epoch : r.iterations;
}

}  // namespace detail

inline std::vector<SummaryRow> summarize(const std::vector<RunRecord>& records, std::size_t top_k) {
  if (records.empty()) throw UsageError("summarize: no records");
  std::vector<std::pair<std::string, std::string>> keys;
  std::map<std::pair<std::string, std::string>, std::vector<const RunRecord*>> groups;
  for (const auto& r : records) {
    std::pair<std::string, std::string> key{
        r.config.is_nn() ? r.config.task : r.config.landscape,
        std::string(to_string(r.config.optimizer.kind))};
    if (!groups.contains(key)) keys.push_back(key);
    groups[key].push_back(&r);
  }
  std::vector<SummaryRow> rows;
  for (const auto& key : keys) {
    auto group = groups[key];
    std::stable_sort(group.begin(), group.end(),
                     [](const RunRecord* a, const RunRecord* b) { return better_run(*a, *b); });
    const std::size_t k = std::min(std::max<std::size_t>(top_k, 1), group.size());
    std::vector<double> metrics, epochs;
    for (std::size_t i = 0; i < k; ++i) {
      metrics.push_back(detail::record_metric(*group[i]));
      epochs.push_back(static_cast<double>(detail::record_epoch(*group[i])));
    }
    SummaryRow row;
    row.target = key.first;
    row.optimizer = key.second;
    row.runs = k;
    std::tie(row.metric_mean, row.metric_std) = detail::mean_std(metrics);
    std::tie(row.epoch_mean, row.epoch_std) = detail::mean_std(epochs);
    row.best_metric = metrics.front();
    row.best_epoch = detail::record_epoch(*group.front());
    row.best_wall_time_seconds = group.front()->wall_time_seconds;
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline nlohmann::json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline double number_from(const nlohmann::json& j, const std::string& key) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  if (!j.is_number()) throw UsageError("field '" + key + "' must be a number");
  return j.get<double>();
}

inline std::uint64_t count_from(const nlohmann::json& j, const std::string& key) {
  if (!j.is_number_integer() || j.get<long long>() < 0) {
    throw UsageError("field '" + key + "' must be a non-negative integer");
  }
  return j.get<std::uint64_t>();
}

inline std::string string_from(const nlohmann::json& j, const std::string& key) {
  if (!j.is_string()) throw UsageError("field '" + key + "' must be a string");
  return j.get<std::string>();
}

inline std::vector<double> numbers_from(const nlohmann::json& j, const std::string& key) {
  if (!j.is_array()) throw UsageError("field '" + key + "' must be an array of numbers");
  std::vector<double> out;
  for (const auto& v : j) out.push_back(number_from(v, key));
  return out;
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json::object();
  if (!c.landscape.empty()) j["landscape"] = c.landscape;
  if (!c.task.empty()) j["task"] = c.task;
  j["optimizer"] = c.optimizer;
  j["max_iters"] = c.max_iters;
  j["tol"] = c.tol;
  j["seed"] = c.seed;
  j["log_offset"] = c.log_offset;
  j["trace_every"] = c.trace_every;
  if (c.start) j["start"] = *c.start;
  if (c.is_nn()) {
    j["batch_size"] = c.batch_size;
    j["samples"] = c.samples;
    j["data_seed"] = c.data_seed;
    j["hidden"] = c.hidden;
    if (c.task == "poly") j["poly_degree"] = c.poly_degree;
    if (c.task == "blobs") j["classes"] = c.classes;
  }
}

/// Reads a RunConfig over `c` (fields absent from j keep their current
/// values). Unknown keys are rejected.
inline void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw UsageError("run config must be a JSON object");
  RunConfig out = c;
  for (const auto& [key, v] : j.items()) {
    if (key == "landscape") {
      out.landscape = detail::string_from(v, key);
    } else if (key == "task") {
      out.task = detail::string_from(v, key);
    } else if (key == "optimizer") {
      out.optimizer = v.get<OptimizerConfig>();
    } else if (key == "max_iters") {
      out.max_iters = detail::count_from(v, key);
    } else if (key == "tol") {
      out.tol = detail::number_from(v, key);
    } else if (key == "seed") {
      out.seed = detail::count_from(v, key);
    } else if (key == "batch_size") {
      out.batch_size = detail::count_from(v, key);
    } else if (key == "log_offset") {
      out.log_offset = detail::number_from(v, key);
    } else if (key == "trace_every") {
      out.trace_every = detail::count_from(v, key);
    } else if (key == "start") {
      if (v.is_null()) {
        out.start.reset();
      } else {
        out.start = detail::numbers_from(v, key);
      }
    } else if (key == "poly_degree") {
      out.poly_degree = detail::count_from(v, key);
    } else if (key == "samples") {
      out.samples = detail::count_from(v, key);
    } else if (key == "data_seed") {
      out.data_seed = detail::count_from(v, key);
    } else if (key == "classes") {
      out.classes = detail::count_from(v, key);
    } else if (key == "hidden") {
      if (!v.is_array()) throw UsageError("field 'hidden' must be an array of integers");
      out.hidden.clear();
      for (const auto& w : v) out.hidden.push_back(detail::count_from(w, key));
    } else {
      throw UsageError("unknown run config key '" + key + "'");
    }
  }
  c = std::move(out);
}

/// JSON object for one record. Traces are omitted unless include_trace.
inline nlohmann::json record_to_json(const RunRecord& r, bool include_trace, bool include_timing) {
  using nlohmann::json;
  json j;
  j["run_id"] = r.run_id;
  j["config"] = r.config;
  j["converged"] = r.converged;
  j["diverged"] = r.diverged;
  if (!r.error.empty()) j["error"] = r.error;
  j["iterations"] = r.iterations;
  j["iters_to_converge"] = r.iters_to_converge ? json(*r.iters_to_converge) : json(nullptr);
  j["final_loss"] = detail::number_or_null(r.final_loss);
  j["final_theta"] = json::array();
  for (double v : r.final_theta) j["final_theta"].push_back(detail::number_or_null(v));
  if (r.config.is_nn()) {
    j["best_val_loss"] = detail::number_or_null(r.best_val_loss);
    j["best_epoch"] = r.best_epoch;
    j["val_losses"] = json::array();
    for (double v : r.val_losses) j["val_losses"].push_back(detail::number_or_null(v));
    if (r.final_val_accuracy) j["final_val_accuracy"] = *r.final_val_accuracy;
  } else {
    j["min_value"] = r.min_value;
    j["offset"] = r.offset;
    j["final_gap"] = detail::number_or_null(r.final_gap);
    j["final_distance_to_minimum"] = detail::number_or_null(r.final_distance_to_minimum);
  }
  if (include_timing) j["wall_time_seconds"] = r.wall_time_seconds;
  if (include_trace) {
    json t = json::array();
    for (const auto& p : r.trace) {
      t.push_back({{"step", p.step},
                   {"loss", detail::number_or_null(p.loss)},
                   {"r_t", detail::number_or_null(p.r)},
                   {"grad_norm", detail::number_or_null(p.grad_norm)}});
    }
    j["trace"] = std::move(t);
  }
  return j;
}

/// Inverse of record_to_json for the fields summarize() needs.
inline RunRecord record_from_json(const nlohmann::json& j) {
  RunRecord r;
  r.run_id = j.at("run_id").get<std::uint64_t>();
  r.config = RunConfig{};
  from_json(j.at("config"), r.config);
  r.converged = j.at("converged").get<bool>();
  r.diverged = j.at("diverged").get<bool>();
  if (j.contains("error")) r.error = j.at("error").get<std::string>();
  r.iterations = j.at("iterations").get<std::uint64_t>();
  if (!j.at("iters_to_converge").is_null()) {
    r.iters_to_converge = j.at("iters_to_converge").get<std::uint64_t>();
  }
  r.final_loss = detail::number_from(j.at("final_loss"), "final_loss");
  r.final_theta = detail::numbers_from(j.at("final_theta"), "final_theta");
  if (r.config.is_nn()) {
    r.best_val_loss = detail::number_from(j.at("best_val_loss"), "best_val_loss");
    r.best_epoch = j.at("best_epoch").get<std::uint64_t>();
    r.val_losses = detail::numbers_from(j.at("val_losses"), "val_losses");
    double best = std::numeric_limits<double>::infinity();
    for (double v : r.val_losses) r.best_val_series.push_back(best = std::min(best, v));
    if (j.contains("final_val_accuracy")) r.final_val_accuracy = j.at("final_val_accuracy").get<double>();
  } else {
    r.min_value = j.at("min_value").get<double>();
    r.offset = j.at("offset").get<double>();
    r.final_gap = detail::number_from(j.at("final_gap"), "final_gap");
    r.final_distance_to_minimum =
        detail::number_from(j.at("final_distance_to_minimum"), "final_distance_to_minimum");
  }
  if (j.contains("wall_time_seconds")) r.wall_time_seconds = j.at("wall_time_seconds").get<double>();
  if (j.contains("trace")) {
    for (const auto& p : j.at("trace")) {
      r.trace.push_back({p.at("step").get<std::uint64_t>(), detail::number_from(p.at("loss"), "loss"),
                         detail::number_from(p.at("r_t"), "r_t"),
                         detail::number_from(p.at("grad_norm"), "grad_norm")});
    }
  }
  return r;
}

/// Newline-delimited JSON, one record per line.
inline void write_records_ndjson(std::ostream& os, const std::vector<RunRecord>& records,
                                 bool include_timing = true) {
  for (const auto& r : records) os << record_to_json(r, false, include_timing).dump() << '\n';
}

inline std::vector<RunRecord> read_records_ndjson(std::istream& is) {
  std::vector<RunRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(record_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

namespace detail {

inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

/// Per-step trace CSV: run_id,step,loss,r_t,grad_norm.
inline void write_trace_csv(std::ostream& os, const std::vector<RunRecord>& records) {
  os << "run_id,step,loss,r_t,grad_norm\n";
  for (const auto& r : records) {
    for (const auto& p : r.trace) {
      os << r.run_id << ',' << p.step << ',' << detail::fmt_double(p.loss) << ','
         << detail::fmt_double(p.r) << ',' << detail::fmt_double(p.grad_norm) << '\n';
    }
  }
}

/// Summary CSV in the column layout of the result tables: mean/std of the
/// best metric, mean/std of the epoch it was reached, and the single best
/// run with its epoch and wall time.
inline void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows,
                              bool include_timing = true) {
  os << "target,optimizer,runs,metric_mean,metric_std,epoch_mean,epoch_std,best_metric,best_epoch";
  if (include_timing) os << ",best_wall_time_s";
  os << '\n';
  for (const auto& r : rows) {
    os << r.target << ',' << r.optimizer << ',' << r.runs << ',' << detail::fmt_double(r.metric_mean)
       << ',' << detail::fmt_double(r.metric_std) << ',' << detail::fmt_double(r.epoch_mean) << ','
       << detail::fmt_double(r.epoch_std) << ',' << detail::fmt_double(r.best_metric) << ','
       << r.best_epoch;
    if (include_timing) os << ',' << detail::fmt_double(r.best_wall_time_seconds);
    os << '\n';
  }
}

inline void to_json(nlohmann::json& j, const SweepSpec& s) {
  j = nlohmann::json::object();
  j["base"] = s.base;
  j["targets"] = s.targets;
  nlohmann::json opts = nlohmann::json::array();
  for (auto k : s.optimizers) opts.push_back(std::string(to_string(k)));
  j["optimizers"] = std::move(opts);
  j["grid"] = {{"eta", s.eta}, {"xi", s.xi}, {"mu", s.mu}, {"beta", s.beta}, {"lambda", s.lambda}};
  j["random_runs"] = s.random_runs;
  j["seed"] = s.seed;
}

inline void from_json(const nlohmann::json& j, SweepSpec& s) {
  if (!j.is_object()) throw UsageError("sweep spec must be a JSON object");
  SweepSpec out = s;
  for (const auto& [key, v] : j.items()) {
    if (key == "base") {
      from_json(v, out.base);
    } else if (key == "targets") {
      if (!v.is_array()) throw UsageError("field 'targets' must be an array of strings");
      out.targets.clear();
      for (const auto& t : v) out.targets.push_back(detail::string_from(t, key));
    } else if (key == "optimizers") {
      if (!v.is_array()) throw UsageError("field 'optimizers' must be an array of strings");
      out.optimizers.clear();
      for (const auto& o : v) out.optimizers.push_back(parse_optimizer_kind(detail::string_from(o, key)));
    } else if (key == "grid") {
      if (!v.is_object()) throw UsageError("field 'grid' must be an object");
      for (const auto& [axis, values] : v.items()) {
        auto vals = detail::numbers_from(values, "grid." + axis);
        if (axis == "eta") {
          out.eta = std::move(vals);
        } else if (axis == "xi") {
          out.xi = std::move(vals);
        } else if (axis == "mu") {
          out.mu = std::move(vals);
        } else if (axis == "beta") {
          out.beta = std::move(vals);
        } else if (axis == "lambda") {
          out.lambda = std::move(vals);
        } else {
          throw UsageError("unknown grid axis '" + axis + "'");
        }
      }
    } else if (key == "random_runs") {
      out.random_runs = detail::count_from(v, key);
    } else if (key == "seed") {
      out.seed = detail::count_from(v, key);
    } else {
      throw UsageError("unknown sweep spec key '" + key + "'");
    }
  }
  s = std::move(out);
}

}  // namespace pullback
