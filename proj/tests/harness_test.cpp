#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "pullback/harness.hpp"

using namespace pullback;

namespace {

RunConfig lowdim(const std::string& land, OptimizerKind kind, double eta, double xi, double mu) {
  RunConfig c;
  c.landscape = land;
  c.optimizer.kind = kind;
  c.optimizer.hyper.eta = eta;
  c.optimizer.hyper.xi = xi;
  c.optimizer.hyper.mu = mu;
  c.optimizer.hyper.beta = 1.0;
  return c;
}

RunConfig small_nn(const std::string& task, OptimizerKind kind) {
  RunConfig c;
  c.task = task;
  c.optimizer.kind = kind;
  c.optimizer.hyper.eta = 1e-2;
  c.max_iters = 4;
  c.samples = 200;
  c.batch_size = 32;
  c.hidden = {8};
  c.poly_degree = 3;
  return c;
}

RunRecord fake(const std::string& land, OptimizerKind kind, double gap, std::uint64_t iters,
               bool converged) {
  RunRecord r;
  r.config.landscape = land;
  r.config.optimizer.kind = kind;
  r.final_gap = gap;
  r.iterations = iters;
  r.converged = converged;
  if (converged) r.iters_to_converge = iters;
  r.final_distance_to_minimum = gap;
  return r;
}

std::string ndjson(const std::vector<RunRecord>& rs) {
  std::ostringstream os;
  write_records_ndjson(os, rs, false);
  return os.str();
}

}  // namespace

TEST(RunLowdim, StartAtMinimumConvergesImmediately) {
  RunConfig c = lowdim("rosenbrock", OptimizerKind::ImSgd, 0.01, 1.0, 0.9);
  c.start = std::vector<double>{1.0, 1.0};
  const RunRecord r = run_lowdim(c);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.iters_to_converge, 0u);
  EXPECT_EQ(r.iterations, 0u);
  EXPECT_TRUE(r.trace.empty());
}

TEST(RunLowdim, ConvergesOnRosenbrock) {
  const RunRecord r = run_lowdim(lowdim("rosenbrock", OptimizerKind::ImSgd, 0.01, 1.0, 0.9));
  EXPECT_TRUE(r.converged);
  EXPECT_FALSE(r.diverged);
  EXPECT_LE(r.final_gap, 1e-10);
  EXPECT_LT(r.final_distance_to_minimum, 1e-3);
  ASSERT_EQ(r.trace.size(), r.iterations);
  EXPECT_EQ(r.trace.front().step, 0u);
  EXPECT_EQ(r.trace.front().loss, make_landscape("rosenbrock").eval({-1.5, 2.0}));
  EXPECT_LT(r.trace.front().r, 1.0);
}

TEST(RunLowdim, BudgetExhaustedIsNotConverged) {
  RunConfig c = lowdim("rosenbrock", OptimizerKind::Sgd, 1e-4, 0.0, 0.0);
  c.max_iters = 10;
  const RunRecord r = run_lowdim(c);
  EXPECT_FALSE(r.converged);
  EXPECT_FALSE(r.iters_to_converge.has_value());
  EXPECT_EQ(r.iterations, 10u);
}

TEST(RunLowdim, DivergenceDetected) {
  const RunRecord r = run_lowdim(lowdim("rosenbrock", OptimizerKind::Sgd, 1.0, 0.0, 0.0));
  EXPECT_TRUE(r.diverged);
  EXPECT_FALSE(r.converged);
  EXPECT_TRUE(r.failed());
}

TEST(RunLowdim, LogOptimizerUsesOffset) {
  RunConfig c = lowdim("beale", OptimizerKind::ImLogSgd, 0.1, 1.0, 0.9);
  c.log_offset = 1e-3;
  const RunRecord r = run_lowdim(c);
  EXPECT_EQ(r.offset, 1e-3);
  EXPECT_EQ(r.min_value, 1e-3);
  EXPECT_DOUBLE_EQ(r.final_gap, r.final_loss - 1e-3);
  EXPECT_EQ(run_lowdim(lowdim("beale", OptimizerKind::ImSgd, 0.01, 1.0, 0.9)).offset, 0.0);
}

TEST(RunLowdim, TraceEvery) {
  RunConfig c = lowdim("himmelblau", OptimizerKind::Adam, 1e-3, 0.0, 0.9);
  c.max_iters = 100;
  c.trace_every = 10;
  EXPECT_EQ(run_lowdim(c).trace.size(), 10u);
  c.trace_every = 0;
  EXPECT_TRUE(run_lowdim(c).trace.empty());
}

TEST(RunLowdim, InvalidConfigThrows) {
  RunConfig c = lowdim("nowhere", OptimizerKind::Sgd, 0.1, 0.0, 0.0);
  EXPECT_THROW(run_lowdim(c), UsageError);
  c.landscape = "beale";
  c.start = std::vector<double>{1.0};
  EXPECT_THROW(run_lowdim(c), DimensionError);
}

TEST(RunLowdim, Deterministic) {
  const RunConfig c = lowdim("ackley", OptimizerKind::ImRms, 0.01, 0.1, 0.9);
  EXPECT_EQ(ndjson({run_lowdim(c)}), ndjson({run_lowdim(c)}));
}

TEST(RunNn, PolyRecordShape) {
  const RunRecord r = run_nn(small_nn("poly", OptimizerKind::ImSgd));
  EXPECT_TRUE(r.error.empty()) << r.error;
  ASSERT_EQ(r.val_losses.size(), 5u);
  ASSERT_EQ(r.best_val_series.size(), 5u);
  for (std::size_t e = 1; e < 5; ++e) EXPECT_LE(r.best_val_series[e], r.best_val_series[e - 1]);
  EXPECT_EQ(r.best_val_loss, r.best_val_series.back());
  EXPECT_EQ(r.val_losses[r.best_epoch], r.best_val_loss);
  EXPECT_EQ(r.trace.size(), 4u);
  EXPECT_EQ(r.iterations, 4u);
  EXPECT_FALSE(r.final_val_accuracy.has_value());
}

TEST(RunNn, BlobsReportsAccuracy) {
  RunConfig c = small_nn("blobs", OptimizerKind::Adam);
  c.max_iters = 20;
  const RunRecord r = run_nn(c);
  ASSERT_TRUE(r.final_val_accuracy.has_value());
  EXPECT_GT(*r.final_val_accuracy, 0.9);
}

TEST(RunNn, DeterministicAndSeedSensitive) {
  RunConfig c = small_nn("poly", OptimizerKind::ImRms);
  const std::string a = ndjson({run_nn(c)});
  EXPECT_EQ(a, ndjson({run_nn(c)}));
  c.seed = 1;
  EXPECT_NE(a, ndjson({run_nn(c)}));
}

TEST(Grid, LogGrid) {
  const auto g = log_grid(1e-4, 1.0, 5);
  ASSERT_EQ(g.size(), 5u);
  EXPECT_DOUBLE_EQ(g[0], 1e-4);
  EXPECT_DOUBLE_EQ(g[2], 1e-2);
  EXPECT_DOUBLE_EQ(g[4], 1.0);
}

TEST(Sweep, DefaultLowdimSize) {
  // per landscape: 2 baselines x 5 eta x 3 mu + 3 induced x 5 eta x 7 xi x 3 mu
  const auto configs = expand_sweep(default_lowdim_sweep());
  EXPECT_EQ(configs.size(), 5u * (2 * 15 + 3 * 105));
  for (const auto& c : configs) {
    EXPECT_EQ(c.max_iters, 100000u);
    if (!is_induced(c.optimizer.kind)) {
      EXPECT_FALSE(c.optimizer.hyper.xi.has_value());
    }
  }
}

TEST(Sweep, DefaultRegressionSize) {
  const auto configs = expand_sweep(default_regression_sweep());
  EXPECT_EQ(configs.size(), 4u * 6 + 3u * 6 * 2);
  EXPECT_EQ(configs.front().task, "poly");
}

TEST(Sweep, RandomModeDrawsWithinRanges) {
  SweepSpec s;
  s.base.landscape = "beale";
  s.targets = {"beale", "ackley"};
  s.optimizers = {OptimizerKind::Adam, OptimizerKind::ImSgd};
  s.eta = {1e-4, 1.0};
  s.xi = {1e-3, 1e3};
  s.mu = {0.0, 0.99};
  s.random_runs = 25;
  s.seed = 3;
  const auto a = expand_sweep(s);
  ASSERT_EQ(a.size(), 100u);
  EXPECT_EQ(a, expand_sweep(s));
  for (const auto& c : a) {
    EXPECT_GE(c.optimizer.hyper.eta, 1e-4);
    EXPECT_LE(c.optimizer.hyper.eta, 1.0);
    EXPECT_LT(c.optimizer.hyper.mu, 0.99);
    if (is_induced(c.optimizer.kind)) {
      ASSERT_TRUE(c.optimizer.hyper.xi.has_value());
      EXPECT_GE(*c.optimizer.hyper.xi, 1e-3);
      EXPECT_LE(*c.optimizer.hyper.xi, 1e3);
    }
  }
  s.seed = 4;
  EXPECT_NE(a, expand_sweep(s));
}

TEST(Sweep, ValidationNamesProblem) {
  SweepSpec s = default_lowdim_sweep();
  s.eta = {0.1, -1.0};
  EXPECT_THROW(expand_sweep(s), UsageError);
  s = default_lowdim_sweep();
  s.targets = {"moon"};
  EXPECT_THROW(expand_sweep(s), UsageError);
  s = default_lowdim_sweep();
  s.optimizers.clear();
  EXPECT_THROW(expand_sweep(s), UsageError);
}

TEST(RunAll, OrderedAndParallelismInvariant) {
  SweepSpec s;
  s.base.landscape = "beale";
  s.base.max_iters = 2000;
  s.base.optimizer.hyper.beta = 1.0;
  s.targets = {"beale", "rosenbrock", "himmelblau"};
  s.optimizers = {OptimizerKind::Sgd, OptimizerKind::ImSgd, OptimizerKind::ImLogSgd};
  s.eta = {1e-3, 1e-2};
  s.xi = {0.1, 10.0};
  const auto configs = expand_sweep(s);
  const auto serial = run_all(configs, 1);
  const auto parallel = run_all(configs, 8);
  ASSERT_EQ(serial.size(), configs.size());
  for (std::size_t i = 0; i < serial.size(); ++i) {
    EXPECT_EQ(serial[i].run_id, i);
    EXPECT_EQ(serial[i].config, configs[i]);
  }
  EXPECT_EQ(ndjson(serial), ndjson(parallel));
}

TEST(RunAll, ErrorsAreRecorded) {
  std::vector<RunConfig> configs(2, lowdim("beale", OptimizerKind::Sgd, 1e-3, 0.0, 0.0));
  configs[0].max_iters = 5;
  configs[1].landscape = "moon";
  const auto out = run_all(configs, 2);
  EXPECT_TRUE(out[0].error.empty());
  EXPECT_NE(out[1].error.find("moon"), std::string::npos);
  EXPECT_TRUE(out[1].failed());
}

TEST(RunAll, EnvCapsWorkers) {
  ::setenv("PULLBACK_OPTIM_THREADS", "2", 1);
  EXPECT_EQ(effective_workers(8, 100), 2u);
  EXPECT_EQ(effective_workers(1, 100), 1u);
  ::unsetenv("PULLBACK_OPTIM_THREADS");
  EXPECT_EQ(effective_workers(8, 100), 8u);
  EXPECT_EQ(effective_workers(8, 3), 3u);
  EXPECT_EQ(effective_workers(0, 3), 1u);
}

TEST(Ranking, ConvergedByItersThenDistanceFailedLast) {
  RunRecord fast = fake("beale", OptimizerKind::Sgd, 0.0, 10, true);
  RunRecord slow = fake("beale", OptimizerKind::Sgd, 0.0, 50, true);
  RunRecord near = fake("beale", OptimizerKind::Sgd, 0.1, 100, false);
  RunRecord far = fake("beale", OptimizerKind::Sgd, 2.0, 100, false);
  RunRecord bad = fake("beale", OptimizerKind::Sgd, 0.0, 3, false);
  bad.diverged = true;
  EXPECT_TRUE(better_run(fast, slow));
  EXPECT_TRUE(better_run(slow, near));
  EXPECT_TRUE(better_run(near, far));
  EXPECT_TRUE(better_run(far, bad));
  EXPECT_FALSE(better_run(bad, far));
  const auto best = best_runs({bad, far, slow, fast, near});
  ASSERT_EQ(best.count("beale/sgd"), 1u);
  EXPECT_EQ(best.at("beale/sgd").iterations, 10u);
}

TEST(Summary, SampleStatistics) {
  std::vector<RunRecord> rs;
  // gaps 1, 2, 3 over converged runs ranked by iterations 10, 20, 30
  rs.push_back(fake("beale", OptimizerKind::Adam, 3.0, 30, true));
  rs.push_back(fake("beale", OptimizerKind::Adam, 1.0, 10, true));
  rs.push_back(fake("beale", OptimizerKind::Adam, 2.0, 20, true));
  rs.push_back(fake("ackley", OptimizerKind::ImSgd, 0.5, 7, false));
  const auto rows = summarize(rs, 10);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].target, "beale");
  EXPECT_EQ(rows[0].optimizer, "adam");
  EXPECT_EQ(rows[0].runs, 3u);
  EXPECT_DOUBLE_EQ(rows[0].metric_mean, 2.0);
  EXPECT_DOUBLE_EQ(rows[0].metric_std, 1.0);
  EXPECT_DOUBLE_EQ(rows[0].epoch_mean, 20.0);
  EXPECT_DOUBLE_EQ(rows[0].epoch_std, 10.0);
  EXPECT_EQ(rows[0].best_metric, 1.0);
  EXPECT_EQ(rows[0].best_epoch, 10u);
  EXPECT_EQ(rows[1].metric_std, 0.0);

  const auto top2 = summarize(rs, 2);
  EXPECT_EQ(top2[0].runs, 2u);
  EXPECT_DOUBLE_EQ(top2[0].metric_mean, 1.5);
  EXPECT_THROW(summarize({}, 3), UsageError);
}

TEST(Json, RunConfigRoundTrip) {
  RunConfig c = small_nn("blobs", OptimizerKind::AdamW);
  c.start = std::vector<double>{0.5, 0.25};
  c.optimizer.hyper.xi = 0.3;
  c.poly_degree = RunConfig{}.poly_degree;
  nlohmann::json j = c;
  EXPECT_EQ(j.get<RunConfig>(), c);
  EXPECT_THROW(nlohmann::json::parse(R"({"landscape":"beale","iters":5})").get<RunConfig>(),
               UsageError);
}

TEST(Json, RecordRoundTrip) {
  const RunRecord r = run_lowdim(lowdim("beale", OptimizerKind::ImLogSgd, 0.05, 1.0, 0.9));
  std::stringstream ss;
  write_records_ndjson(ss, {r, r});
  const auto back = read_records_ndjson(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].config, r.config);
  EXPECT_EQ(back[0].iters_to_converge, r.iters_to_converge);
  EXPECT_EQ(back[0].final_theta, r.final_theta);
  EXPECT_EQ(back[0].wall_time_seconds, r.wall_time_seconds);
  EXPECT_EQ(ndjson(back), ndjson({r, r}));
}

TEST(Json, TimingFieldsOptional) {
  const RunRecord r = run_lowdim(lowdim("beale", OptimizerKind::Sgd, 1e-3, 0.0, 0.0));
  EXPECT_TRUE(record_to_json(r, false, true).contains("wall_time_seconds"));
  EXPECT_FALSE(record_to_json(r, false, false).contains("wall_time_seconds"));
  EXPECT_FALSE(record_to_json(r, false, false).contains("trace"));
}

TEST(Json, SweepSpecRoundTrip) {
  SweepSpec s = default_regression_sweep();
  s.random_runs = 3;
  s.seed = 9;
  s.lambda = {1e-4, 1e-2};
  nlohmann::json j = s;
  const SweepSpec back = j.get<SweepSpec>();
  EXPECT_EQ(expand_sweep(back), expand_sweep(s));
  EXPECT_THROW(nlohmann::json::parse(R"({"targets":["beale"],"grids":{}})").get<SweepSpec>(),
               UsageError);
}

TEST(Csv, TraceAndSummaryHeaders) {
  RunConfig c = lowdim("beale", OptimizerKind::ImSgd, 1e-2, 1.0, 0.9);
  c.max_iters = 3;
  const auto recs = run_all({c}, 1);
  std::ostringstream trace;
  write_trace_csv(trace, recs);
  std::istringstream lines(trace.str());
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "run_id,step,loss,r_t,grad_norm");
  int rows = 0;
  while (std::getline(lines, line)) ++rows;
  EXPECT_EQ(rows, 3);

  std::ostringstream with, without;
  write_summary_csv(with, summarize(recs, 5), true);
  write_summary_csv(without, summarize(recs, 5), false);
  EXPECT_EQ(with.str().substr(0, with.str().find('\n')),
            "target,optimizer,runs,metric_mean,metric_std,epoch_mean,epoch_std,best_metric,"
            "best_epoch,best_wall_time_s");
  EXPECT_EQ(without.str().substr(0, without.str().find('\n')),
            "target,optimizer,runs,metric_mean,metric_std,epoch_mean,epoch_std,best_metric,"
            "best_epoch");
}
