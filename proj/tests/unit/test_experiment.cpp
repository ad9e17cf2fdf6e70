#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "dmilab/errors.hpp"
#include "dmilab/experiment/runner.hpp"
#include "dmilab/experiment/spec.hpp"

using namespace dmilab;
namespace fs = std::filesystem;

namespace {

ExperimentSpec parse(const std::string& text) {
  std::istringstream in(text);
  return parse_spec(in);
}

std::string config_error(const std::string& text) {
  try {
    parse(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dmilab_exp_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

/// A pipeline small enough to run in well under a second.
ExperimentSpec tiny_spec(const fs::path& out) {
  ExperimentSpec s;
  s.name = "tiny";
  s.out = out;
  auto& c = s.base;
  c.scenario.K = 5;
  c.scenario.dim_global = 3;
  c.scenario.dim_local = 3;
  c.scenario.source_per_class = 10;
  c.scenario.target_per_class = 8;
  c.model.hidden_dim = 8;
  c.model.bottleneck_dim = 8;
  c.teachers.embed_dim = 6;
  c.pretrain.epochs = 3;
  c.burn_in.epochs = 2;
  c.adapt.epochs = 3;
  c.adapt.batch_size = 8;
  s.seeds = {0, 1};
  return s;
}

void write_metrics(const fs::path& path, const std::string& sweep,
                   const std::vector<std::tuple<int, std::string, double>>& rows,
                   const std::string& header = kMetricsHeader) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << header << "\n";
  for (const auto& [epoch, metric, value] : rows) {
    out << "r," << 0 << "," << sweep << "," << epoch << "," << metric << "," << value << "\n";
  }
}

}  // namespace

// --- config grammar -------------------------------------------------------------------

TEST(SpecParseTest, EmptyConfigIsTheCanonicalPipeline) {
  auto s = parse("");
  EXPECT_EQ(describe(s.base), describe(canonical_pipeline()));
  EXPECT_EQ(s.seeds, std::vector<std::uint64_t>{0});
  EXPECT_EQ(s.cells().size(), 1u);
  EXPECT_EQ(s.cells()[0].label(), "base");
}

TEST(SpecParseTest, ReadsSectionsSeedsAndSweepAliases) {
  auto s = parse(
      "# comment\n"
      "[run]\nname = demo\nseeds = 3, 5,7\nworkers = 2\n"
      "; another comment\n"
      "[scenario]\nK = 12\nsetting = partial\npartial_size = 4\nopen_extra = 2\n"
      "[adapt]\nterms = sim+ags\nobjective = mi\nlambda = 0.25\n"
      "[sweep]\nbatch_size = 8,16\nsetting = closed, open\n");
  EXPECT_EQ(s.name, "demo");
  EXPECT_EQ(s.seeds, (std::vector<std::uint64_t>{3, 5, 7}));
  EXPECT_EQ(s.workers, 2u);
  EXPECT_EQ(s.base.scenario.K, 12u);
  EXPECT_EQ(s.base.adapt.objective, Objective::mi);
  EXPECT_EQ(s.base.adapt.use, (LossSwitches{false, false, true, true}));
  EXPECT_DOUBLE_EQ(s.base.adapt.dmi.lambda, 0.25);
  ASSERT_EQ(s.sweep.size(), 2u);
  EXPECT_EQ(s.sweep[0].key, "adapt.batch_size");
  EXPECT_EQ(s.sweep[1].key, "scenario.setting");
  const auto cells = s.cells();
  ASSERT_EQ(cells.size(), 4u);
  EXPECT_EQ(cells[0].label(), "batch_size=8;setting=closed");
  EXPECT_EQ(cells[3].label(), "batch_size=16;setting=open");
}

TEST(SpecParseTest, ErrorsNameTheField) {
  EXPECT_NE(config_error("[adapt]\nbatch_size = eight\n").find("adapt.batch_size"), std::string::npos);
  EXPECT_NE(config_error("[adapt]\nlambda = 1.0x\n").find("adapt.lambda"), std::string::npos);
  EXPECT_NE(config_error("[adapt]\nepochz = 3\n").find("adapt.epochz: unknown key"), std::string::npos);
  EXPECT_NE(config_error("[nope]\nx = 1\n").find("nope.x"), std::string::npos);
  EXPECT_NE(config_error("[run]\nseeds = 1,1\n").find("run.seeds"), std::string::npos);
  EXPECT_NE(config_error("[run]\nseeds = \n").find("run.seeds"), std::string::npos);
  EXPECT_NE(config_error("[run]\nworkers = 0\n").find("run.workers"), std::string::npos);
  EXPECT_NE(config_error("[adapt]\nterms = sim+xyz\n").find("adapt.terms"), std::string::npos);
  EXPECT_NE(config_error("[adapt]\nobjective = ce\n").find("adapt.objective"), std::string::npos);
  EXPECT_NE(config_error("[sweep]\nwidth = 1,2\n").find("sweep.width"), std::string::npos);
  EXPECT_NE(config_error("[sweep]\nlambda = 0.5,0.5\n").find("duplicate"), std::string::npos);
  EXPECT_NE(config_error("[adapt]\nbatch_size = 0\n").find("batch"), std::string::npos);
  // a sweep value that only fails once resolved names its cell
  EXPECT_NE(config_error("[sweep]\nbatch_size = 8,0\n").find("batch_size=0"), std::string::npos);
  EXPECT_NE(config_error("[adapt]\nlr = 1\nlr = 2\n").find("line"), std::string::npos);
}

TEST(SpecParseTest, FormatRoundTrips) {
  for (const auto& name : suite_names()) {
    const auto suite = suite_by_name(name);
    const std::string text = format_spec(suite);
    const auto back = parse(text);
    EXPECT_EQ(format_spec(back), text) << name;
    EXPECT_EQ(back.sweep, suite.sweep) << name;
  }
}

TEST(SpecParseTest, TermListsAreOrderInsensitive) {
  EXPECT_EQ(parse_terms("sim+mc"), parse_terms("mc + sim"));
  EXPECT_EQ(to_string(parse_terms("sim+ags+cd+mc")), "mc+cd+ags+sim");
  EXPECT_EQ(to_string(parse_terms("none")), "none");
  EXPECT_THROW(parse_terms("sim+sim"), ConfigError);
}

TEST(SeedTest, StageSeedsAreDistinctAndStable) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t run : {0u, 1u, 2u}) {
    for (const char* stage : {"scenario", "teachers", "pretrain", "burn_in", "adapt"}) {
      EXPECT_EQ(derive_seed(run, stage), derive_seed(run, stage));
      seen.insert(derive_seed(run, stage));
    }
  }
  EXPECT_EQ(seen.size(), 15u);
}

// --- suites and planning -----------------------------------------------------------------

TEST(SuiteTest, GridsAndSeeds) {
  const auto batch = suite_batch_sensitivity();
  EXPECT_EQ(plan_runs(batch).size(), 40u);
  EXPECT_EQ(batch.cells().size(), 8u);
  const auto lambda = suite_lambda();
  const auto cells = lambda.cells();
  EXPECT_EQ(cells.front().label(), "lambda=0.1");
  EXPECT_EQ(cells.back().label(), "lambda=2");
  std::size_t flagged = 0;
  for (const auto& p : plan_runs(lambda)) flagged += p.extrapolation;
  EXPECT_EQ(flagged, 5u);  // only 0.1, once per seed
  const auto ablation = suite_ablation().cells();
  ASSERT_EQ(ablation.size(), 4u);
  EXPECT_EQ(ablation[0].label(), "terms=sim");
  EXPECT_EQ(ablation[3].label(), "terms=mc+cd+ags+sim");
  EXPECT_EQ(suite_objectives().cells().size(), 3u);
  for (const auto& p : plan_runs(suite_settings())) p.config.validate();
  for (const auto& name : suite_names()) {
    EXPECT_EQ(suite_by_name(name).seeds, (std::vector<std::uint64_t>{0, 1, 2, 3, 4}));
  }
  EXPECT_THROW(suite_by_name("nope"), ConfigError);
}

TEST(SuiteTest, BatchSweepOfFourByFiveSeedsGivesTwentyRuns) {
  auto s = parse("[run]\nseeds = 0,1,2,3,4\n[sweep]\nbatch_size = 8,16,32,64\n");
  const auto plans = plan_runs(s);
  EXPECT_EQ(plans.size(), 20u);
  std::set<fs::path> dirs;
  for (const auto& p : plans) dirs.insert(p.dir);
  EXPECT_EQ(dirs.size(), 20u);
  EXPECT_EQ(plans[5].config.adapt.batch_size, 16u);
  EXPECT_EQ(plans[5].seed, 0u);
}

// --- aggregation ------------------------------------------------------------------------

TEST(SummaryTest, MeansAndStdMatchHandAggregation) {
  const auto dir = fresh_dir("hand");
  // last value per run: a -> 0.5, 0.7, 0.9 ; b -> 2, 4, 9
  write_metrics(dir / "runs/x0/metrics.csv", "lambda=1", {{0, "a", 0.1}, {1, "a", 0.5}, {1, "b", 2}});
  write_metrics(dir / "runs/x1/metrics.csv", "lambda=1", {{0, "a", 0.3}, {1, "a", 0.7}, {0, "b", 4}});
  write_metrics(dir / "runs/x2/metrics.csv", "lambda=1", {{2, "a", 0.9}, {1, "a", 0.0}, {3, "b", 9}});
  write_metrics(dir / "runs/y0/metrics.csv", "lambda=2", {{1, "a", 0.25}});
  const auto rows = emit_summary(dir);
  ASSERT_EQ(rows.size(), 3u);
  const auto* a = find_row(rows, "lambda=1", "a");
  ASSERT_NE(a, nullptr);
  EXPECT_EQ(a->n, 3u);
  EXPECT_NEAR(a->mean, 0.7, 1e-15);
  EXPECT_NEAR(a->std, 0.2, 1e-15);
  const auto* b = find_row(rows, "lambda=1", "b");
  EXPECT_NEAR(b->mean, 5.0, 1e-15);
  EXPECT_NEAR(b->std, std::sqrt(13.0), 1e-14);  // ((3^2 + 1^2 + 4^2) / 2)
  const auto* y = find_row(rows, "lambda=2", "a");
  EXPECT_EQ(y->n, 1u);
  EXPECT_EQ(y->std, 0.0);
  EXPECT_EQ(y->mean, 0.25);
  // the written table carries the same rows in the same order
  std::istringstream csv(slurp(dir / "summary.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, kSummaryHeader);
  for (const auto& r : rows) {
    ASSERT_TRUE(std::getline(csv, line));
    EXPECT_EQ(line.rfind(r.sweep + "," + r.metric + "," + std::to_string(r.n) + ",0,", 0), 0u) << line;
  }
  EXPECT_FALSE(std::getline(csv, line));
}

TEST(SummaryTest, MixedSchemaListsEveryOffender) {
  const auto dir = fresh_dir("mixed");
  write_metrics(dir / "runs/ok/metrics.csv", "base", {{0, "a", 1}});
  write_metrics(dir / "runs/old/metrics.csv", "base", {{0, "a", 1}}, "run,seed,epoch,metric,value");
  {
    fs::create_directories(dir / "runs/short");
    std::ofstream out(dir / "runs/short/metrics.csv");
    out << kMetricsHeader << "\nr,0,base,1,a\n";
  }
  try {
    summarize(dir);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("old"), std::string::npos);
    EXPECT_NE(msg.find("short"), std::string::npos);
    EXPECT_EQ(msg.find("runs/ok"), std::string::npos);
  }
}

// --- full runs -------------------------------------------------------------------------

TEST(RunTest, SingleRunSummaryEqualsFinalEpoch) {
  auto spec = tiny_spec(fresh_dir("single"));
  spec.seeds = {4};
  const auto result = run_experiment(spec);
  ASSERT_TRUE(result.all_ok()) << result.runs[0].error;
  const auto rows = summarize(spec.out);
  const auto* acc = find_row(rows, "base", "target_accuracy");
  ASSERT_NE(acc, nullptr);
  EXPECT_EQ(acc->n, 1u);
  EXPECT_EQ(acc->std, 0.0);
  EXPECT_EQ(acc->mean, result.runs[0].final_accuracy);
  for (const char* f : {"config.ini", "manifest.json", "summary.csv", "summary.json", "timing.json"}) {
    EXPECT_TRUE(fs::exists(spec.out / f)) << f;
  }
  // the echoed config reproduces the experiment
  auto again = load_spec(spec.out / "config.ini");
  EXPECT_EQ(format_spec(again), format_spec(spec));
}

TEST(RunTest, ReusedSeedGivesZeroStd) {
  auto spec = tiny_spec(fresh_dir("reuse"));
  spec.seeds = {3};
  run_experiment(spec);
  const auto source = spec.out / "runs/base__seed3/metrics.csv";
  for (int copy = 0; copy < 4; ++copy) {
    const auto dst = spec.out / "runs" / ("copy" + std::to_string(copy)) / "metrics.csv";
    fs::create_directories(dst.parent_path());
    fs::copy_file(source, dst);
  }
  fs::remove(spec.out / "manifest.json");
  const auto rows = summarize(spec.out);
  ASSERT_FALSE(rows.empty());
  for (const auto& r : rows) {
    EXPECT_EQ(r.n, 5u) << r.metric;
    EXPECT_EQ(r.std, 0.0) << r.metric;
  }
}

TEST(RunTest, MetricsMatchGoldenSchemaAndAreWorkerIndependent) {
  auto one = tiny_spec(fresh_dir("golden1"));
  auto two = tiny_spec(fresh_dir("golden2"));
  two.workers = 2;
  run_experiment(one);
  run_experiment(two);
  for (const auto* seed : {"base__seed0", "base__seed1"}) {
    const auto a = slurp(one.out / "runs" / seed / "metrics.csv");
    EXPECT_EQ(a, slurp(two.out / "runs" / seed / "metrics.csv"));
  }
  EXPECT_EQ(slurp(one.out / "summary.csv"), slurp(two.out / "summary.csv"));

  // every column but the value is pinned by the golden file
  std::ifstream metrics(one.out / "runs/base__seed0/metrics.csv");
  std::ifstream golden(fs::path(DMILAB_TEST_DATA) / "tiny_run_keys.csv");
  ASSERT_TRUE(golden) << "missing golden file";
  std::string got, want;
  std::size_t line = 0;
  while (std::getline(golden, want)) {
    ++line;
    ASSERT_TRUE(std::getline(metrics, got)) << "metrics shorter than golden at line " << line;
    if (line == 1) {
      EXPECT_EQ(got, want);
      continue;
    }
    const auto cut = got.rfind(',');
    EXPECT_EQ(got.substr(0, cut), want) << line;
    EXPECT_TRUE(std::isfinite(std::stod(got.substr(cut + 1)))) << got;
  }
  EXPECT_FALSE(std::getline(metrics, got)) << "metrics longer than golden: " << got;
}

TEST(RunTest, InterruptedRunLeavesCompleteEpochsAndOthersProceed) {
  auto spec = tiny_spec(fresh_dir("interrupt"));
  RunOptions options;
  options.after_epoch = [](const RunPlan& plan, const EpochRecord& r) {
    if (plan.seed == 1 && r.epoch == 1) throw std::runtime_error("interrupted");
  };
  const auto result = run_experiment(spec, options);
  ASSERT_EQ(result.runs.size(), 2u);
  EXPECT_TRUE(result.runs[0].ok);
  EXPECT_FALSE(result.runs[1].ok);
  EXPECT_EQ(result.runs[1].error, "interrupted");

  // the cut run holds epochs 0..2, each complete and parseable
  std::ifstream in(spec.out / "runs/base__seed1/metrics.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, kMetricsHeader);
  std::map<int, int> per_epoch;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    ASSERT_EQ(f.size(), 6u) << line;
    ++per_epoch[std::stoi(f[3])];
    EXPECT_TRUE(std::isfinite(std::stod(f[5])));
  }
  EXPECT_EQ(per_epoch.size(), 3u);
  EXPECT_EQ(per_epoch[1], per_epoch[2]);
  EXPECT_EQ(slurp(spec.out / "manifest.json").find("\"status\": \"failed\"") != std::string::npos, true);

  // the failed run is missing from the aggregate, not averaged in
  const auto rows = summarize(spec.out);
  const auto* acc = find_row(rows, "base", "target_accuracy");
  ASSERT_NE(acc, nullptr);
  EXPECT_EQ(acc->n, 1u);
  EXPECT_EQ(acc->missing, 1u);
  EXPECT_EQ(acc->mean, result.runs[0].final_accuracy);
}
