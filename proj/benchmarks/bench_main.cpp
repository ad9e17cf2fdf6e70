#include <benchmark/benchmark.h>

#include <memory>
#include <numeric>
#include <random>

#include "dmilab/adapt/coma.hpp"
#include "dmilab/dmi/dmi.hpp"
#include "dmilab/experiment/runner.hpp"
#include "dmilab/experiment/spec.hpp"
#include "dmilab/prob_info/prob_info.hpp"

using namespace dmilab;

namespace {

Tensor random_rows(std::mt19937_64& rng, std::size_t n, std::size_t K) {
  std::normal_distribution<double> gauss(0.0, 2.0);
  Tensor t = Tensor::zeros({n, K});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300, s = 0.0;
    std::vector<double> row(K);
    for (auto& v : row) mx = std::max(mx, v = gauss(rng));
    for (auto& v : row) s += (v = std::exp(v - mx));
    for (std::size_t k = 0; k < K; ++k) t(i, k) = row[k] / s;
  }
  return t;
}

JointDistribution random_joint(std::size_t K) {
  std::mt19937_64 rng(K);
  return estimate_joint(ProbMatrix(random_rows(rng, 4 * K, K)), ProbMatrix(random_rows(rng, 4 * K, K)));
}

void BM_MutualInformation(benchmark::State& state) {
  const auto p = random_joint(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(mutual_information(p));
}
BENCHMARK(BM_MutualInformation)->RangeMultiplier(2)->Range(4, 64);

void BM_Dmi(benchmark::State& state) {
  const auto K = static_cast<std::size_t>(state.range(0));
  const auto p = random_joint(K);
  std::vector<std::size_t> half(K / 2);
  std::iota(half.begin(), half.end(), 0);
  const ClassSubset s(K, half);
  for (auto _ : state) benchmark::DoNotOptimize(dmi(p, s, DmiConfig{}));
}
BENCHMARK(BM_Dmi)->RangeMultiplier(2)->Range(4, 64);

void BM_DmiGradient(benchmark::State& state) {
  const auto K = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(7);
  const Tensor x = random_rows(rng, 32, K), y = random_rows(rng, 32, K);
  const ClassSubset s = candidate_subset(x, y);
  for (auto _ : state) {
    Graph g;
    Var vx = g.parameter("x", x);
    auto term = dmi_from_predictions(vx, g.constant(y), s, DmiConfig{});
    if (term.value.valid()) benchmark::DoNotOptimize(g.backward(term.value));
  }
}
BENCHMARK(BM_DmiGradient)->Arg(8)->Arg(32);

struct StepFixture {
  Prepared prep;
  AdaptConfig cfg;
  Tensor x, gv;
};

const StepFixture& step_fixture() {
  static const auto f = [] {
    auto fx = std::make_unique<StepFixture>();
    PipelineConfig cfg = canonical_pipeline();
    apply_run_seed(cfg, 0);
    cfg.pretrain.epochs = 5;
    cfg.burn_in.epochs = 5;
    fx->prep = prepare(cfg);
    fx->cfg = cfg.adapt;
    std::vector<std::size_t> rows(cfg.adapt.batch_size);
    std::iota(rows.begin(), rows.end(), 0);
    fx->x = gather_rows(fx->prep.bundle.target.features, rows);
    fx->gv = gather_rows(fx->prep.bundle.target_global, rows);
    return fx;
  }();
  return *f;
}

void BM_TcaStep(benchmark::State& state) {
  const auto& f = step_fixture();
  auto st = AdaptState::start(f.prep.source.params, f.prep.proxy.params, f.prep.teachers.prototype, f.cfg);
  for (auto _ : state) benchmark::DoNotOptimize(tca_step(st, f.x, f.gv, f.cfg));
}
BENCHMARK(BM_TcaStep)->Unit(benchmark::kMicrosecond);

void BM_MdaStep(benchmark::State& state) {
  const auto& f = step_fixture();
  auto st = AdaptState::start(f.prep.source.params, f.prep.proxy.params, f.prep.teachers.prototype, f.cfg);
  for (auto _ : state) benchmark::DoNotOptimize(mda_step(st, f.x, f.gv, f.cfg));
}
BENCHMARK(BM_MdaStep)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
