#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "dmilab/adapt/checkpoint.hpp"
#include "dmilab/adapt/coma.hpp"
#include "dmilab/errors.hpp"
#include "dmilab/tensor_grad/grad_check.hpp"
#include "support/oracles.hpp"

using namespace dmilab;
using oracle::Mat;

namespace {

Tensor random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c, double sd = 1.0) {
  return oracle::to_tensor(oracle::random_matrix(rng, r, c, sd));
}

ProbMatrix softmax_of(const Tensor& logits) {
  Graph g;
  return ProbMatrix(softmax(g.constant(logits)).value());
}

Tensor one_hot(const std::vector<std::size_t>& y, std::size_t K, double eps = 0.0) {
  Tensor t = Tensor::filled({y.size(), K}, eps / double(K - 1));
  for (std::size_t i = 0; i < y.size(); ++i) t(i, y[i]) = 1.0 - eps;
  return t;
}

ScenarioConfig tiny_scenario(std::uint64_t seed = 5) {
  ScenarioConfig c;
  c.K = 6;
  c.dim_global = 4;
  c.dim_local = 4;
  c.source_per_class = 30;
  c.target_per_class = 20;
  c.shift.angle_deg = 45.0;
  c.shift.translation = 2.0;
  c.seed = seed;
  return c;
}

ModelConfig tiny_model() { return {16, 8}; }

/// Source model, proxy and prototype teacher for a tiny scenario.
struct Fixture {
  ScenarioBundle bundle;
  ClassifierParams source;
  ClassifierParams proxy;
  Teachers teachers;

  explicit Fixture(std::uint64_t seed = 5, std::size_t burn_in_epochs = 5) {
    bundle = generate(tiny_scenario(seed));
    TrainConfig pt;
    pt.seed = seed;
    pt.epochs = 15;
    source = pretrain_source(bundle, tiny_model(), pt).params;
    TeacherConfig tc;
    tc.embed_dim = 8;
    tc.seed = seed;
    teachers = make_teachers(bundle, tc);
    TrainConfig bi = pt;
    bi.epochs = burn_in_epochs;
    proxy = burn_in_proxy(bundle, caption_pseudo_labels(bundle, teachers.caption, seed), source,
                          bi)
                .params;
  }
};

AdaptConfig quick_adapt(std::size_t epochs = 2) {
  AdaptConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.seed = 3;
  return c;
}

}  // namespace

// --- optimizer ----------------------------------------------------------------------

TEST(SgdTest, MatchesHandRolledOracle) {
  std::mt19937_64 rng(1);
  ParamStore params{{"a", random_tensor(rng, 3, 4)}, {"b", random_tensor(rng, 1, 5)}};
  OptState st{0.05, 0.9, 1e-3, {}};
  // oracle state as plain vectors
  std::map<std::string, std::vector<double>> p, buf;
  for (const auto& [k, t] : params) {
    p[k] = t.values();
    buf[k].assign(t.numel(), 0.0);
  }
  for (int step = 0; step < 6; ++step) {
    GradientMap grads{{"a", random_tensor(rng, 3, 4)}, {"b", random_tensor(rng, 1, 5)}};
    sgd_step(st, params, grads);
    for (auto& [k, v] : p) {
      for (std::size_t i = 0; i < v.size(); ++i) {
        buf[k][i] = 0.9 * buf[k][i] + grads[k][i] + 1e-3 * v[i];
        v[i] = v[i] - 0.05 * buf[k][i];
      }
    }
  }
  for (const auto& [k, t] : params) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      EXPECT_NEAR(t[i], p[k][i], 1e-12);
      EXPECT_NEAR(st.buffers.at(k)[i], buf[k][i], 1e-12);
    }
  }
}

TEST(SgdTest, ParametersWithoutGradientAreUntouched) {
  std::mt19937_64 rng(2);
  ParamStore params{{"a", random_tensor(rng, 2, 2)}, {"b", random_tensor(rng, 2, 2)}};
  const Tensor b0 = params["b"];
  OptState st;
  sgd_step(st, params, {{"a", random_tensor(rng, 2, 2)}});
  EXPECT_EQ(params["b"], b0);
  EXPECT_FALSE(st.buffers.contains("b"));
}

TEST(SgdTest, RejectsMismatches) {
  ParamStore params{{"a", Tensor::zeros({2, 2})}};
  OptState st;
  EXPECT_THROW(sgd_step(st, params, {{"a", Tensor::zeros({2, 3})}}), ShapeError);
  EXPECT_THROW(sgd_step(st, params, {{"zz", Tensor::zeros({2, 2})}}), ConfigError);
  st.momentum = 1.0;
  EXPECT_THROW(sgd_step(st, params, {{"a", Tensor::zeros({2, 2})}}), ConfigError);
}

// --- smoothed cross-entropy -------------------------------------------------------

TEST(SmoothedCrossEntropyTest, Examples) {
  const std::vector<std::size_t> y{0, 2, 1};
  EXPECT_DOUBLE_EQ(smoothed_cross_entropy(ProbMatrix(one_hot(y, 3)), y, 0.0), 0.0);
  EXPECT_NEAR(smoothed_cross_entropy(ProbMatrix(Tensor::filled({3, 4}, 0.25)), y, 0.0),
              std::log(4.0), 1e-14);
}

TEST(SmoothedCrossEntropyTest, MatchesDirectSummation) {
  std::mt19937_64 rng(3);
  for (double sigma : {0.0, 0.1, 0.5}) {
    const Mat p = oracle::random_prob_rows(rng, 7, 10);
    std::vector<std::size_t> y(7);
    for (auto& v : y) v = rng() % 10;
    double expected = 0.0;
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t k = 0; k < 10; ++k) {
        const double l = (k == y[i] ? 1.0 - sigma : 0.0) + sigma / 10.0;
        expected -= l * std::log(p[i][k]);
      }
    expected /= 7.0;
    EXPECT_NEAR(smoothed_cross_entropy(ProbMatrix(oracle::to_tensor(p)), y, sigma), expected,
                1e-12);
  }
  // one-hot prediction with sigma = 0.1 pays for the smoothed mass on the floor
  const std::vector<std::size_t> y{3};
  const double floor_term = -0.1 / 10.0 * 9.0 * std::log(kLogFloor);
  EXPECT_NEAR(smoothed_cross_entropy(ProbMatrix(one_hot(y, 10)), y, 0.1), floor_term, 1e-12);
}

TEST(SmoothedCrossEntropyTest, Errors) {
  ProbMatrix p(Tensor::filled({2, 3}, 1.0 / 3.0));
  EXPECT_THROW(smoothed_cross_entropy(p, {0, 3}, 0.1), ShapeError);
  EXPECT_THROW(smoothed_cross_entropy(p, {0}, 0.1), ShapeError);
  EXPECT_THROW(smoothed_cross_entropy(p, {0, 1}, 1.0), ConfigError);
  EXPECT_THROW(smoothed_cross_entropy(p, {0, 1}, -0.1), ConfigError);
}

// --- pretraining and burn-in --------------------------------------------------------

TEST(PretrainTest, SeparableToyReachesHighAccuracy) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ScenarioConfig c;
    c.K = 3;
    c.dim_global = 2;
    c.dim_local = 2;
    c.source_per_class = 50;
    c.target_per_class = 10;
    c.min_separation = 4.0;
    c.shift.source_noise = 0.5;
    c.seed = seed;
    const auto b = generate(c);
    TrainConfig t;
    t.epochs = 20;
    t.batch_size = 16;
    t.seed = seed;
    const auto r = pretrain_source(b, {16, 8}, t);
    EXPECT_GT(evaluate(r.params, b.source).accuracy, 0.95) << seed;
    EXPECT_EQ(r.epoch_loss.size(), 20u);
  }
}

TEST(PretrainTest, SmoothingLeavesHigherTrainingLoss) {
  const auto b = generate(tiny_scenario());
  TrainConfig t;
  t.epochs = 15;
  t.sigma = 0.0;
  const auto plain = pretrain_source(b, tiny_model(), t);
  t.sigma = 0.1;
  const auto smooth = pretrain_source(b, tiny_model(), t);
  EXPECT_GT(plain.train_accuracy, 0.9);
  EXPECT_GT(smooth.train_accuracy, 0.9);
  EXPECT_GT(smooth.epoch_loss.back(), plain.epoch_loss.back());
}

TEST(PretrainTest, ZeroEpochsReturnsInitialisation) {
  const auto b = generate(tiny_scenario());
  TrainConfig t;
  t.epochs = 0;
  t.seed = 9;
  std::mt19937_64 rng(9);
  EXPECT_EQ(pretrain_source(b, tiny_model(), t).params,
            ClassifierParams::init(classifier_dims(b, tiny_model()), rng));
}

TEST(PretrainTest, DivergenceNamesTheEpoch) {
  auto b = generate(tiny_scenario());
  b.source.features(0, 0) = std::nan("");
  TrainConfig t;
  t.epochs = 2;
  try {
    pretrain_source(b, tiny_model(), t);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.stage(), "pretrain");
    EXPECT_EQ(e.epoch(), 0);
  }
}

TEST(BurnInTest, ZeroEpochsCopiesSource) {
  Fixture f(5, 0);
  EXPECT_EQ(f.proxy, f.source);
}

TEST(BurnInTest, TrueLabelsReachSupervisedCeiling) {
  Fixture f;
  TrainConfig t;
  t.epochs = 20;
  const auto proxy = burn_in_proxy(f.bundle, f.bundle.target.labels, f.source, t);
  // same budget from a fresh start on the same labelled target data
  std::mt19937_64 rng(0);
  const auto ceiling =
      train_supervised(ClassifierParams::init(f.source.dims(), rng), f.bundle.target.features,
                       f.bundle.target.labels, t, "ceiling");
  EXPECT_GT(evaluate(proxy.params, f.bundle.target).accuracy,
            evaluate(ceiling.params, f.bundle.target).accuracy - 0.05);
}

TEST(BurnInTest, ProxyFitsPseudoLabels) {
  Fixture f;
  const auto pl = caption_pseudo_labels(f.bundle, f.teachers.caption, 5);
  TrainConfig t;
  t.epochs = 20;
  EXPECT_GE(burn_in_proxy(f.bundle, pl, f.source, t).train_accuracy, 0.9);
}

// --- baseline objectives ------------------------------------------------------------

TEST(BaselineObjectiveTest, Examples) {
  std::mt19937_64 rng(4);
  const ProbMatrix a(oracle::to_tensor(oracle::random_prob_rows(rng, 9, 5)));
  EXPECT_NEAR(baseline_objective(Objective::kl, a, a), 0.0, 1e-15);
  const ProbMatrix eye(one_hot({0, 1, 2, 3, 4}, 5));
  EXPECT_NEAR(baseline_objective(Objective::mi, eye, eye), std::log(5.0), 1e-12);
  EXPECT_THROW(baseline_objective(Objective::dmi, a, a), ConfigError);
}

TEST(BaselineObjectiveTest, KlMatchesDirectFormula) {
  std::mt19937_64 rng(5);
  const Mat a = oracle::random_prob_rows(rng, 6, 4), b = oracle::random_prob_rows(rng, 6, 4);
  double expected = 0.0;
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t k = 0; k < 4; ++k) expected += b[i][k] * std::log(b[i][k] / a[i][k]);
  expected /= 6.0;
  EXPECT_NEAR(baseline_objective(Objective::kl, ProbMatrix(oracle::to_tensor(a)),
                                 ProbMatrix(oracle::to_tensor(b))),
              expected, 1e-12);
}

TEST(BaselineObjectiveTest, PlainMiIsDmiOnTheFullSet) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng() % 30, K = 2 + rng() % 12;
    const ProbMatrix x(oracle::to_tensor(oracle::random_prob_rows(rng, n, K)));
    const ProbMatrix y(oracle::to_tensor(oracle::random_prob_rows(rng, n, K)));
    EXPECT_NEAR(baseline_objective(Objective::mi, x, y),
                dmi_from_predictions(x, y, ClassSubset::full(K), DmiConfig{}).value, 1e-12);
  }
}

TEST(ObjectiveTest, ParseRoundTrip) {
  for (Objective o : {Objective::dmi, Objective::mi, Objective::kl}) {
    EXPECT_EQ(parse_objective(to_string(o)), o);
  }
  EXPECT_THROW(parse_objective("DMI"), ConfigError);
}

// --- reduction identity ---------------------------------------------------------------

TEST(ObjectiveSwitchTest, MiPathEqualsFullSetDmi) {
  std::mt19937_64 rng(7);
  const DmiConfig cfg;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 31, K = 3 + rng() % 10;
    Graph g;
    Var t = g.constant(softmax_of(random_tensor(rng, n, K)).tensor());
    Var b = g.constant(softmax_of(random_tensor(rng, n, K)).tensor());
    Var c = g.constant(softmax_of(random_tensor(rng, n, K)).tensor());
    const auto full = ClassSubset::full(K);
    const double mc_dmi = -dmi_from_predictions(t, b, full, cfg).value.value().item() -
                          dmi_from_predictions(t, c, full, cfg).value.value().item();
    EXPECT_NEAR(mc_loss(t, b, c, Objective::mi, cfg).scalar(), mc_dmi, 1e-10);
    EXPECT_NEAR(cd_loss(b, c, t, Objective::mi, cfg).scalar(),
                conditional_dmi(b, c, t, full, cfg).value.value().item(), 1e-10);
    EXPECT_NEAR(sim_loss(t, full, Objective::mi, cfg).scalar(),
                -selective_im(t, full, cfg).value.value().item(), 1e-10);
  }
}

TEST(ObjectiveSwitchTest, KlReplacesOnlyMutualConsistency) {
  std::mt19937_64 rng(8);
  Graph g;
  Var t = g.constant(softmax_of(random_tensor(rng, 10, 4)).tensor());
  Var b = g.constant(softmax_of(random_tensor(rng, 10, 4)).tensor());
  Var c = g.constant(softmax_of(random_tensor(rng, 10, 4)).tensor());
  const DmiConfig cfg;
  EXPECT_DOUBLE_EQ(mc_loss(t, b, c, Objective::kl, cfg).scalar(),
                   mean_kl(t, b).value().item() + mean_kl(t, c).value().item());
  EXPECT_DOUBLE_EQ(cd_loss(b, c, t, Objective::kl, cfg).scalar(),
                   cd_loss(b, c, t, Objective::mi, cfg).scalar());
  EXPECT_DOUBLE_EQ(sim_loss(t, ClassSubset(4, {0, 1}), Objective::kl, cfg).scalar(),
                   -plain_im(t).value().item());
}

// --- agreement gating -----------------------------------------------------------------

TEST(AgsTest, GradientIsMaskedToAgreedRows) {
  std::mt19937_64 rng(9);
  const std::size_t n = 8, K = 5;
  const Tensor logits = random_tensor(rng, n, K);
  const std::vector<std::size_t> labels{2, kIgnoreLabel, 0, kIgnoreLabel, 4, 4, kIgnoreLabel, 1};
  Graph g;
  Var p = softmax(g.parameter("p", logits));
  // differentiate with respect to the probabilities through a leaf on p
  Graph h;
  Var pv = h.parameter("q", p.value());
  const auto grads = h.backward(ags_loss(pv, labels).value);
  const Tensor& gq = grads.at("q");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      const double expected =
          labels[i] == k ? -1.0 / (5.0 * p.value()(i, k)) : 0.0;  // 5 labelled rows
      EXPECT_NEAR(gq(i, k), expected, 1e-12) << i << "," << k;
    }
}

TEST(AgsTest, NoAgreementSkipsTheTerm) {
  Graph g;
  Var p = g.constant(Tensor::filled({3, 4}, 0.25));
  EXPECT_TRUE(ags_loss(p, {kIgnoreLabel, kIgnoreLabel, kIgnoreLabel}).skipped);
  EXPECT_THROW(ags_loss(p, {0, 9, kIgnoreLabel}), ShapeError);
}

TEST(AgsTest, AgreementLabels) {
  const Tensor a = one_hot({0, 1, 2, 3}, 4, 0.2), b = one_hot({0, 2, 2, 1}, 4, 0.3);
  EXPECT_EQ(agreement_labels(a, b),
            (std::vector<std::size_t>{0, kIgnoreLabel, 2, kIgnoreLabel}));
}

// --- gradient correctness of the composite losses ----------------------------------------

namespace {

/// Random logits for three predictors with n <= 32, K <= 12.
ParamStore random_logits(std::mt19937_64& rng, std::size_t n, std::size_t K) {
  return {{"lt", random_tensor(rng, n, K)},
          {"lb", random_tensor(rng, n, K)},
          {"lc", random_tensor(rng, n, K)}};
}

double worst_grad_error(const std::function<Var(Graph&, const ParamStore&)>& fn,
                        const ParamStore& params) {
  return grad_check(fn, params, 1e-5);
}

}  // namespace

TEST(LossGradientTest, TcaLossMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  AdaptConfig cfg;
  double worst = 0.0;
  int checked = 0;
  while (checked < 20) {
    const std::size_t n = 4 + rng() % 29, K = 3 + rng() % 10;
    const auto params = random_logits(rng, n, K);
    auto fn = [&](Graph& g, const ParamStore& p) {
      Var t = softmax(g.parameter("lt", p.at("lt")));
      Var b = softmax(g.parameter("lb", p.at("lb")));
      Var c = softmax(g.parameter("lc", p.at("lc")));
      return tca_losses(t, b, c, cfg).total;
    };
    Graph probe;
    if (!fn(probe, params).valid()) continue;
    worst = std::max(worst, worst_grad_error(fn, params));
    ++checked;
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(LossGradientTest, MdaLossMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  AdaptConfig cfg;
  double worst = 0.0;
  int checked = 0;
  while (checked < 20) {
    const std::size_t n = 4 + rng() % 29, K = 3 + rng() % 10;
    const auto params = random_logits(rng, n, K);
    const Tensor pc = softmax_of(params.at("lc")).tensor();
    // correlate the teachers so some rows agree
    Tensor lb = params.at("lb");
    for (std::size_t i = 0; i < lb.numel(); ++i) lb[i] += 2.0 * params.at("lc")[i];
    const Tensor pb = softmax_of(lb).tensor();
    ParamStore only_t{{"lt", params.at("lt")}};
    auto fn = [&](Graph& g, const ParamStore& p) {
      return mda_losses(softmax(g.parameter("lt", p.at("lt"))), pc, pb, cfg).total;
    };
    Graph probe;
    if (!fn(probe, only_t).valid()) continue;
    worst = std::max(worst, worst_grad_error(fn, only_t));
    ++checked;
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(LossGradientTest, AgsMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 4 + rng() % 29, K = 3 + rng() % 10;
    std::vector<std::size_t> labels(n);
    for (auto& y : labels) y = rng() % 3 == 0 ? kIgnoreLabel : rng() % K;
    labels[0] = 0;
    ParamStore params{{"lt", random_tensor(rng, n, K)}};
    auto fn = [&](Graph& g, const ParamStore& p) {
      return ags_loss(softmax(g.parameter("lt", p.at("lt"))), labels).value;
    };
    worst = std::max(worst, worst_grad_error(fn, params));
  }
  EXPECT_LT(worst, 1e-4);
}

// --- steps --------------------------------------------------------------------------

TEST(TcaStepTest, UpdatesOnlyProxyAndPrompt) {
  Fixture f;
  const auto cfg = quick_adapt();
  auto state = AdaptState::start(f.source, f.proxy, f.teachers.prototype, cfg);
  const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
  const auto rec = tca_step(state, gather_rows(f.bundle.target.features, idx),
                            gather_rows(f.bundle.target_global, idx), cfg);
  ASSERT_FALSE(rec.skipped);
  for (const auto& name : rec.updated) {
    EXPECT_TRUE(name.starts_with("proxy.") || name == kPromptName) << name;
  }
  EXPECT_EQ(state.target, f.source);
  EXPECT_NE(state.proxy, f.proxy);
  EXPECT_NE(state.prototype.prompt, f.teachers.prototype.prompt);
  EXPECT_EQ(state.prototype.prototypes, f.teachers.prototype.prototypes);
  EXPECT_EQ(state.prototype.encoder, f.teachers.prototype.encoder);
}

TEST(TcaStepTest, SingleStepRaisesProxyConsistency) {
  Fixture f;
  auto cfg = quick_adapt();
  cfg.use.cd = false;
  cfg.lr_proxy = 1e-3;
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.0;
  auto state = AdaptState::start(f.source, f.proxy, f.teachers.prototype, cfg);
  // a batch on which the proxy and the target model disagree somewhere
  const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15};
  const Tensor x = gather_rows(f.bundle.target.features, idx);
  const ProbMatrix pt = predict(state.target, x);
  ASSERT_NE(row_argmax(pt.tensor()), row_argmax(predict(state.proxy, x).tensor()));
  const ClassSubset s = candidate_subset(pt, predict(state.proxy, x));
  auto term = [&] { return -dmi_from_predictions(pt, predict(state.proxy, x), s, cfg.dmi).value; };
  const double before = term();
  tca_step(state, x, gather_rows(f.bundle.target_global, idx), cfg);
  EXPECT_LT(term(), before);
}

TEST(MdaStepTest, UpdatesOnlyTarget) {
  Fixture f;
  const auto cfg = quick_adapt();
  auto state = AdaptState::start(f.source, f.proxy, f.teachers.prototype, cfg);
  const std::vector<std::size_t> idx{3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  const auto rec = mda_step(state, gather_rows(f.bundle.target.features, idx),
                            gather_rows(f.bundle.target_global, idx), cfg);
  ASSERT_FALSE(rec.skipped);
  for (const auto& name : rec.updated) EXPECT_TRUE(name.starts_with("target.")) << name;
  EXPECT_NE(state.target, f.source);
  EXPECT_EQ(state.proxy, f.proxy);
  EXPECT_EQ(state.prototype, f.teachers.prototype);
}

TEST(MdaStepTest, AgreedOneHotTeachersGiveSupervisedTraining) {
  // p_c = p_b = one-hot truth: AGS is plain cross-entropy on the true labels
  auto c = tiny_scenario();
  c.shift = {0.0, 0.0, 0.3, 0.3};
  c.min_separation = 4.0;
  const auto bundle = generate(c);
  const auto& data = bundle.target;
  AdaptConfig cfg = quick_adapt();
  cfg.use.sim = false;
  const Tensor truth = one_hot(data.labels, c.K);
  std::mt19937_64 rng(0);
  ClassifierParams target = ClassifierParams::init(classifier_dims(bundle, tiny_model()), rng);
  OptState opt{0.02, 0.0, 0.0, {}};
  double first = evaluate(target, data).accuracy, last = first;
  double last_loss = 1e300;
  for (int step = 0; step < 10; ++step) {
    Graph g;
    Var pt = predict(g, target, g.constant(data.features), "target.");
    const auto L = mda_losses(pt, truth, truth, cfg);
    ASSERT_EQ(L.agreed, data.size());
    EXPECT_NEAR(L.total.value().item(),
                smoothed_cross_entropy(ProbMatrix(pt.value()), data.labels, 0.0), 1e-12);
    EXPECT_LT(L.total.value().item(), last_loss);
    last_loss = L.total.value().item();
    sgd_step(opt, target.tensors(), gradients_for(g.backward(L.total), "target."));
    const double acc = evaluate(target, data).accuracy;
    EXPECT_GE(acc, last) << step;
    last = acc;
  }
  EXPECT_GT(last, first);
}

TEST(MdaStepTest, TotalDisagreementLeavesOnlySim) {
  std::mt19937_64 rng(13);
  const std::size_t n = 6, K = 4;
  const Tensor pc = one_hot({0, 1, 2, 3, 0, 1}, K, 0.1);
  const Tensor pb = one_hot({1, 2, 3, 0, 2, 3}, K, 0.1);
  AdaptConfig cfg;
  Graph g;
  Var pt = softmax(g.parameter("lt", random_tensor(rng, n, K)));
  const auto L = mda_losses(pt, pc, pb, cfg);
  EXPECT_EQ(L.agreed, 0u);
  EXPECT_TRUE(L.ags.skipped);
  ASSERT_FALSE(L.skipped);
  EXPECT_DOUBLE_EQ(L.total.value().item(), cfg.beta * L.sim.scalar());
}

TEST(StepTest, LossCompositionIsExact) {
  Fixture f;
  const auto cfg = quick_adapt();
  auto state = AdaptState::start(f.source, f.proxy, f.teachers.prototype, cfg);
  std::mt19937_64 rng(14);
  for (int step = 0; step < 10; ++step) {
    std::vector<std::size_t> idx(4 + rng() % 20);
    for (auto& i : idx) i = rng() % f.bundle.target.size();
    const Tensor x = gather_rows(f.bundle.target.features, idx);
    const Tensor gv = gather_rows(f.bundle.target_global, idx);
    const auto t = tca_step(state, x, gv, cfg);
    if (!t.skipped) EXPECT_NEAR(t.l_tca, t.l_mc + cfg.alpha * t.l_cd, 1e-12);
    const auto m = mda_step(state, x, gv, cfg);
    if (!m.skipped) EXPECT_NEAR(m.l_mda, m.l_ags + cfg.beta * m.l_sim, 1e-12);
  }
}

TEST(StepTest, DegenerateBatchChangesNothing) {
  Fixture f;
  const auto cfg = quick_adapt();
  auto state = AdaptState::start(f.source, f.proxy, f.teachers.prototype, cfg);
  // every model outputs class 0 on every row: a large head bias for the
  // classifiers, identical prototypes (ties go to class 0) for the teacher
  for (auto* m : {&state.target, &state.proxy}) m->tensors().at("head.b")(0, 0) = 1e3;
  Tensor& protos = state.prototype.prototypes;
  for (std::size_t k = 1; k < protos.rows(); ++k)
    for (std::size_t j = 0; j < protos.cols(); ++j) protos(k, j) = protos(0, j);
  const auto before_t = param_hash(state.target.tensors());
  const auto before_b = param_hash(state.proxy.tensors());
  const auto before_v = tensor_hash(state.prototype.prompt);
  const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  const Tensor x = gather_rows(f.bundle.target.features, idx);
  const Tensor gv = gather_rows(f.bundle.target_global, idx);
  const auto t = tca_step(state, x, gv, cfg);
  const auto m = mda_step(state, x, gv, cfg);
  EXPECT_TRUE(t.skipped);
  EXPECT_TRUE(m.skipped);
  EXPECT_EQ(param_hash(state.target.tensors()), before_t);
  EXPECT_EQ(param_hash(state.proxy.tensors()), before_b);
  EXPECT_EQ(tensor_hash(state.prototype.prompt), before_v);
  EXPECT_TRUE(state.opt_target.buffers.empty());
  EXPECT_TRUE(state.opt_proxy.buffers.empty());
}

TEST(StepTest, AblationSwitchesRemoveTerms) {
  Fixture f;
  auto cfg = quick_adapt();
  cfg.use = {false, false, true, true};
  auto state = AdaptState::start(f.source, f.proxy, f.teachers.prototype, cfg);
  const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  const auto t = tca_step(state, gather_rows(f.bundle.target.features, idx),
                          gather_rows(f.bundle.target_global, idx), cfg);
  EXPECT_TRUE(t.skipped);
  EXPECT_EQ(state.proxy, f.proxy);
  cfg.use = {true, true, false, true};
  const auto m = mda_step(state, gather_rows(f.bundle.target.features, idx),
                          gather_rows(f.bundle.target_global, idx), cfg);
  EXPECT_EQ(m.l_ags, 0.0);
  EXPECT_NE(m.l_sim, 0.0);
}

// --- evaluation ---------------------------------------------------------------------

TEST(EvaluateTest, PerfectAndRandomPredictors) {
  const std::vector<std::size_t> y{0, 1, 2, 2, 1};
  EXPECT_DOUBLE_EQ(evaluate(y, y, 3).accuracy, 1.0);
  std::mt19937_64 rng(15);
  std::vector<std::size_t> truth(10000), guess(10000);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    truth[i] = rng() % 10;
    guess[i] = rng() % 10;
  }
  EXPECT_NEAR(evaluate(guess, truth, 10).accuracy, 0.1, 0.01);
}

TEST(EvaluateTest, PartialSubsetGivesNoCreditOutsideIt) {
  // target holds classes {0, 1, 2} of K = 6
  const std::vector<std::size_t> truth{0, 1, 2, 0, 1, 2};
  const std::vector<std::size_t> guess{0, 4, 2, 5, 1, 3};
  const auto e = evaluate(guess, truth, 6);
  EXPECT_DOUBLE_EQ(e.accuracy, 0.5);
  EXPECT_DOUBLE_EQ(e.per_class[0], 0.5);
  EXPECT_TRUE(std::isnan(e.per_class[4]));
  EXPECT_DOUBLE_EQ(e.mean_class_accuracy, 0.5);
}

TEST(EvaluateTest, OpenSetTalliesUnknownsApart) {
  const std::vector<std::size_t> truth{0, 1, 3, 4, 4};  // K = 3: labels 3, 4 unknown
  const std::vector<std::size_t> guess{0, 0, 2, 2, 1};
  const auto e = evaluate(guess, truth, 3);
  EXPECT_EQ(e.n_known, 2u);
  EXPECT_EQ(e.n_unknown, 3u);
  EXPECT_DOUBLE_EQ(e.accuracy, 0.5);
  EXPECT_EQ(e.unknown_predicted_as, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(EvaluateTest, Errors) {
  EXPECT_THROW(evaluate(std::vector<std::size_t>{}, {}, 3), ConfigError);
  EXPECT_THROW(evaluate(std::vector<std::size_t>{0}, {5}, 3), ConfigError);
  EXPECT_THROW(evaluate(std::vector<std::size_t>{0, 1}, {0}, 3), ShapeError);
  EXPECT_THROW(evaluate(std::vector<std::size_t>{3}, {0}, 3), ShapeError);
}

// --- full runs ----------------------------------------------------------------------

TEST(AdaptTest, ZeroEpochsKeepsSourceModel) {
  Fixture f;
  const auto r = adapt(f.bundle, f.source, f.proxy, f.teachers.prototype, quick_adapt(0));
  EXPECT_EQ(r.state.target, f.source);
  EXPECT_TRUE(r.report.epochs.empty());
  EXPECT_EQ(r.report.final_accuracy, r.report.initial_accuracy);
}

TEST(AdaptTest, SameSeedSameReport) {
  Fixture f;
  const auto a = adapt(f.bundle, f.source, f.proxy, f.teachers.prototype, quick_adapt());
  const auto b = adapt(f.bundle, f.source, f.proxy, f.teachers.prototype, quick_adapt());
  EXPECT_EQ(a.report.epochs, b.report.epochs);
  EXPECT_EQ(a.state.target, b.state.target);
  ASSERT_EQ(a.report.epochs.size(), 2u);
  for (const auto& e : a.report.epochs) {
    for (double v : {e.l_mc, e.l_cd, e.l_tca, e.l_ags, e.l_sim, e.l_mda}) {
      EXPECT_TRUE(std::isfinite(v));
    }
  }
}

TEST(AdaptTest, StageDisciplineHashAudit) {
  Fixture f;
  auto prev_t = param_hash(f.source.tensors());
  auto prev_b = param_hash(f.proxy.tensors());
  auto prev_v = tensor_hash(f.teachers.prototype.prompt);
  const auto frozen = tensor_hash(f.teachers.prototype.prototypes);
  std::size_t tca_moves = 0, mda_moves = 0;
  auto observer = [&](const StepEvent& ev) {
    const auto t = param_hash(ev.state.target.tensors());
    const auto b = param_hash(ev.state.proxy.tensors());
    const auto v = tensor_hash(ev.state.prototype.prompt);
    EXPECT_EQ(tensor_hash(ev.state.prototype.prototypes), frozen);
    if (ev.stage == Stage::tca) {
      EXPECT_EQ(t, prev_t);
      tca_moves += b != prev_b;
    } else {
      EXPECT_EQ(b, prev_b);
      EXPECT_EQ(v, prev_v);
      mda_moves += t != prev_t;
    }
    prev_t = t;
    prev_b = b;
    prev_v = v;
  };
  adapt(f.bundle, f.source, f.proxy, f.teachers.prototype, quick_adapt(3), observer);
  EXPECT_GT(tca_moves, 0u);
  EXPECT_GT(mda_moves, 0u);
}

TEST(AdaptTest, HoldoutSplitIsDisjoint) {
  AdaptConfig cfg;
  cfg.holdout_fraction = 0.25;
  const auto s = split_target(100, cfg);
  EXPECT_EQ(s.pool.size(), 75u);
  EXPECT_EQ(s.eval.size(), 25u);
  std::vector<std::size_t> all = s.pool;
  all.insert(all.end(), s.eval.begin(), s.eval.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(all[i], i);
  cfg.holdout_fraction = 0.0;
  EXPECT_EQ(split_target(10, cfg).pool, split_target(10, cfg).eval);
}

TEST(AdaptTest, ConfigValidation) {
  AdaptConfig cfg;
  cfg.alpha = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.beta = -1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

// --- checkpoints --------------------------------------------------------------------

TEST(CheckpointTest, RoundTrip) {
  std::mt19937_64 rng(16);
  Checkpoint c;
  c.meta["stage"] = "adapt";
  c.models["target"] = ClassifierParams::init({4, 5, 3, 6}, rng);
  c.models["proxy"] = ClassifierParams::init({4, 5, 3, 6}, rng);
  c.prompt = random_tensor(rng, 6, 2);
  const auto path = std::filesystem::temp_directory_path() / "dmilab_ckpt_test.bin";
  save_checkpoint(c, path);
  EXPECT_EQ(load_checkpoint(path), c);
  std::filesystem::resize_file(path, 40);
  EXPECT_THROW(load_checkpoint(path), TruncatedFileError);
  std::filesystem::remove(path);
}
