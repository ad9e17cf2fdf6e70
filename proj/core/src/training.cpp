#include "dmilab/adapt/training.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dmilab/adapt/losses.hpp"
#include "dmilab/adapt/optim.hpp"
#include "dmilab/errors.hpp"

namespace dmilab {

namespace {

// Stream tags keep the batch orders of different stages independent.
constexpr std::uint64_t kPretrainStream = 1;
constexpr std::uint64_t kBurnInStream = 2;

}  // namespace

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  if (x.rank() != 2) throw ShapeError("gather_rows expects a matrix");
  const std::size_t d = x.cols();
  Tensor out = Tensor::zeros({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.rows()) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(x.data().begin() + static_cast<long>(idx[i] * d), d,
                out.data().begin() + static_cast<long>(i * d));
  }
  return out;
}

void ModelConfig::validate() const {
  if (hidden_dim == 0) throw ConfigError("model.hidden_dim must be positive");
  if (bottleneck_dim == 0) throw ConfigError("model.bottleneck_dim must be positive");
}

ClassifierDims classifier_dims(const ScenarioBundle& bundle, const ModelConfig& model) {
  model.validate();
  return {bundle.config.dim(), model.hidden_dim, model.bottleneck_dim, bundle.config.K};
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(sigma >= 0.0 && sigma < 1.0)) throw ConfigError("train.sigma must lie in [0, 1)");
  OptState{lr, momentum, weight_decay, {}}.validate();
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t stream,
                                     std::size_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

namespace {

TrainResult train_impl(const ClassifierParams& init, const Tensor& features,
                       const std::vector<std::size_t>& labels, const TrainConfig& cfg,
                       const char* stage, std::uint64_t stream) {
  cfg.validate();
  const std::size_t n = labels.size();
  if (n == 0) throw ConfigError(std::string(stage) + ": training set is empty");
  if (features.rank() != 2 || features.rows() != n || features.cols() != init.dims().input_dim) {
    throw ShapeError(std::string(stage) + ": features " + shape_to_string(features.shape()) +
                     " do not match labels or model input");
  }
  TrainResult out;
  out.params = init;
  OptState opt{cfg.lr, cfg.momentum, cfg.weight_decay, {}};
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(n, cfg.seed, stream, epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++batches) {
      const std::span<const std::size_t> idx(order.data() + start,
                                             std::min(cfg.batch_size, n - start));
      std::vector<std::size_t> y(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) y[i] = labels[idx[i]];
      try {
        Graph g;
        Var pred = predict(g, out.params, g.constant(gather_rows(features, idx)), "");
        Var loss = smoothed_cross_entropy(pred, y, cfg.sigma);
        const double value = loss.value().item();
        if (!std::isfinite(value)) throw NumericError("loss is not finite");
        loss_sum += value;
        sgd_step(opt, out.params.tensors(), g.backward(loss));
      } catch (const NumericError&) {
        throw DivergenceError(stage, static_cast<long>(epoch), static_cast<long>(batches));
      }
    }
    out.epoch_loss.push_back(loss_sum / double(batches));
  }
  const auto pred = row_argmax(predict(out.params, features).tensor());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) hits += pred[i] == labels[i];
  out.train_accuracy = double(hits) / double(n);
  return out;
}

}  // namespace

TrainResult train_supervised(const ClassifierParams& init, const Tensor& features,
                             const std::vector<std::size_t>& labels, const TrainConfig& cfg,
                             const char* stage) {
  return train_impl(init, features, labels, cfg, stage, 0);
}

TrainResult pretrain_source(const ScenarioBundle& bundle, const ModelConfig& model,
                            const TrainConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  const auto init = ClassifierParams::init(classifier_dims(bundle, model), rng);
  return train_impl(init, bundle.source.features, bundle.source.labels, cfg, "pretrain",
                    kPretrainStream);
}

void TeacherConfig::validate() const {
  if (embed_dim == 0) throw ConfigError("teachers.embed_dim must be positive");
  if (!(tau > 0.0)) throw ConfigError("teachers.tau must be positive");
  if (!(caption_noise >= 0.0)) throw ConfigError("teachers.caption_noise must be >= 0");
}

Teachers make_teachers(const ScenarioBundle& bundle, const TeacherConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  Teachers t;
  t.prototype = make_prototype_teacher(bundle.global_means(), cfg.embed_dim, rng, cfg.tau);
  t.caption = make_caption_teacher(bundle.local_means(), cfg.embed_dim, cfg.caption_noise, rng);
  return t;
}

std::vector<std::size_t> caption_pseudo_labels(const ScenarioBundle& bundle,
                                               const CaptionTeacherSpec& caption,
                                               std::uint64_t seed) {
  return cosine_pseudo_labels(caption_embed(caption, bundle.target_local, seed),
                              caption.class_names);
}

TrainResult burn_in_proxy(const ScenarioBundle& bundle, const std::vector<std::size_t>& pseudo_labels,
                          const ClassifierParams& source, const TrainConfig& cfg) {
  return train_impl(source, bundle.target.features, pseudo_labels, cfg, "burn-in", kBurnInStream);
}

Evaluation evaluate(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& truth,
                    std::size_t K) {
  if (predicted.size() != truth.size()) throw ShapeError("evaluate: prediction count mismatch");
  Evaluation e;
  e.unknown_predicted_as.assign(K, 0);
  std::vector<std::size_t> seen(K, 0), right(K, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i] >= K) throw ShapeError("evaluate: prediction out of range");
    if (truth[i] >= K) {
      ++e.n_unknown;
      ++e.unknown_predicted_as[predicted[i]];
      continue;
    }
    ++e.n_known;
    ++seen[truth[i]];
    if (predicted[i] == truth[i]) {
      ++e.n_correct;
      ++right[truth[i]];
    }
  }
  if (e.n_known == 0) throw ConfigError("evaluate: no samples of a known class");
  e.accuracy = double(e.n_correct) / double(e.n_known);
  e.per_class.assign(K, std::nan(""));
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < K; ++k) {
    if (seen[k] == 0) continue;
    e.per_class[k] = double(right[k]) / double(seen[k]);
    sum += e.per_class[k];
    ++present;
  }
  e.mean_class_accuracy = sum / double(present);
  return e;
}

Evaluation evaluate(const ClassifierParams& params, const LabeledSet& data) {
  if (data.size() == 0) throw ConfigError("evaluate: empty dataset");
  return evaluate(row_argmax(predict(params, data.features).tensor()), data.labels,
                  params.dims().K);
}

}  // namespace dmilab
