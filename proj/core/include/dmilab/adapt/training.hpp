#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dmilab/models/classifier.hpp"
#include "dmilab/models/teachers.hpp"
#include "dmilab/synthdata/scenario.hpp"

namespace dmilab {

/// Hidden sizes shared by the source, proxy and target classifiers.
struct ModelConfig {
  std::size_t hidden_dim = 32;
  std::size_t bottleneck_dim = 32;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

ClassifierDims classifier_dims(const ScenarioBundle& bundle, const ModelConfig& model);

/// Supervised training with label-smoothed cross-entropy, used for source
/// pretraining and proxy burn-in.
struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  double sigma = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct TrainResult {
  ClassifierParams params;
  /// Mean minibatch loss of each epoch.
  std::vector<double> epoch_loss;
  /// Accuracy on the training labels after the last epoch.
  double train_accuracy = 0.0;
};

/// Rows `idx` of x, in order.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx);

/// Deterministic permutation of 0..n-1 for one epoch of one stage.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t stream,
                                     std::size_t epoch);

/// Minibatch SGD on smoothed cross-entropy starting from `init`. `stage`
/// names the run in a DivergenceError. Zero epochs return `init` unchanged.
TrainResult train_supervised(const ClassifierParams& init, const Tensor& features,
                             const std::vector<std::size_t>& labels, const TrainConfig& cfg,
                             const char* stage);

/// theta_s: fresh initialisation from cfg.seed, trained on the source set.
TrainResult pretrain_source(const ScenarioBundle& bundle, const ModelConfig& model,
                            const TrainConfig& cfg);

// --- teachers --------------------------------------------------------------------

struct TeacherConfig {
  std::size_t embed_dim = 16;
  double tau = 10.0;
  /// Std of the Gaussian noise added to caption embeddings.
  double caption_noise = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const TeacherConfig&, const TeacherConfig&) = default;
};

/// The prototype teacher reads the global latent block, the caption teacher
/// the local one.
struct Teachers {
  PrototypeTeacherParams prototype;
  CaptionTeacherSpec caption;
};

Teachers make_teachers(const ScenarioBundle& bundle, const TeacherConfig& cfg);

/// Cosine pseudo-labels of every target sample from the caption teacher.
std::vector<std::size_t> caption_pseudo_labels(const ScenarioBundle& bundle,
                                               const CaptionTeacherSpec& caption,
                                               std::uint64_t seed);

/// theta_b: a copy of theta_s trained on the caption pseudo-labels of the
/// target set. `train_accuracy` is agreement with those pseudo-labels.
TrainResult burn_in_proxy(const ScenarioBundle& bundle, const std::vector<std::size_t>& pseudo_labels,
                          const ClassifierParams& source, const TrainConfig& cfg);

// --- evaluation ------------------------------------------------------------------

/// Accuracy counts only samples whose true label is below K. A prediction of
/// any class absent from the data is simply wrong; samples of unknown classes
/// (label >= K) are tallied apart.
struct Evaluation {
  double accuracy = 0.0;
  std::size_t n_known = 0;
  std::size_t n_correct = 0;
  std::size_t n_unknown = 0;
  /// Per known class; NaN for classes with no samples.
  std::vector<double> per_class;
  /// Mean of per_class over the classes that occur.
  double mean_class_accuracy = 0.0;
  /// Histogram over K of what unknown-class samples were predicted as.
  std::vector<std::size_t> unknown_predicted_as;
};

/// Throws ConfigError when there is no known-class sample and ShapeError on
/// a length mismatch or a prediction >= K.
Evaluation evaluate(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& truth,
                    std::size_t K);
Evaluation evaluate(const ClassifierParams& params, const LabeledSet& data);

}  // namespace dmilab
