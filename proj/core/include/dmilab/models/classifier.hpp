#pragma once

#include <cstddef>
#include <random>
#include <string>

#include "dmilab/prob_info/prob_info.hpp"
#include "dmilab/tensor_grad/graph.hpp"

namespace dmilab {

struct ClassifierDims {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t bottleneck_dim = 0;
  std::size_t K = 0;

  friend bool operator==(const ClassifierDims&, const ClassifierDims&) = default;
};

/// input -> tanh(affine) -> affine bottleneck -> affine head -> K logits.
///
/// Tensors live in a ParamStore under fixed keys (see kClassifierKeys) so the
/// optimizer, checkpointing and hashing treat every model the same way.
class ClassifierParams {
 public:
  ClassifierParams() = default;
  /// Validates that every key is present with the shape implied by `dims`.
  ClassifierParams(ClassifierDims dims, ParamStore tensors);

  /// Gaussian weights scaled by 1/sqrt(fan_in), zero biases.
  static ClassifierParams init(const ClassifierDims& dims, std::mt19937_64& rng);
  static ClassifierParams zeros(const ClassifierDims& dims);

  const ClassifierDims& dims() const { return dims_; }
  const ParamStore& tensors() const { return tensors_; }
  ParamStore& tensors() { return tensors_; }

  friend bool operator==(const ClassifierParams&, const ClassifierParams&) = default;

 private:
  ClassifierDims dims_;
  ParamStore tensors_;
};

inline constexpr const char* kClassifierKeys[] = {"enc1.w", "enc1.b", "enc2.w",
                                                  "enc2.b", "head.w", "head.b"};

/// Registers the model's tensors on `g` as parameters named prefix + key, or as
/// constants when `trainable` is false, and returns [n x K] logits.
Var predict_logits(Graph& g, const ClassifierParams& params, Var batch, const std::string& prefix,
                   bool trainable = true);

/// Softmax of predict_logits.
Var predict(Graph& g, const ClassifierParams& params, Var batch, const std::string& prefix,
            bool trainable = true);

/// Value-level prediction on a frozen copy.
ProbMatrix predict(const ClassifierParams& params, const Tensor& batch);

/// Entries of `grads` whose names start with `prefix`, with the prefix removed.
ParamStore gradients_for(const GradientMap& grads, const std::string& prefix);

/// Divides each row by its Euclidean norm. Throws NumericError on a zero row.
Var normalize_rows(Var a);
Tensor normalize_rows(const Tensor& a);

}  // namespace dmilab
