#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dmilab/prob_info/prob_info.hpp"
#include "dmilab/tensor_grad/graph.hpp"

namespace dmilab {

/// Frozen cosine-prototype classifier over the global view with one trainable
/// tensor: the per-class prompt offset `prompt` (K x embed_dim, starts at 0).
struct PrototypeTeacherParams {
  Tensor encoder;     // view_dim x embed_dim, frozen
  Tensor prototypes;  // K x embed_dim, unit rows, frozen
  Tensor prompt;      // K x embed_dim, trainable
  double tau = 10.0;

  std::size_t K() const { return prototypes.rows(); }
  std::size_t view_dim() const { return encoder.rows(); }
  std::size_t embed_dim() const { return encoder.cols(); }

  friend bool operator==(const PrototypeTeacherParams&, const PrototypeTeacherParams&) = default;
};

inline constexpr const char* kPromptName = "prompt";

/// Random Gaussian encoder; prototypes are the encoded class means.
/// `class_means` is K x view_dim.
PrototypeTeacherParams make_prototype_teacher(const Tensor& class_means, std::size_t embed_dim,
                                              std::mt19937_64& rng, double tau = 10.0);

/// logits_ik = tau * cos(encode(x_i), prototype_k + prompt_k), softmax over k.
/// The prompt is registered as parameter `prompt_name` when trainable.
Var prototype_predict(Graph& g, const PrototypeTeacherParams& params, const Tensor& view,
                      const std::string& prompt_name = kPromptName, bool trainable = true);
ProbMatrix prototype_predict(const PrototypeTeacherParams& params, const Tensor& view);

/// Frozen map from the local view to a text-like embedding space plus the
/// fixed class-name embeddings it is compared against.
struct CaptionTeacherSpec {
  Tensor encoder;      // view_dim x embed_dim
  Tensor class_names;  // K x embed_dim, unit rows
  double noise = 0.0;

  std::size_t K() const { return class_names.rows(); }
  std::size_t view_dim() const { return encoder.rows(); }
  std::size_t embed_dim() const { return encoder.cols(); }
};

/// Class-name embeddings are the normalised encodings of `class_means`
/// (K x view_dim).
CaptionTeacherSpec make_caption_teacher(const Tensor& class_means, std::size_t embed_dim,
                                        double noise, std::mt19937_64& rng);

/// normalize(view * encoder + noise * N(0, 1)), rows in order, with the noise
/// stream seeded from `seed`.
Tensor caption_embed(const CaptionTeacherSpec& spec, const Tensor& view, std::uint64_t seed);

/// Row-wise argmax of cosine similarity to each class-name embedding, ties to
/// the lowest index. Throws NumericError on a zero-norm row.
std::vector<std::size_t> cosine_pseudo_labels(const Tensor& embeddings,
                                              const Tensor& class_names);

}  // namespace dmilab
