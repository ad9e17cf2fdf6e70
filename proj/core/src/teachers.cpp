#include "dmilab/models/teachers.hpp"

#include <cmath>

#include "dmilab/errors.hpp"
#include "dmilab/models/classifier.hpp"

namespace dmilab {

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, sd);
  Tensor t = Tensor::zeros({rows, cols});
  for (double& v : t.data()) v = nd(rng);
  return t;
}

Tensor matmul_value(const Tensor& a, const Tensor& b) {
  Graph g;
  return matmul(g.constant(a), g.constant(b)).value();
}

void check_view(const Tensor& view, std::size_t dim, const char* what) {
  if (view.rank() != 2 || view.cols() != dim) {
    throw ShapeError(std::string(what) + ": view " + shape_to_string(view.shape()) +
                     " does not match view dim " + std::to_string(dim));
  }
}

}  // namespace

PrototypeTeacherParams make_prototype_teacher(const Tensor& class_means, std::size_t embed_dim,
                                              std::mt19937_64& rng, double tau) {
  if (class_means.rank() != 2 || class_means.rows() < 2) {
    throw ShapeError("make_prototype_teacher: class means must be K x view_dim with K >= 2");
  }
  if (embed_dim == 0) throw ConfigError("make_prototype_teacher: embed_dim must be positive");
  if (!(tau > 0.0)) throw ConfigError("prototype teacher temperature must be positive");
  PrototypeTeacherParams p;
  p.encoder = gaussian(class_means.cols(), embed_dim,
                       1.0 / std::sqrt(static_cast<double>(class_means.cols())), rng);
  p.prototypes = normalize_rows(matmul_value(class_means, p.encoder));
  p.prompt = Tensor::zeros({class_means.rows(), embed_dim});
  p.tau = tau;
  return p;
}

Var prototype_predict(Graph& g, const PrototypeTeacherParams& params, const Tensor& view,
                      const std::string& prompt_name, bool trainable) {
  check_view(view, params.view_dim(), "prototype_predict");
  if (params.prompt.shape() != params.prototypes.shape()) {
    throw ShapeError("prototype_predict: prompt shape differs from prototypes");
  }
  // The encoder is frozen, so the embedding is a constant of the graph.
  Var emb = g.constant(normalize_rows(matmul_value(view, params.encoder)));
  Var v = trainable ? g.parameter(prompt_name, params.prompt) : g.constant(params.prompt);
  Var protos = normalize_rows(add(g.constant(params.prototypes), v));
  return softmax(scale(matmul(emb, transpose(protos)), params.tau));
}

ProbMatrix prototype_predict(const PrototypeTeacherParams& params, const Tensor& view) {
  Graph g;
  return ProbMatrix(prototype_predict(g, params, view, kPromptName, false).value());
}

CaptionTeacherSpec make_caption_teacher(const Tensor& class_means, std::size_t embed_dim,
                                        double noise, std::mt19937_64& rng) {
  if (class_means.rank() != 2 || class_means.rows() < 2) {
    throw ShapeError("make_caption_teacher: class means must be K x view_dim with K >= 2");
  }
  if (embed_dim == 0) throw ConfigError("make_caption_teacher: embed_dim must be positive");
  if (noise < 0.0) throw ConfigError("caption teacher noise must be >= 0");
  CaptionTeacherSpec s;
  s.encoder = gaussian(class_means.cols(), embed_dim,
                       1.0 / std::sqrt(static_cast<double>(class_means.cols())), rng);
  s.class_names = normalize_rows(matmul_value(class_means, s.encoder));
  s.noise = noise;
  return s;
}

Tensor caption_embed(const CaptionTeacherSpec& spec, const Tensor& view, std::uint64_t seed) {
  check_view(view, spec.view_dim(), "caption_embed");
  Tensor e = matmul_value(view, spec.encoder);
  if (spec.noise > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, spec.noise);
    for (double& v : e.data()) v += nd(rng);
  }
  return normalize_rows(e);
}

std::vector<std::size_t> cosine_pseudo_labels(const Tensor& embeddings,
                                              const Tensor& class_names) {
  if (embeddings.rank() != 2 || class_names.rank() != 2 ||
      embeddings.cols() != class_names.cols()) {
    throw ShapeError("cosine_pseudo_labels: embedding dims differ " +
                     shape_to_string(embeddings.shape()) + " vs " +
                     shape_to_string(class_names.shape()));
  }
  Graph g;
  Var e = g.constant(normalize_rows(embeddings));
  Var c = g.constant(normalize_rows(class_names));
  return row_argmax(matmul(e, transpose(c)).value());
}

}  // namespace dmilab
