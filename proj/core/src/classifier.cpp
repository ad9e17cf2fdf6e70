#include "dmilab/models/classifier.hpp"

#include <cmath>

#include "dmilab/errors.hpp"

namespace dmilab {

namespace {

Shape expected_shape(const ClassifierDims& d, const std::string& key) {
  if (key == "enc1.w") return {d.input_dim, d.hidden_dim};
  if (key == "enc1.b") return {1, d.hidden_dim};
  if (key == "enc2.w") return {d.hidden_dim, d.bottleneck_dim};
  if (key == "enc2.b") return {1, d.bottleneck_dim};
  if (key == "head.w") return {d.bottleneck_dim, d.K};
  return {1, d.K};
}

void validate_dims(const ClassifierDims& d) {
  if (d.input_dim == 0 || d.hidden_dim == 0 || d.bottleneck_dim == 0) {
    throw ConfigError("classifier dimensions must be positive");
  }
  if (d.K < 2) throw ConfigError("classifier needs K >= 2");
}

}  // namespace

ClassifierParams::ClassifierParams(ClassifierDims dims, ParamStore tensors)
    : dims_(dims), tensors_(std::move(tensors)) {
  validate_dims(dims_);
  if (tensors_.size() != std::size(kClassifierKeys)) {
    throw ShapeError("classifier expects exactly " + std::to_string(std::size(kClassifierKeys)) +
                     " tensors");
  }
  for (const char* key : kClassifierKeys) {
    auto it = tensors_.find(key);
    if (it == tensors_.end()) throw ShapeError(std::string("classifier tensor missing: ") + key);
    const Shape want = expected_shape(dims_, key);
    if (it->second.shape() != want) {
      throw ShapeError(std::string("classifier tensor ") + key + " has shape " +
                       shape_to_string(it->second.shape()) + ", expected " +
                       shape_to_string(want));
    }
  }
}

ClassifierParams ClassifierParams::init(const ClassifierDims& dims, std::mt19937_64& rng) {
  validate_dims(dims);
  ParamStore t;
  for (const char* key : kClassifierKeys) {
    const Shape shape = expected_shape(dims, key);
    Tensor v = Tensor::zeros(shape);
    if (std::string(key).ends_with(".w")) {
      std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(shape[0])));
      for (double& x : v.data()) x = nd(rng);
    }
    t.emplace(key, std::move(v));
  }
  return ClassifierParams(dims, std::move(t));
}

ClassifierParams ClassifierParams::zeros(const ClassifierDims& dims) {
  validate_dims(dims);
  ParamStore t;
  for (const char* key : kClassifierKeys) t.emplace(key, Tensor::zeros(expected_shape(dims, key)));
  return ClassifierParams(dims, std::move(t));
}

Var predict_logits(Graph& g, const ClassifierParams& params, Var batch, const std::string& prefix,
                   bool trainable) {
  const auto& d = params.dims();
  const Tensor& x = batch.value();
  if (x.rank() != 2 || x.cols() != d.input_dim) {
    throw ShapeError("predict: batch " + shape_to_string(x.shape()) + " does not match input dim " +
                     std::to_string(d.input_dim));
  }
  auto bind = [&](const char* key) {
    const Tensor& t = params.tensors().at(key);
    return trainable ? g.parameter(prefix + key, t) : g.constant(t);
  };
  const std::size_t n = x.rows();
  Var h = tanh(add(matmul(batch, bind("enc1.w")), broadcast_rows(bind("enc1.b"), n)));
  Var z = add(matmul(h, bind("enc2.w")), broadcast_rows(bind("enc2.b"), n));
  return add(matmul(z, bind("head.w")), broadcast_rows(bind("head.b"), n));
}

Var predict(Graph& g, const ClassifierParams& params, Var batch, const std::string& prefix,
            bool trainable) {
  return softmax(predict_logits(g, params, batch, prefix, trainable));
}

ProbMatrix predict(const ClassifierParams& params, const Tensor& batch) {
  Graph g;
  return ProbMatrix(predict(g, params, g.constant(batch), "", false).value());
}

ParamStore gradients_for(const GradientMap& grads, const std::string& prefix) {
  ParamStore out;
  for (const auto& [name, grad] : grads) {
    if (name.starts_with(prefix)) out.emplace(name.substr(prefix.size()), grad);
  }
  return out;
}

Var normalize_rows(Var a) {
  const Tensor& v = a.value();
  if (v.rank() != 2) throw ShapeError("normalize_rows expects a rank-2 tensor");
  Var norm = sqrt(sum(mul(a, a), Axis::cols));
  for (double x : norm.value().data()) {
    if (x == 0.0) throw NumericError("normalize_rows: zero-norm row");
  }
  return div(a, broadcast_cols(norm, v.cols()));
}

Tensor normalize_rows(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("normalize_rows expects a rank-2 tensor");
  Tensor out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j) * a(i, j);
    if (s == 0.0) throw NumericError("normalize_rows: zero-norm row " + std::to_string(i));
    const double inv = 1.0 / std::sqrt(s);
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) *= inv;
  }
  return out;
}

}  // namespace dmilab
