#include "dmilab/tensor_grad/graph.hpp"

#include <algorithm>
#include <cmath>

#include "dmilab/errors.hpp"

namespace dmilab {

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kLog: return "log";
    case Op::kExp: return "exp";
    case Op::kSqrt: return "sqrt";
    case Op::kTanh: return "tanh";
    case Op::kClampMin: return "clamp_min";
    case Op::kMatmul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kSumAll: return "sum";
    case Op::kSumRows: return "sum_rows";
    case Op::kSumCols: return "sum_cols";
    case Op::kSoftmax: return "softmax";
    case Op::kSelectRows: return "select_rows";
    case Op::kSelectCols: return "select_cols";
    case Op::kBroadcastRows: return "broadcast_rows";
    case Op::kBroadcastCols: return "broadcast_cols";
    case Op::kScalarFunction: return "scalar_function";
  }
  return "?";
}

const Tensor& Var::value() const { return graph_->node(id_).value; }

bool Var::requires_grad() const { return graph_->node(id_).requires_grad; }

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::parameter(const std::string& name, const Tensor& value) {
  if (auto it = params_.find(name); it != params_.end()) {
    if (!(nodes_[it->second].value == value)) {
      throw ConfigError("parameter '" + name + "' registered twice with different values");
    }
    return Var(this, it->second);
  }
  Node n;
  n.value = value;
  n.requires_grad = true;
  n.param_name = name;
  Var v = push(std::move(n));
  params_.emplace(name, v.id());
  return v;
}

Var Graph::push(Node node) {
  for (std::uint8_t i = 0; i < node.n_parents; ++i) {
    if (nodes_[node.parents[i]].requires_grad) node.requires_grad = true;
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

namespace {

void same_graph(Var a, Var b) {
  if (&a.graph() != &b.graph()) throw ShapeError("operands belong to different graphs");
}

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + " expects a rank-2 tensor, got " +
                     shape_to_string(t.shape()));
  }
}

enum class Bcast { kNone, kLeftScalar, kRightScalar };

Bcast broadcast_kind(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() == b.shape()) return Bcast::kNone;
  if (a.numel() == 1) return Bcast::kLeftScalar;
  if (b.numel() == 1) return Bcast::kRightScalar;
  throw ShapeError(std::string(what) + ": shape mismatch " + shape_to_string(a.shape()) +
                   " vs " + shape_to_string(b.shape()));
}

template <class F>
Tensor binary_apply(const Tensor& a, const Tensor& b, Bcast kind, F f) {
  const Tensor& out_like = kind == Bcast::kLeftScalar ? b : a;
  Tensor out = Tensor::zeros(out_like.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = kind == Bcast::kLeftScalar ? a[0] : a[i];
    const double y = kind == Bcast::kRightScalar ? b[0] : b[i];
    out[i] = f(x, y);
  }
  return out;
}

template <class F>
Tensor unary_apply(const Tensor& a, F f) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i]);
  return out;
}

Var make_binary(Var a, Var b, Op op, Tensor value) {
  Graph::Node n;
  n.value = std::move(value);
  n.op = op;
  n.parents[0] = a.id();
  n.parents[1] = b.id();
  n.n_parents = 2;
  return a.graph().push(std::move(n));
}

Var make_unary(Var a, Op op, Tensor value, double scalar = 0.0,
               std::vector<std::size_t> indices = {}) {
  Graph::Node n;
  n.value = std::move(value);
  n.op = op;
  n.parents[0] = a.id();
  n.n_parents = 1;
  n.scalar = scalar;
  n.indices = std::move(indices);
  return a.graph().push(std::move(n));
}

void check_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string(what) + " produced a non-finite value");
}

}  // namespace

Var add(Var a, Var b) {
  same_graph(a, b);
  const auto k = broadcast_kind(a.value(), b.value(), "add");
  return make_binary(a, b, Op::kAdd,
                     binary_apply(a.value(), b.value(), k, [](double x, double y) { return x + y; }));
}

Var sub(Var a, Var b) {
  same_graph(a, b);
  const auto k = broadcast_kind(a.value(), b.value(), "sub");
  return make_binary(a, b, Op::kSub,
                     binary_apply(a.value(), b.value(), k, [](double x, double y) { return x - y; }));
}

Var mul(Var a, Var b) {
  same_graph(a, b);
  const auto k = broadcast_kind(a.value(), b.value(), "mul");
  return make_binary(a, b, Op::kMul,
                     binary_apply(a.value(), b.value(), k, [](double x, double y) { return x * y; }));
}

Var div(Var a, Var b) {
  same_graph(a, b);
  const auto k = broadcast_kind(a.value(), b.value(), "div");
  for (double d : b.value().data()) {
    if (d == 0.0) throw NumericError("div: division by exact zero (clamp the divisor first)");
  }
  Tensor out = binary_apply(a.value(), b.value(), k, [](double x, double y) { return x / y; });
  check_finite(out, "div");
  return make_binary(a, b, Op::kDiv, std::move(out));
}

Var neg(Var a) {
  return make_unary(a, Op::kNeg, unary_apply(a.value(), [](double x) { return -x; }));
}

Var scale(Var a, double factor) {
  return make_unary(a, Op::kScale, unary_apply(a.value(), [factor](double x) { return factor * x; }),
                    factor);
}

Var add_scalar(Var a, double offset) {
  return make_unary(a, Op::kAddScalar,
                    unary_apply(a.value(), [offset](double x) { return x + offset; }), offset);
}

Var log(Var a) {
  for (double x : a.value().data()) {
    if (!(x > 0.0)) throw NumericError("log: non-positive input (use safe_log)");
  }
  return make_unary(a, Op::kLog, unary_apply(a.value(), [](double x) { return std::log(x); }));
}

Var exp(Var a) {
  Tensor out = unary_apply(a.value(), [](double x) { return std::exp(x); });
  check_finite(out, "exp");
  return make_unary(a, Op::kExp, std::move(out));
}

Var sqrt(Var a) {
  for (double x : a.value().data()) {
    if (!(x > 0.0)) throw NumericError("sqrt: non-positive input");
  }
  return make_unary(a, Op::kSqrt, unary_apply(a.value(), [](double x) { return std::sqrt(x); }));
}

Var tanh(Var a) {
  return make_unary(a, Op::kTanh, unary_apply(a.value(), [](double x) { return std::tanh(x); }));
}

Var clamp_min(Var a, double floor) {
  return make_unary(a, Op::kClampMin,
                    unary_apply(a.value(), [floor](double x) { return x < floor ? floor : x; }),
                    floor);
}

Var safe_log(Var a, double floor) { return log(clamp_min(a, floor)); }

namespace {

Tensor transpose_value(const Tensor& x) {
  const std::size_t n = x.rows(), m = x.cols();
  Tensor out = Tensor::zeros({m, n});
  const double* xp = x.values().data();
  double* op = out.data().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) op[j * n + i] = xp[i * m + j];
  return out;
}

Tensor matmul_value(const Tensor& x, const Tensor& y) {
  const std::size_t n = x.rows(), m = x.cols(), k = y.cols();
  Tensor out = Tensor::zeros({n, k});
  const double* xp = x.values().data();
  const double* yp = y.values().data();
  double* op = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = op + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double xv = xp[i * m + j];
      if (xv == 0.0) continue;
      const double* yrow = yp + j * k;
      for (std::size_t c = 0; c < k; ++c) orow[c] += xv * yrow[c];
    }
  }
  return out;
}

// a^T * b without materialising the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), m = a.cols(), k = b.cols();
  Tensor out = Tensor::zeros({m, k});
  const double* ap = a.values().data();
  const double* bp = b.values().data();
  double* op = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* brow = bp + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double av = ap[i * m + j];
      if (av == 0.0) continue;
      double* orow = op + j * k;
      for (std::size_t c = 0; c < k; ++c) orow[c] += av * brow[c];
    }
  }
  return out;
}

// a * b^T
Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), m = a.cols(), k = b.rows();
  Tensor out = Tensor::zeros({n, k});
  const double* ap = a.values().data();
  const double* bp = b.values().data();
  double* op = out.data().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += ap[i * m + j] * bp[c * m + j];
      op[i * k + c] = s;
    }
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  same_graph(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_rank2(x, "matmul");
  require_rank2(y, "matmul");
  if (y.rows() != x.cols()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_to_string(x.shape()) + " * " +
                     shape_to_string(y.shape()));
  }
  Tensor out = matmul_value(x, y);
  return make_binary(a, b, Op::kMatmul, std::move(out));
}


Var transpose(Var a) {
  require_rank2(a.value(), "transpose");
  return make_unary(a, Op::kTranspose, transpose_value(a.value()));
}

Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return make_unary(a, Op::kSumAll, Tensor::scalar(s));
}

Var sum(Var a, Axis axis) {
  const Tensor& x = a.value();
  require_rank2(x, "sum(axis)");
  const std::size_t n = x.rows(), m = x.cols();
  if (axis == Axis::rows) {
    Tensor out = Tensor::zeros({1, m});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out[j] += x(i, j);
    return make_unary(a, Op::kSumRows, std::move(out));
  }
  Tensor out = Tensor::zeros({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += x(i, j);
    out[i] = s;
  }
  return make_unary(a, Op::kSumCols, std::move(out));
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().numel())); }

Var mean(Var a, Axis axis) {
  const Tensor& x = a.value();
  require_rank2(x, "mean(axis)");
  const double count = static_cast<double>(axis == Axis::rows ? x.rows() : x.cols());
  return scale(sum(a, axis), 1.0 / count);
}

Var softmax(Var a) {
  const Tensor& x = a.value();
  if (x.rank() == 0 || x.rank() > 2) {
    throw ShapeError("softmax expects rank 1 or 2, got " + shape_to_string(x.shape()));
  }
  const std::size_t n = x.rows(), m = x.cols();
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = x[i * m];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, x[i * m + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double e = std::exp(x[i * m + j] - mx);
      out[i * m + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= z;
  }
  return make_unary(a, Op::kSoftmax, std::move(out));
}

Var select_rows(Var a, const std::vector<std::size_t>& idx) {
  const Tensor& x = a.value();
  require_rank2(x, "select_rows");
  if (idx.empty()) throw ShapeError("select_rows: empty index subset");
  const std::size_t m = x.cols();
  Tensor out = Tensor::zeros({idx.size(), m});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= x.rows()) {
      throw ShapeError("select_rows: index " + std::to_string(idx[r]) + " out of range for " +
                       shape_to_string(x.shape()));
    }
    for (std::size_t j = 0; j < m; ++j) out(r, j) = x(idx[r], j);
  }
  return make_unary(a, Op::kSelectRows, std::move(out), 0.0, idx);
}

Var select_cols(Var a, const std::vector<std::size_t>& idx) {
  const Tensor& x = a.value();
  require_rank2(x, "select_cols");
  if (idx.empty()) throw ShapeError("select_cols: empty index subset");
  const std::size_t n = x.rows();
  for (std::size_t c : idx) {
    if (c >= x.cols()) {
      throw ShapeError("select_cols: index " + std::to_string(c) + " out of range for " +
                       shape_to_string(x.shape()));
    }
  }
  Tensor out = Tensor::zeros({n, idx.size()});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < idx.size(); ++c) out(i, c) = x(i, idx[c]);
  return make_unary(a, Op::kSelectCols, std::move(out), 0.0, idx);
}

Var broadcast_rows(Var a, std::size_t n) {
  const Tensor& x = a.value();
  if (x.rank() != 2 || x.rows() != 1) {
    throw ShapeError("broadcast_rows expects [1 x m], got " + shape_to_string(x.shape()));
  }
  const std::size_t m = x.cols();
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) = x[j];
  return make_unary(a, Op::kBroadcastRows, std::move(out));
}

Var broadcast_cols(Var a, std::size_t m) {
  const Tensor& x = a.value();
  if (x.rank() != 2 || x.cols() != 1) {
    throw ShapeError("broadcast_cols expects [n x 1], got " + shape_to_string(x.shape()));
  }
  const std::size_t n = x.rows();
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) = x[i];
  return make_unary(a, Op::kBroadcastCols, std::move(out));
}

Var scalar_function(Var input, double value, Tensor gradient) {
  if (gradient.shape() != input.value().shape()) {
    throw ShapeError("scalar_function: gradient " + shape_to_string(gradient.shape()) +
                     " does not match input " + shape_to_string(input.value().shape()));
  }
  if (!std::isfinite(value) || !gradient.all_finite()) {
    throw NumericError("scalar_function: non-finite value or gradient");
  }
  Graph::Node n;
  n.value = Tensor::scalar(value);
  n.op = Op::kScalarFunction;
  n.parents[0] = input.id();
  n.n_parents = 1;
  n.aux = std::move(gradient);
  return input.graph().push(std::move(n));
}

namespace {

void accumulate(std::vector<Tensor>& adj, std::vector<bool>& has, std::size_t id,
                const Tensor& g) {
  if (!has[id]) {
    adj[id] = g;
    has[id] = true;
    return;
  }
  auto dst = adj[id].data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Gradient for an operand that may have been scalar-broadcast.
Tensor reduce_to(const Tensor& g, const Tensor& operand) {
  if (operand.shape() == g.shape()) return g;
  double s = 0.0;
  for (double v : g.data()) s += v;
  return Tensor(operand.shape(), {s});
}

}  // namespace

GradientMap Graph::backward(Var loss) const {
  if (&loss.graph() != this) throw ShapeError("backward: loss belongs to another graph");
  const Tensor& lv = loss.value();
  if (lv.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_to_string(lv.shape()));
  }
  std::vector<Tensor> adj(loss.id() + 1);
  std::vector<bool> has(loss.id() + 1, false);
  adj[loss.id()] = Tensor::filled(lv.shape(), 1.0);
  has[loss.id()] = true;

  GradientMap grads;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    if (!has[id]) continue;
    const Node& n = nodes_[id];
    if (!n.requires_grad) continue;
    const Tensor& g = adj[id];
    if (n.op == Op::kLeaf) {
      grads.emplace(n.param_name, g);
      continue;
    }
    const std::size_t p0 = n.parents[0];
    const std::size_t p1 = n.parents[1];
    const Node& a = nodes_[p0];
    const bool ga = a.requires_grad;
    const bool gb = n.n_parents > 1 && nodes_[p1].requires_grad;
    const Tensor& y = n.value;

    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd:
        if (ga) accumulate(adj, has, p0, reduce_to(g, a.value));
        if (gb) accumulate(adj, has, p1, reduce_to(g, nodes_[p1].value));
        break;
      case Op::kSub:
        if (ga) accumulate(adj, has, p0, reduce_to(g, a.value));
        if (gb) {
          Tensor t = unary_apply(g, [](double v) { return -v; });
          accumulate(adj, has, p1, reduce_to(t, nodes_[p1].value));
        }
        break;
      case Op::kMul:
      case Op::kDiv: {
        const Tensor& av = a.value;
        const Tensor& bv = nodes_[p1].value;
        const Bcast k = av.shape() == bv.shape() ? Bcast::kNone
                        : av.numel() == 1         ? Bcast::kLeftScalar
                                                  : Bcast::kRightScalar;
        const bool is_mul = n.op == Op::kMul;
        if (ga) {
          Tensor t = Tensor::zeros(g.shape());
          for (std::size_t i = 0; i < g.numel(); ++i) {
            const double bi = k == Bcast::kRightScalar ? bv[0] : bv[i];
            t[i] = is_mul ? g[i] * bi : g[i] / bi;
          }
          accumulate(adj, has, p0, reduce_to(t, av));
        }
        if (gb) {
          Tensor t = Tensor::zeros(g.shape());
          for (std::size_t i = 0; i < g.numel(); ++i) {
            const double ai = k == Bcast::kLeftScalar ? av[0] : av[i];
            const double bi = k == Bcast::kRightScalar ? bv[0] : bv[i];
            t[i] = is_mul ? g[i] * ai : -g[i] * ai / (bi * bi);
          }
          accumulate(adj, has, p1, reduce_to(t, bv));
        }
        break;
      }
      case Op::kNeg:
        accumulate(adj, has, p0, unary_apply(g, [](double v) { return -v; }));
        break;
      case Op::kScale: {
        const double c = n.scalar;
        accumulate(adj, has, p0, unary_apply(g, [c](double v) { return c * v; }));
        break;
      }
      case Op::kAddScalar:
        accumulate(adj, has, p0, g);
        break;
      case Op::kLog: {
        Tensor t = Tensor::zeros(g.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) t[i] = g[i] / a.value[i];
        accumulate(adj, has, p0, t);
        break;
      }
      case Op::kExp: {
        Tensor t = Tensor::zeros(g.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) t[i] = g[i] * y[i];
        accumulate(adj, has, p0, t);
        break;
      }
      case Op::kSqrt: {
        Tensor t = Tensor::zeros(g.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) t[i] = g[i] / (2.0 * y[i]);
        accumulate(adj, has, p0, t);
        break;
      }
      case Op::kTanh: {
        Tensor t = Tensor::zeros(g.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) t[i] = g[i] * (1.0 - y[i] * y[i]);
        accumulate(adj, has, p0, t);
        break;
      }
      case Op::kClampMin: {
        Tensor t = Tensor::zeros(g.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) t[i] = a.value[i] < n.scalar ? 0.0 : g[i];
        accumulate(adj, has, p0, t);
        break;
      }
      case Op::kMatmul:
        if (ga) accumulate(adj, has, p0, matmul_nt(g, nodes_[p1].value));
        if (gb) accumulate(adj, has, p1, matmul_tn(a.value, g));
        break;
      case Op::kTranspose:
        accumulate(adj, has, p0, transpose_value(g));
        break;
      case Op::kSumAll:
        accumulate(adj, has, p0, Tensor::filled(a.value.shape(), g[0]));
        break;
      case Op::kSumRows: {
        const std::size_t rows = a.value.rows(), cols = a.value.cols();
        Tensor t = Tensor::zeros(a.value.shape());
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) t(i, j) = g[j];
        accumulate(adj, has, p0, t);
        break;
      }
      case Op::kSumCols: {
        const std::size_t rows = a.value.rows(), cols = a.value.cols();
        Tensor t = Tensor::zeros(a.value.shape());
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) t(i, j) = g[i];
        accumulate(adj, has, p0, t);
        break;
      }
      case Op::kSoftmax: {
        const std::size_t rows = y.rows(), cols = y.cols();
        Tensor t = Tensor::zeros(y.shape());
        for (std::size_t i = 0; i < rows; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < cols; ++j) dot += g[i * cols + j] * y[i * cols + j];
          for (std::size_t j = 0; j < cols; ++j)
            t[i * cols + j] = y[i * cols + j] * (g[i * cols + j] - dot);
        }
        accumulate(adj, has, p0, t);
        break;
      }
      case Op::kSelectRows: {
        Tensor t = Tensor::zeros(a.value.shape());
        const std::size_t cols = a.value.cols();
        for (std::size_t r = 0; r < n.indices.size(); ++r)
          for (std::size_t j = 0; j < cols; ++j) t(n.indices[r], j) += g(r, j);
        accumulate(adj, has, p0, t);
        break;
      }
      case Op::kSelectCols: {
        Tensor t = Tensor::zeros(a.value.shape());
        const std::size_t rows = a.value.rows();
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t c = 0; c < n.indices.size(); ++c) t(i, n.indices[c]) += g(i, c);
        accumulate(adj, has, p0, t);
        break;
      }
      case Op::kBroadcastRows: {
        Tensor t = Tensor::zeros(a.value.shape());
        const std::size_t rows = g.rows(), cols = g.cols();
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) t[j] += g(i, j);
        accumulate(adj, has, p0, t);
        break;
      }
      case Op::kBroadcastCols: {
        Tensor t = Tensor::zeros(a.value.shape());
        const std::size_t rows = g.rows(), cols = g.cols();
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) t[i] += g(i, j);
        accumulate(adj, has, p0, t);
        break;
      }
      case Op::kScalarFunction: {
        const double up = g[0];
        accumulate(adj, has, p0, unary_apply(n.aux, [up](double v) { return up * v; }));
        break;
      }
    }
  }
  return grads;
}

}  // namespace dmilab
