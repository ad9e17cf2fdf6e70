#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "dmilab/tensor_grad/tensor.hpp"

namespace dmilab {

/// Local gradient rule attached to each graph node.
enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kScale,
  kAddScalar,
  kLog,
  kExp,
  kSqrt,
  kTanh,
  kClampMin,
  kMatmul,
  kTranspose,
  kSumAll,
  kSumRows,
  kSumCols,
  kSoftmax,
  kSelectRows,
  kSelectCols,
  kBroadcastRows,
  kBroadcastCols,
  kScalarFunction,
};

const char* op_name(Op op);

/// Reduction direction. `rows` collapses the row index ([n x m] -> [1 x m]),
/// `cols` collapses the column index ([n x m] -> [n x 1]).
enum class Axis { rows, cols };

class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid as long as the graph lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool requires_grad() const;
  bool valid() const { return graph_ != nullptr; }
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only tape. Nodes are stored in creation order, which is a
/// topological order, so the graph cannot contain a cycle and backward is a
/// single reverse sweep.
///
/// A Graph is not thread-safe; separate graphs are fully independent.
class Graph {
 public:
  struct Node {
    Tensor value;
    Op op = Op::kLeaf;
    std::size_t parents[2] = {0, 0};
    std::uint8_t n_parents = 0;
    bool requires_grad = false;
    double scalar = 0.0;
    std::vector<std::size_t> indices;
    Tensor aux;
    std::string param_name;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = delete;
  Graph& operator=(Graph&&) = delete;

  Var constant(Tensor value);

  /// Trainable leaf. Registering the same name twice returns the original
  /// node; the values must agree.
  Var parameter(const std::string& name, const Tensor& value);

  /// Reverse sweep from a scalar loss. Fresh adjoints every call, so calling
  /// twice returns identical maps.
  GradientMap backward(Var loss) const;

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_[id]; }

  Var push(Node node);

 private:
  // deque: references returned by Var::value() survive later pushes.
  std::deque<Node> nodes_;
  std::unordered_map<std::string, std::size_t> params_;
};

// Elementwise. Binary operands must match exactly or one side must hold a
// single element.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// Throws NumericError if any divisor is exactly zero.
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
/// Requires strictly positive input; see safe_log.
Var log(Var a);
Var exp(Var a);
Var sqrt(Var a);
Var tanh(Var a);
Var clamp_min(Var a, double floor);
/// log(clamp_min(a, floor)).
Var safe_log(Var a, double floor);

Var matmul(Var a, Var b);
Var transpose(Var a);

Var sum(Var a);
Var sum(Var a, Axis axis);
Var mean(Var a);
Var mean(Var a, Axis axis);

/// Along the last axis, with max subtraction.
Var softmax(Var a);

/// Order-preserving gather. Empty index lists are rejected.
Var select_rows(Var a, const std::vector<std::size_t>& idx);
Var select_cols(Var a, const std::vector<std::size_t>& idx);

/// [1 x m] -> [n x m]
Var broadcast_rows(Var a, std::size_t n);
/// [n x 1] -> [n x m]
Var broadcast_cols(Var a, std::size_t m);

/// Scalar-valued function of `input` whose value and gradient the caller has
/// already computed. Lets a module fuse a numerically delicate reduction into
/// one node. `gradient` must have the shape of `input`.
Var scalar_function(Var input, double value, Tensor gradient);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }

}  // namespace dmilab
