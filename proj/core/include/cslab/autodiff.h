#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cslab/tensor.h"

// Reverse-mode automatic differentiation on a define-by-run tape.
//
// Every op evaluates eagerly when it is recorded, so building the graph is the
// forward pass; node values stay cached on the tape for backward(). Nodes are
// appended in evaluation order, which makes the tape a topological order of
// the DAG by construction.
namespace cslab::ad {

enum class Op : std::uint8_t {
  kConstant,
  kParameter,
  kAdd,
  kMul,
  kMatMul,
  kConv1d,
  kSigmoid,
  kTanh,
  kSoftmax,
  kLogSoftmax,
  kConcat,
  kSlice,
  kSum,
  kMean,
  kLogSumExp,
  kExternalLoss,
};

std::string_view op_name(Op op);

// Handle to a node on a Graph tape.
struct Var {
  static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
  std::uint32_t id = kNone;
  bool valid() const { return id != kNone; }
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // Leaves. Constants never receive gradient; parameters always do.
  Var constant(Tensor value);
  Var parameter(Tensor value);
  // Named constant binding; fetch it back with input(name).
  Var input(std::string name, Tensor value);
  Var input(std::string_view name) const;

  // Elementwise; the second operand may also be a scalar {1} or a row vector
  // broadcast over the rows of the first (and vice versa).
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double k) { return mul(a, constant(Tensor::scalar(k))); }

  // [M x K] * [K x N]. A rank-1 right operand is treated as a column vector
  // and yields a rank-1 result.
  Var matmul(Var a, Var b);

  // 1-D convolution over time. x is [T0 x Cin]; w is [(kernel * Cin) x Cout]
  // with row index k * Cin + c. Zero padding of (kernel - 1) / 2 frames on the
  // left and the remainder on the right gives T = ceil(T0 / stride) frames.
  Var conv1d(Var x, Var w, std::size_t kernel, std::size_t stride = 1);

  Var sigmoid(Var a);
  Var tanh(Var a);
  // Row-wise over the last axis.
  Var softmax(Var a);
  Var log_softmax(Var a);

  // axis 0 stacks rows, axis 1 joins columns. Operands are viewed as matrices.
  Var concat(std::span<const Var> parts, int axis);
  Var slice(Var a, int axis, std::size_t begin, std::size_t end);

  // Full reductions to a scalar.
  Var sum(Var a);
  Var mean(Var a);
  Var logsumexp(Var a);

  // Scalar whose value and gradient with respect to `input` were computed
  // outside the tape (e.g. by a dedicated forward-backward routine).
  Var external_loss(Var input, double value, Tensor grad_wrt_input);

  // Zeroes every gradient, then accumulates d(root)/d(node) into all nodes
  // that depend on a parameter. root must be a scalar.
  void backward(Var root);

  const Tensor& value(Var v) const { return node(v).value; }
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  Op op(Var v) const { return node(v).op; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op op = Op::kConstant;
    std::vector<std::uint32_t> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::size_t aux0 = 0;  // axis / kernel / slice begin
    std::size_t aux1 = 0;  // stride / slice end
    Tensor aux;            // external gradient
  };

  const Node& node(Var v) const;
  Var push(Op op, std::vector<std::uint32_t> inputs, Tensor value);
  void backprop(std::size_t index);

  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::uint32_t> inputs_by_name_;
};

// Builds a scalar function of one parameter tensor on a fresh tape.
using ScalarFn = std::function<Var(Graph&, Var)>;

// Compares backward() against central finite differences and returns
// max_i |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|). Throws if eps <= 0 or
// any evaluation is non-finite.
double grad_check(const ScalarFn& f, const Tensor& params, double eps);

}  // namespace cslab::ad
