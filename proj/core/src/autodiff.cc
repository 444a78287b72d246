#include "cslab/autodiff.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cslab/errors.h"

namespace cslab::ad {

namespace {

// How the second operand of an elementwise op lines up with the first.
enum Broadcast : std::size_t {
  kSame = 0,
  kScalarB = 1,  // b is {1}
  kRowB = 2,     // b is one row, repeated over a's rows
  kScalarA = 3,
  kRowA = 4,
};

bool is_scalar(const Tensor& t) { return t.size() == 1; }

bool is_row_of(const Tensor& row, const Tensor& m) {
  return m.rank() == 2 && row.rows() == 1 && row.cols() == m.cols() &&
         (row.rank() == 1 || row.shape()[0] == 1);
}

[[noreturn]] void shape_error(std::string_view op, const Tensor& a, const Tensor& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << shape_str(a.shape()) << " and "
     << shape_str(b.shape());
  throw ValidationError(os.str());
}

Broadcast classify(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.same_shape(b)) return kSame;
  if (is_scalar(b)) return kScalarB;
  if (is_scalar(a)) return kScalarA;
  if (is_row_of(b, a)) return kRowB;
  if (is_row_of(a, b)) return kRowA;
  shape_error(op, a, b);
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Views a tensor as a matrix for concat/slice bookkeeping.
std::size_t mrows(const Tensor& t) { return t.rows(); }
std::size_t mcols(const Tensor& t) { return t.cols(); }

}  // namespace

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kParameter: return "parameter";
    case Op::kAdd: return "add";
    case Op::kMul: return "mul";
    case Op::kMatMul: return "matmul";
    case Op::kConv1d: return "conv1d";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kSoftmax: return "softmax";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kLogSumExp: return "logsumexp";
    case Op::kExternalLoss: return "external_loss";
  }
  return "?";
}

const Graph::Node& Graph::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) {
    throw ValidationError("autodiff: variable does not belong to this graph");
  }
  return nodes_[v.id];
}

const Tensor& Graph::grad(Var v) const {
  const Node& n = node(v);
  if (!n.requires_grad) {
    throw ValidationError("autodiff: node '" + std::string(op_name(n.op)) +
                          "' does not track gradients");
  }
  return n.grad;
}

Var Graph::push(Op op, std::vector<std::uint32_t> inputs, Tensor value) {
  if (!value.all_finite()) {
    throw RuntimeError("autodiff: non-finite value produced by op '" +
                       std::string(op_name(op)) + "' with shape " +
                       shape_str(value.shape()));
  }
  Node n;
  n.op = op;
  n.requires_grad = op == Op::kParameter;
  for (auto i : inputs) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::constant(Tensor value) { return push(Op::kConstant, {}, std::move(value)); }

Var Graph::parameter(Tensor value) { return push(Op::kParameter, {}, std::move(value)); }

Var Graph::input(std::string name, Tensor value) {
  if (inputs_by_name_.count(name)) {
    throw ValidationError("autodiff: input '" + name + "' bound twice");
  }
  Var v = constant(std::move(value));
  inputs_by_name_.emplace(std::move(name), v.id);
  return v;
}

Var Graph::input(std::string_view name) const {
  auto it = inputs_by_name_.find(std::string(name));
  if (it == inputs_by_name_.end()) {
    throw ValidationError("autodiff: unbound input '" + std::string(name) + "'");
  }
  return Var{it->second};
}

Var Graph::add(Var a, Var b) {
  const Tensor& x = node(a).value;
  const Tensor& y = node(b).value;
  const Broadcast kind = classify("add", x, y);
  const bool swap = kind == kScalarA || kind == kRowA;
  const Tensor& big = swap ? y : x;
  const Tensor& small = swap ? x : y;
  Tensor out = big;
  const std::size_t n = out.size();
  const std::size_t cols = big.cols();
  if (kind == kSame) {
    for (std::size_t i = 0; i < n; ++i) out[i] += small[i];
  } else if (kind == kScalarA || kind == kScalarB) {
    const double s = small[0];
    for (std::size_t i = 0; i < n; ++i) out[i] += s;
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] += small[i % cols];
  }
  Var r = push(Op::kAdd, {a.id, b.id}, std::move(out));
  nodes_[r.id].aux0 = kind;
  return r;
}

Var Graph::mul(Var a, Var b) {
  const Tensor& x = node(a).value;
  const Tensor& y = node(b).value;
  const Broadcast kind = classify("mul", x, y);
  const bool swap = kind == kScalarA || kind == kRowA;
  const Tensor& big = swap ? y : x;
  const Tensor& small = swap ? x : y;
  Tensor out = big;
  const std::size_t n = out.size();
  const std::size_t cols = big.cols();
  if (kind == kSame) {
    for (std::size_t i = 0; i < n; ++i) out[i] *= small[i];
  } else if (kind == kScalarA || kind == kScalarB) {
    const double s = small[0];
    for (std::size_t i = 0; i < n; ++i) out[i] *= s;
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] *= small[i % cols];
  }
  Var r = push(Op::kMul, {a.id, b.id}, std::move(out));
  nodes_[r.id].aux0 = kind;
  return r;
}

Var Graph::matmul(Var a, Var b) {
  const Tensor& x = node(a).value;
  const Tensor& y = node(b).value;
  const std::size_t m = x.rows();
  const std::size_t k = x.cols();
  const bool column = y.rank() == 1;
  const std::size_t yk = column ? y.size() : y.rows();
  const std::size_t n = column ? 1 : y.cols();
  if (x.rank() != 2 || yk != k) shape_error("matmul", x, y);
  Tensor out = column ? Tensor({m}) : Tensor({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data().data() + i * n;
    const double* xrow = x.data().data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = xrow[p];
      if (xv == 0.0) continue;
      const double* yrow = y.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += xv * yrow[j];
    }
  }
  return push(Op::kMatMul, {a.id, b.id}, std::move(out));
}

Var Graph::conv1d(Var xv, Var wv, std::size_t kernel, std::size_t stride) {
  const Tensor& x = node(xv).value;
  const Tensor& w = node(wv).value;
  if (kernel == 0 || stride == 0) {
    throw ValidationError("conv1d: kernel and stride must be positive");
  }
  const std::size_t t0 = x.rows();
  const std::size_t cin = x.cols();
  if (w.rank() != 2 || w.rows() != kernel * cin || x.rank() != 2) {
    std::ostringstream os;
    os << "conv1d: input " << shape_str(x.shape()) << " with kernel " << kernel
       << " needs weight [" << kernel * cin << ",Cout], got " << shape_str(w.shape());
    throw ValidationError(os.str());
  }
  const std::size_t cout = w.cols();
  const std::size_t pad_left = (kernel - 1) / 2;
  const std::size_t t_out = (t0 + stride - 1) / stride;
  Tensor out({t_out, cout});
  for (std::size_t t = 0; t < t_out; ++t) {
    double* orow = out.data().data() + t * cout;
    for (std::size_t k = 0; k < kernel; ++k) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) -
                                 static_cast<std::ptrdiff_t>(pad_left);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(t0)) continue;
      const double* xrow = x.data().data() + static_cast<std::size_t>(src) * cin;
      for (std::size_t c = 0; c < cin; ++c) {
        const double xval = xrow[c];
        const double* wrow = w.data().data() + (k * cin + c) * cout;
        for (std::size_t o = 0; o < cout; ++o) orow[o] += xval * wrow[o];
      }
    }
  }
  Var r = push(Op::kConv1d, {xv.id, wv.id}, std::move(out));
  nodes_[r.id].aux0 = kernel;
  nodes_[r.id].aux1 = stride;
  return r;
}

Var Graph::sigmoid(Var a) {
  Tensor out = node(a).value;
  for (auto& v : out.data()) v = stable_sigmoid(v);
  return push(Op::kSigmoid, {a.id}, std::move(out));
}

Var Graph::tanh(Var a) {
  Tensor out = node(a).value;
  for (auto& v : out.data()) v = std::tanh(v);
  return push(Op::kTanh, {a.id}, std::move(out));
}

Var Graph::softmax(Var a) {
  Tensor out = node(a).value;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (auto& v : row) z += (v = std::exp(v - mx));
    for (auto& v : row) v /= z;
  }
  return push(Op::kSoftmax, {a.id}, std::move(out));
}

Var Graph::log_softmax(Var a) {
  Tensor out = node(a).value;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double lz = mx + std::log(z);
    for (auto& v : row) v -= lz;
  }
  return push(Op::kLogSoftmax, {a.id}, std::move(out));
}

Var Graph::concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ValidationError("concat: no operands");
  if (axis != 0 && axis != 1) throw ValidationError("concat: axis must be 0 or 1");
  std::vector<std::uint32_t> ids;
  ids.reserve(parts.size());
  std::size_t rows = 0;
  std::size_t cols = 0;
  const Tensor& first = node(parts[0]).value;
  for (Var p : parts) {
    const Tensor& t = node(p).value;
    ids.push_back(p.id);
    if (axis == 0) {
      if (mcols(t) != mcols(first)) shape_error("concat(axis=0)", first, t);
      rows += mrows(t);
    } else {
      if (mrows(t) != mrows(first)) shape_error("concat(axis=1)", first, t);
      cols += mcols(t);
    }
  }
  if (axis == 0) cols = mcols(first);
  else rows = mrows(first);
  Tensor out({rows, cols});
  if (axis == 0) {
    std::size_t offset = 0;
    for (Var p : parts) {
      const Tensor& t = node(p).value;
      std::copy(t.data().begin(), t.data().end(), out.data().begin() + offset);
      offset += t.size();
    }
  } else {
    std::size_t col0 = 0;
    for (Var p : parts) {
      const Tensor& t = node(p).value;
      const std::size_t c = mcols(t);
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(t.data().begin() + r * c, c, out.data().begin() + r * cols + col0);
      }
      col0 += c;
    }
  }
  Var r = push(Op::kConcat, std::move(ids), std::move(out));
  nodes_[r.id].aux0 = static_cast<std::size_t>(axis);
  return r;
}

Var Graph::slice(Var a, int axis, std::size_t begin, std::size_t end) {
  const Tensor& x = node(a).value;
  if (axis != 0 && axis != 1) throw ValidationError("slice: axis must be 0 or 1");
  if (x.rank() == 1 && axis != 0) {
    throw ValidationError("slice: rank-1 tensors only slice along axis 0");
  }
  const std::size_t extent = x.rank() == 1 ? x.size() : x.shape()[axis];
  if (begin >= end || end > extent) {
    std::ostringstream os;
    os << "slice: range [" << begin << "," << end << ") out of bounds for axis " << axis
       << " of shape " << shape_str(x.shape());
    throw ValidationError(os.str());
  }
  Tensor out;
  if (x.rank() == 1) {
    out = Tensor({end - begin});
    std::copy(x.data().begin() + begin, x.data().begin() + end, out.data().begin());
  } else if (axis == 0) {
    out = Tensor({end - begin, x.cols()});
    std::copy(x.data().begin() + begin * x.cols(), x.data().begin() + end * x.cols(),
              out.data().begin());
  } else {
    const std::size_t w = end - begin;
    out = Tensor({x.rows(), w});
    for (std::size_t r = 0; r < x.rows(); ++r) {
      std::copy_n(x.data().begin() + r * x.cols() + begin, w, out.data().begin() + r * w);
    }
  }
  Var r = push(Op::kSlice, {a.id}, std::move(out));
  nodes_[r.id].aux0 = begin;
  nodes_[r.id].aux1 = end;
  nodes_[r.id].aux = Tensor::scalar(axis);
  return r;
}

Var Graph::sum(Var a) {
  double s = 0.0;
  for (double v : node(a).value.data()) s += v;
  return push(Op::kSum, {a.id}, Tensor::scalar(s));
}

Var Graph::mean(Var a) {
  const Tensor& x = node(a).value;
  double s = 0.0;
  for (double v : x.data()) s += v;
  return push(Op::kMean, {a.id}, Tensor::scalar(s / static_cast<double>(x.size())));
}

Var Graph::logsumexp(Var a) {
  const Tensor& x = node(a).value;
  const double mx = *std::max_element(x.data().begin(), x.data().end());
  double z = 0.0;
  for (double v : x.data()) z += std::exp(v - mx);
  return push(Op::kLogSumExp, {a.id}, Tensor::scalar(mx + std::log(z)));
}

Var Graph::external_loss(Var input, double value, Tensor grad_wrt_input) {
  if (!grad_wrt_input.same_shape(node(input).value)) {
    shape_error("external_loss", node(input).value, grad_wrt_input);
  }
  if (!grad_wrt_input.all_finite()) {
    throw RuntimeError("external_loss: non-finite gradient");
  }
  Var r = push(Op::kExternalLoss, {input.id}, Tensor::scalar(value));
  nodes_[r.id].aux = std::move(grad_wrt_input);
  return r;
}

void Graph::backward(Var root) {
  const Node& r = node(root);
  if (r.value.size() != 1) {
    throw ValidationError("backward: root must be a scalar, got shape " +
                          shape_str(r.value.shape()));
  }
  for (auto& n : nodes_) {
    if (!n.requires_grad) continue;
    if (n.grad.same_shape(n.value)) {
      n.grad.fill(0.0);
    } else {
      n.grad = Tensor(n.value.shape());
    }
  }
  if (!r.requires_grad) return;
  nodes_[root.id].grad[0] = 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    if (nodes_[i].requires_grad && !nodes_[i].inputs.empty()) backprop(i);
  }
}

void Graph::backprop(std::size_t index) {
  Node& n = nodes_[index];
  const Tensor& g = n.grad;
  const Tensor& y = n.value;
  auto input = [&](std::size_t k) -> Node& { return nodes_[n.inputs[k]]; };

  switch (n.op) {
    case Op::kConstant:
    case Op::kParameter:
      return;

    case Op::kAdd:
    case Op::kMul: {
      const auto kind = static_cast<Broadcast>(n.aux0);
      const bool swap = kind == kScalarA || kind == kRowA;
      Node& big = swap ? input(1) : input(0);
      Node& small = swap ? input(0) : input(1);
      const std::size_t cols = big.value.cols();
      const bool is_mul = n.op == Op::kMul;
      auto small_at = [&](std::size_t i) -> std::size_t {
        if (kind == kSame) return i;
        if (kind == kScalarA || kind == kScalarB) return 0;
        return i % cols;
      };
      if (big.requires_grad) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          big.grad[i] += is_mul ? g[i] * small.value[small_at(i)] : g[i];
        }
      }
      if (small.requires_grad) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          small.grad[small_at(i)] += is_mul ? g[i] * big.value[i] : g[i];
        }
      }
      return;
    }

    case Op::kMatMul: {
      Node& a = input(0);
      Node& b = input(1);
      const std::size_t m = a.value.rows();
      const std::size_t k = a.value.cols();
      const std::size_t nn = b.value.rank() == 1 ? 1 : b.value.cols();
      const double* gd = g.data().data();
      if (a.requires_grad) {
        // dA = G * B^T
        const double* bd = b.value.data().data();
        double* ad = a.grad.data().data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            const double* brow = bd + p * nn;
            const double* grow = gd + i * nn;
            for (std::size_t j = 0; j < nn; ++j) s += grow[j] * brow[j];
            ad[i * k + p] += s;
          }
        }
      }
      if (b.requires_grad) {
        // dB = A^T * G
        const double* avals = a.value.data().data();
        double* bd = b.grad.data().data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = gd + i * nn;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = avals[i * k + p];
            if (av == 0.0) continue;
            double* brow = bd + p * nn;
            for (std::size_t j = 0; j < nn; ++j) brow[j] += av * grow[j];
          }
        }
      }
      return;
    }

    case Op::kConv1d: {
      Node& x = input(0);
      Node& w = input(1);
      const std::size_t kernel = n.aux0;
      const std::size_t stride = n.aux1;
      const std::size_t t0 = x.value.rows();
      const std::size_t cin = x.value.cols();
      const std::size_t cout = w.value.cols();
      const std::size_t pad_left = (kernel - 1) / 2;
      for (std::size_t t = 0; t < y.rows(); ++t) {
        const double* grow = g.data().data() + t * cout;
        for (std::size_t k = 0; k < kernel; ++k) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) -
                                     static_cast<std::ptrdiff_t>(pad_left);
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(t0)) continue;
          const std::size_t s = static_cast<std::size_t>(src);
          for (std::size_t c = 0; c < cin; ++c) {
            const std::size_t wr = (k * cin + c) * cout;
            if (x.requires_grad) {
              double acc = 0.0;
              for (std::size_t o = 0; o < cout; ++o) acc += grow[o] * w.value[wr + o];
              x.grad[s * cin + c] += acc;
            }
            if (w.requires_grad) {
              const double xval = x.value[s * cin + c];
              for (std::size_t o = 0; o < cout; ++o) w.grad[wr + o] += xval * grow[o];
            }
          }
        }
      }
      return;
    }

    case Op::kSigmoid: {
      Node& a = input(0);
      for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] += g[i] * y[i] * (1.0 - y[i]);
      return;
    }

    case Op::kTanh: {
      Node& a = input(0);
      for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] += g[i] * (1.0 - y[i] * y[i]);
      return;
    }

    case Op::kSoftmax: {
      Node& a = input(0);
      const std::size_t cols = y.cols();
      for (std::size_t r = 0; r < y.rows(); ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) dot += g[r * cols + j] * y[r * cols + j];
        for (std::size_t j = 0; j < cols; ++j) {
          a.grad[r * cols + j] += y[r * cols + j] * (g[r * cols + j] - dot);
        }
      }
      return;
    }

    case Op::kLogSoftmax: {
      Node& a = input(0);
      const std::size_t cols = y.cols();
      for (std::size_t r = 0; r < y.rows(); ++r) {
        double gs = 0.0;
        for (std::size_t j = 0; j < cols; ++j) gs += g[r * cols + j];
        for (std::size_t j = 0; j < cols; ++j) {
          a.grad[r * cols + j] += g[r * cols + j] - std::exp(y[r * cols + j]) * gs;
        }
      }
      return;
    }

    case Op::kConcat: {
      const std::size_t cols = y.cols();
      if (n.aux0 == 0) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          Node& p = input(k);
          const std::size_t sz = p.value.size();
          if (p.requires_grad) {
            for (std::size_t i = 0; i < sz; ++i) p.grad[i] += g[offset + i];
          }
          offset += sz;
        }
      } else {
        std::size_t col0 = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          Node& p = input(k);
          const std::size_t c = p.value.cols();
          if (p.requires_grad) {
            for (std::size_t r = 0; r < y.rows(); ++r) {
              for (std::size_t j = 0; j < c; ++j) {
                p.grad[r * c + j] += g[r * cols + col0 + j];
              }
            }
          }
          col0 += c;
        }
      }
      return;
    }

    case Op::kSlice: {
      Node& a = input(0);
      const std::size_t begin = n.aux0;
      const int axis = static_cast<int>(n.aux[0]);
      if (a.value.rank() == 1 || axis == 0) {
        const std::size_t offset = a.value.rank() == 1 ? begin : begin * a.value.cols();
        for (std::size_t i = 0; i < g.size(); ++i) a.grad[offset + i] += g[i];
      } else {
        const std::size_t w = y.cols();
        const std::size_t cols = a.value.cols();
        for (std::size_t r = 0; r < y.rows(); ++r) {
          for (std::size_t j = 0; j < w; ++j) a.grad[r * cols + begin + j] += g[r * w + j];
        }
      }
      return;
    }

    case Op::kSum: {
      Node& a = input(0);
      for (auto& v : a.grad.data()) v += g[0];
      return;
    }

    case Op::kMean: {
      Node& a = input(0);
      const double share = g[0] / static_cast<double>(a.value.size());
      for (auto& v : a.grad.data()) v += share;
      return;
    }

    case Op::kLogSumExp: {
      Node& a = input(0);
      for (std::size_t i = 0; i < a.value.size(); ++i) {
        a.grad[i] += g[0] * std::exp(a.value[i] - y[0]);
      }
      return;
    }

    case Op::kExternalLoss: {
      Node& a = input(0);
      for (std::size_t i = 0; i < a.value.size(); ++i) a.grad[i] += g[0] * n.aux[i];
      return;
    }
  }
}

double grad_check(const ScalarFn& f, const Tensor& params, double eps) {
  if (!(eps > 0.0)) throw ValidationError("grad_check: eps must be positive");
  Tensor analytic;
  {
    Graph g;
    Var p = g.parameter(params);
    Var root = f(g, p);
    g.backward(root);
    analytic = g.grad(p);
  }
  auto evaluate = [&](const Tensor& at) {
    Graph g;
    Var p = g.parameter(at);
    const double v = g.value(f(g, p)).item();
    if (!std::isfinite(v)) throw RuntimeError("grad_check: non-finite function value");
    return v;
  };
  double worst = 0.0;
  Tensor probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = params[i];
    probe[i] = orig + eps;
    const double up = evaluate(probe);
    probe[i] = orig - eps;
    const double down = evaluate(probe);
    probe[i] = orig;
    const double fd = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic[i] - fd) /
                       std::max(1e-8, std::abs(analytic[i]) + std::abs(fd));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace cslab::ad
