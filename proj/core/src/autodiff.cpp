#include "red/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace red {

namespace {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatrixRM>;
using MapCM = Eigen::Map<const MatrixRM>;

MapCM as_matrix(const Tensor& t) {
  return MapCM(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

MapM as_matrix(Tensor& t) {
  return MapM(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

[[noreturn]] void shape_error(Primitive op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string("primitive ") + primitive_name(op) + ": shapes " +
                              a.shape_str() + " and " + b.shape_str() + " do not conform");
}

[[noreturn]] void shape_error(Primitive op, const Tensor& a) {
  throw std::invalid_argument(std::string("primitive ") + primitive_name(op) +
                              ": unsupported shape " + a.shape_str());
}

void check_finite(Primitive op, const std::vector<const Tensor*>& inputs) {
  for (const Tensor* t : inputs) {
    if (!t->all_finite()) {
      throw std::invalid_argument(std::string("primitive ") + primitive_name(op) +
                                  ": non-finite input rejected");
    }
  }
}

void check_arity(Primitive op, const std::vector<const Tensor*>& inputs, std::size_t want) {
  if (inputs.size() != want) {
    throw std::invalid_argument(std::string("primitive ") + primitive_name(op) + ": expected " +
                                std::to_string(want) + " inputs, got " +
                                std::to_string(inputs.size()));
  }
}

Tensor eval_matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() > 2 || b.rank() != 2) shape_error(Primitive::kMatMul, a, b);
  const std::size_t m = a.rows(), k = a.cols();
  const std::size_t bk = transpose_b ? b.cols() : b.rows();
  const std::size_t n = transpose_b ? b.rows() : b.cols();
  if (k != bk) shape_error(Primitive::kMatMul, a, b);
  Tensor out = a.rank() == 1 ? Tensor({n}) : Tensor({m, n});
  if (transpose_b) {
    as_matrix(out).noalias() = as_matrix(a) * as_matrix(b).transpose();
  } else {
    as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
  }
  return out;
}

// b may broadcast over rows of a when it is rank-1 of matching width
bool row_broadcast_ok(const Tensor& a, const Tensor& b) {
  return a.rank() == 2 && b.rank() == 1 && b.size() == a.cols();
}

Tensor eval_add(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  if (a.same_shape(b)) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  } else if (row_broadcast_ok(a, b)) {
    const std::size_t n = a.cols();
    for (std::size_t r = 0; r < a.rows(); ++r)
      for (std::size_t c = 0; c < n; ++c) out[r * n + c] += b[c];
  } else {
    shape_error(Primitive::kAdd, a, b);
  }
  return out;
}

Tensor eval_mul(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  if (a.same_shape(b)) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  } else if (row_broadcast_ok(a, b)) {
    const std::size_t n = a.cols();
    for (std::size_t r = 0; r < a.rows(); ++r)
      for (std::size_t c = 0; c < n; ++c) out[r * n + c] *= b[c];
  } else {
    shape_error(Primitive::kElemMul, a, b);
  }
  return out;
}

void softmax_rows(const double* in, double* out, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in + r * cols;
    double* y = out + r * cols;
    double mx = x[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      z += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
  }
}

Tensor eval_softmax(const Tensor& a) {
  if (a.rank() != 1 && a.rank() != 2) shape_error(Primitive::kSoftmaxLastAxis, a);
  Tensor out(a.shape());
  softmax_rows(a.data(), out.data(), a.rows(), a.cols());
  return out;
}

Tensor eval_concat(const Tensor& a, const Tensor& b) {
  if (a.rank() == 1 && b.rank() == 1) {
    Tensor out({a.size() + b.size()});
    std::copy(a.data(), a.data() + a.size(), out.data());
    std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
    return out;
  }
  if (a.rank() == 2 && b.rank() == 2 && a.rows() == b.rows()) {
    const std::size_t m = a.rows(), ca = a.cols(), cb = b.cols();
    Tensor out({m, ca + cb});
    for (std::size_t r = 0; r < m; ++r) {
      std::copy(a.data() + r * ca, a.data() + (r + 1) * ca, out.data() + r * (ca + cb));
      std::copy(b.data() + r * cb, b.data() + (r + 1) * cb, out.data() + r * (ca + cb) + ca);
    }
    return out;
  }
  shape_error(Primitive::kConcatLastAxis, a, b);
}

Tensor eval_mean_axis(const Tensor& a, int axis) {
  if (a.rank() == 1) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
    return Tensor::scalar(s / static_cast<double>(a.size()));
  }
  if (a.rank() != 2 || (axis != 0 && axis != 1)) shape_error(Primitive::kMeanAxis, a);
  const std::size_t m = a.rows(), n = a.cols();
  if (axis == 0) {
    Tensor out({n});
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) out[c] += a(r, c);
    for (std::size_t c = 0; c < n; ++c) out[c] /= static_cast<double>(m);
    return out;
  }
  Tensor out({m});
  for (std::size_t r = 0; r < m; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += a(r, c);
    out[r] = s / static_cast<double>(n);
  }
  return out;
}

double huber(double d) { return std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5; }
double huber_grad(double d) { return std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0); }

Tensor eval_smooth_l1(const Tensor& pred, const Tensor& target) {
  if (!pred.same_shape(target)) shape_error(Primitive::kSmoothL1, pred, target);
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += huber(pred[i] - target[i]);
  return Tensor::scalar(s);
}

// logits in, stable -log softmax(logits)[target]; matrix form averages rows
Tensor eval_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
  const std::size_t rows = logits.rows(), cols = logits.cols();
  if ((logits.rank() != 1 && logits.rank() != 2) || targets.size() != rows) {
    throw std::invalid_argument(
        std::string("primitive cross-entropy-with-index: logits ") + logits.shape_str() +
        " with " + std::to_string(targets.size()) + " target indices");
  }
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= cols) {
      throw std::invalid_argument("primitive cross-entropy-with-index: target index " +
                                  std::to_string(targets[r]) + " out of range " +
                                  std::to_string(cols));
    }
    const double* x = logits.data() + r * cols;
    double mx = x[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
    total += std::log(z) - (x[targets[r]] - mx);
  }
  return Tensor::scalar(total / static_cast<double>(rows));
}

}  // namespace

const char* primitive_name(Primitive op) {
  switch (op) {
    case Primitive::kMatMul: return "matmul";
    case Primitive::kAdd: return "add";
    case Primitive::kElemMul: return "elementwise-mul";
    case Primitive::kScalarScale: return "scalar-scale";
    case Primitive::kRelu: return "relu";
    case Primitive::kTanh: return "tanh";
    case Primitive::kSigmoid: return "sigmoid";
    case Primitive::kSoftmaxLastAxis: return "softmax-over-last-axis";
    case Primitive::kConcatLastAxis: return "concat-last-axis";
    case Primitive::kMeanAxis: return "mean-over-axis";
    case Primitive::kSmoothL1: return "smooth-l1";
    case Primitive::kCrossEntropyIndex: return "cross-entropy-with-index";
  }
  return "?";
}

namespace {

Tensor eval_primitive_refs(Primitive op, const std::vector<const Tensor*>& in, const OpAttrs& attrs) {
  check_finite(op, in);
  switch (op) {
    case Primitive::kMatMul:
      check_arity(op, in, 2);
      return eval_matmul(*in[0], *in[1], attrs.transpose_b);
    case Primitive::kAdd:
      check_arity(op, in, 2);
      return eval_add(*in[0], *in[1]);
    case Primitive::kElemMul:
      check_arity(op, in, 2);
      return eval_mul(*in[0], *in[1]);
    case Primitive::kScalarScale: {
      check_arity(op, in, 1);
      Tensor out = *in[0];
      for (std::size_t i = 0; i < out.size(); ++i) out[i] *= attrs.scalar;
      return out;
    }
    case Primitive::kRelu: {
      check_arity(op, in, 1);
      Tensor out = *in[0];
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], 0.0);
      return out;
    }
    case Primitive::kTanh: {
      check_arity(op, in, 1);
      Tensor out = *in[0];
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
      return out;
    }
    case Primitive::kSigmoid: {
      check_arity(op, in, 1);
      Tensor out = *in[0];
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
      return out;
    }
    case Primitive::kSoftmaxLastAxis:
      check_arity(op, in, 1);
      return eval_softmax(*in[0]);
    case Primitive::kConcatLastAxis:
      check_arity(op, in, 2);
      return eval_concat(*in[0], *in[1]);
    case Primitive::kMeanAxis:
      check_arity(op, in, 1);
      return eval_mean_axis(*in[0], attrs.axis);
    case Primitive::kSmoothL1:
      check_arity(op, in, 2);
      return eval_smooth_l1(*in[0], *in[1]);
    case Primitive::kCrossEntropyIndex:
      check_arity(op, in, 1);
      return eval_cross_entropy(*in[0], attrs.indices);
  }
  throw std::invalid_argument("unknown primitive");
}

}  // namespace

Tensor eval_primitive(Primitive op, std::span<const Tensor> inputs, const OpAttrs& attrs) {
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(inputs.size());
  for (const Tensor& t : inputs) ptrs.push_back(&t);
  return eval_primitive_refs(op, ptrs, attrs);
}

ValueId Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

ValueId Tape::constant(Tensor value) {
  return push(Node{Op::kLeaf, Primitive::kAdd, {}, {}, std::move(value), false});
}

ValueId Tape::parameter(Tensor value) {
  ValueId id = push(Node{Op::kParam, Primitive::kAdd, {}, {}, std::move(value), true});
  params_.push_back(id);
  return id;
}

const Tensor& Tape::value(ValueId id) const { return nodes_.at(id).value; }

ValueId Tape::apply(Primitive op, std::vector<ValueId> inputs, OpAttrs attrs) {
  std::vector<const Tensor*> vals;
  vals.reserve(inputs.size());
  bool needs = false;
  for (ValueId id : inputs) {
    vals.push_back(&nodes_.at(id).value);
    needs = needs || nodes_[id].needs_grad;
  }
  Tensor out = eval_primitive_refs(op, vals, attrs);
  ValueId id = push(Node{Op::kPrimitive, op, std::move(attrs), std::move(inputs), std::move(out), needs});
  ops_.push_back(id);
  return id;
}

ValueId Tape::reshape(ValueId a, std::vector<std::size_t> shape) {
  Tensor out = nodes_.at(a).value.reshaped(shape);
  OpAttrs attrs;
  attrs.shape = std::move(shape);
  return push(Node{Op::kReshape, Primitive::kAdd, std::move(attrs), {a}, std::move(out),
                   nodes_[a].needs_grad});
}

ValueId Tape::repeat_rows(ValueId a, std::size_t k) {
  const Tensor& in = nodes_.at(a).value;
  if (in.rank() > 2 || k == 0) throw std::invalid_argument("repeat_rows: bad arguments");
  const std::size_t m = in.rows(), n = in.cols();
  Tensor out({m * k, n});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < k; ++j)
      std::copy(in.data() + r * n, in.data() + (r + 1) * n, out.data() + (r * k + j) * n);
  OpAttrs attrs;
  attrs.repeat = k;
  return push(Node{Op::kRepeatRows, Primitive::kAdd, std::move(attrs), {a}, std::move(out),
                   nodes_[a].needs_grad});
}

ValueId Tape::gather_rows(ValueId a, std::vector<std::size_t> rows) {
  const Tensor& in = nodes_.at(a).value;
  if (in.rank() != 2) throw std::invalid_argument("gather_rows: rank-2 input required");
  const std::size_t n = in.cols();
  Tensor out({rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= in.rows()) throw std::invalid_argument("gather_rows: row index out of range");
    std::copy(in.data() + rows[i] * n, in.data() + (rows[i] + 1) * n, out.data() + i * n);
  }
  OpAttrs attrs;
  attrs.indices = std::move(rows);
  return push(Node{Op::kGatherRows, Primitive::kAdd, std::move(attrs), {a}, std::move(out),
                   nodes_[a].needs_grad});
}

ValueId Tape::sum_all(ValueId a) {
  const Tensor& in = nodes_.at(a).value;
  double s = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) s += in[i];
  return push(Node{Op::kSumAll, Primitive::kAdd, {}, {a}, Tensor::scalar(s), nodes_[a].needs_grad});
}

ValueId Tape::matmul(ValueId a, ValueId b, bool transpose_b) {
  OpAttrs attrs;
  attrs.transpose_b = transpose_b;
  return apply(Primitive::kMatMul, {a, b}, std::move(attrs));
}
ValueId Tape::add(ValueId a, ValueId b) { return apply(Primitive::kAdd, {a, b}); }
ValueId Tape::mul(ValueId a, ValueId b) { return apply(Primitive::kElemMul, {a, b}); }
ValueId Tape::scale(ValueId a, double s) {
  OpAttrs attrs;
  attrs.scalar = s;
  return apply(Primitive::kScalarScale, {a}, std::move(attrs));
}
ValueId Tape::relu(ValueId a) { return apply(Primitive::kRelu, {a}); }
ValueId Tape::tanh(ValueId a) { return apply(Primitive::kTanh, {a}); }
ValueId Tape::sigmoid(ValueId a) { return apply(Primitive::kSigmoid, {a}); }
ValueId Tape::softmax_last(ValueId a) { return apply(Primitive::kSoftmaxLastAxis, {a}); }
ValueId Tape::concat_last(ValueId a, ValueId b) { return apply(Primitive::kConcatLastAxis, {a, b}); }
ValueId Tape::mean_axis(ValueId a, int axis) {
  OpAttrs attrs;
  attrs.axis = axis;
  return apply(Primitive::kMeanAxis, {a}, std::move(attrs));
}
ValueId Tape::smooth_l1(ValueId pred, ValueId target) {
  return apply(Primitive::kSmoothL1, {pred, target});
}
ValueId Tape::cross_entropy_index(ValueId logits, std::vector<std::size_t> targets) {
  OpAttrs attrs;
  attrs.indices = std::move(targets);
  return apply(Primitive::kCrossEntropyIndex, {logits}, std::move(attrs));
}

const Tensor& GradientMap::at(ValueId id) const {
  auto it = grads_.find(id);
  if (it == grads_.end()) throw std::out_of_range("gradient map: no entry for value id");
  return it->second;
}

namespace {

void accumulate(std::vector<Tensor>& grads, ValueId id, const Tensor& shape_like, const Tensor& g) {
  if (grads[id].empty()) grads[id] = Tensor(shape_like.shape());
  Tensor& dst = grads[id];
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

}  // namespace

void Tape::dispatch_backward(const Node& node, const Tensor& g, std::vector<Tensor>& grads) const {
  auto in_val = [&](std::size_t i) -> const Tensor& { return nodes_[node.inputs[i]].value; };
  auto acc = [&](std::size_t i, const Tensor& grad) {
    ValueId id = node.inputs[i];
    if (nodes_[id].needs_grad) accumulate(grads, id, nodes_[id].value, grad);
  };

  switch (node.op) {
    case Op::kLeaf:
    case Op::kParam:
      return;
    case Op::kReshape: {
      acc(0, g.reshaped(in_val(0).shape()));
      return;
    }
    case Op::kRepeatRows: {
      const Tensor& in = in_val(0);
      const std::size_t m = in.rows(), n = in.cols(), k = node.attrs.repeat;
      Tensor gi(in.shape());
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t c = 0; c < n; ++c) gi[r * n + c] += g[(r * k + j) * n + c];
      acc(0, gi);
      return;
    }
    case Op::kGatherRows: {
      const Tensor& in = in_val(0);
      const std::size_t n = in.cols();
      Tensor gi(in.shape());
      for (std::size_t i = 0; i < node.attrs.indices.size(); ++i) {
        const std::size_t r = node.attrs.indices[i];
        for (std::size_t c = 0; c < n; ++c) gi[r * n + c] += g[i * n + c];
      }
      acc(0, gi);
      return;
    }
    case Op::kSumAll: {
      acc(0, Tensor::full(in_val(0).shape(), g[0]));
      return;
    }
    case Op::kPrimitive:
      break;
  }

  switch (node.prim) {
    case Primitive::kMatMul: {
      const Tensor& a = in_val(0);
      const Tensor& b = in_val(1);
      const bool tb = node.attrs.transpose_b;
      Tensor ga(a.shape()), gb(b.shape());
      MapCM gm(g.data(), static_cast<Eigen::Index>(a.rank() == 1 ? 1 : g.rows()),
               static_cast<Eigen::Index>(a.rank() == 1 ? g.size() : g.cols()));
      MapCM am(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
      MapCM bm(b.data(), static_cast<Eigen::Index>(b.rows()), static_cast<Eigen::Index>(b.cols()));
      MapM gam(ga.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
      MapM gbm(gb.data(), static_cast<Eigen::Index>(b.rows()), static_cast<Eigen::Index>(b.cols()));
      if (!tb) {
        gam.noalias() = gm * bm.transpose();
        gbm.noalias() = am.transpose() * gm;
      } else {
        gam.noalias() = gm * bm;
        gbm.noalias() = gm.transpose() * am;
      }
      acc(0, ga);
      acc(1, gb);
      return;
    }
    case Primitive::kAdd: {
      const Tensor& a = in_val(0);
      const Tensor& b = in_val(1);
      acc(0, g);
      if (a.same_shape(b)) {
        acc(1, g);
      } else {  // row broadcast: column sums
        Tensor gb({b.size()});
        const std::size_t n = a.cols();
        for (std::size_t r = 0; r < a.rows(); ++r)
          for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
        acc(1, gb);
      }
      return;
    }
    case Primitive::kElemMul: {
      const Tensor& a = in_val(0);
      const Tensor& b = in_val(1);
      if (a.same_shape(b)) {
        Tensor ga(a.shape()), gb(b.shape());
        for (std::size_t i = 0; i < a.size(); ++i) {
          ga[i] = g[i] * b[i];
          gb[i] = g[i] * a[i];
        }
        acc(0, ga);
        acc(1, gb);
      } else {  // b row-broadcast over a
        const std::size_t n = a.cols();
        Tensor ga(a.shape()), gb({b.size()});
        for (std::size_t r = 0; r < a.rows(); ++r) {
          for (std::size_t c = 0; c < n; ++c) {
            ga[r * n + c] = g[r * n + c] * b[c];
            gb[c] += g[r * n + c] * a(r, c);
          }
        }
        acc(0, ga);
        acc(1, gb);
      }
      return;
    }
    case Primitive::kScalarScale: {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= node.attrs.scalar;
      acc(0, ga);
      return;
    }
    case Primitive::kRelu: {
      const Tensor& a = in_val(0);
      Tensor ga(a.shape());
      for (std::size_t i = 0; i < a.size(); ++i) ga[i] = a[i] > 0.0 ? g[i] : 0.0;
      acc(0, ga);
      return;
    }
    case Primitive::kTanh: {
      const Tensor& y = node.value;
      Tensor ga(y.shape());
      for (std::size_t i = 0; i < y.size(); ++i) ga[i] = g[i] * (1.0 - y[i] * y[i]);
      acc(0, ga);
      return;
    }
    case Primitive::kSigmoid: {
      const Tensor& y = node.value;
      Tensor ga(y.shape());
      for (std::size_t i = 0; i < y.size(); ++i) ga[i] = g[i] * y[i] * (1.0 - y[i]);
      acc(0, ga);
      return;
    }
    case Primitive::kSoftmaxLastAxis: {
      const Tensor& y = node.value;
      const std::size_t rows = y.rows(), cols = y.cols();
      Tensor ga(y.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c)
          ga[r * cols + c] = y[r * cols + c] * (g[r * cols + c] - dot);
      }
      acc(0, ga);
      return;
    }
    case Primitive::kConcatLastAxis: {
      const Tensor& a = in_val(0);
      const Tensor& b = in_val(1);
      const std::size_t m = a.rows(), ca = a.cols(), cb = b.cols();
      Tensor ga(a.shape()), gb(b.shape());
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < ca; ++c) ga[r * ca + c] = g[r * (ca + cb) + c];
        for (std::size_t c = 0; c < cb; ++c) gb[r * cb + c] = g[r * (ca + cb) + ca + c];
      }
      acc(0, ga);
      acc(1, gb);
      return;
    }
    case Primitive::kMeanAxis: {
      const Tensor& a = in_val(0);
      Tensor ga(a.shape());
      if (a.rank() == 1) {
        const double w = g[0] / static_cast<double>(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) ga[i] = w;
      } else if (node.attrs.axis == 0) {
        const std::size_t m = a.rows(), n = a.cols();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) ga[r * n + c] = g[c] / static_cast<double>(m);
      } else {
        const std::size_t m = a.rows(), n = a.cols();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) ga[r * n + c] = g[r] / static_cast<double>(n);
      }
      acc(0, ga);
      return;
    }
    case Primitive::kSmoothL1: {
      const Tensor& p = in_val(0);
      const Tensor& t = in_val(1);
      Tensor gp(p.shape()), gt(t.shape());
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = huber_grad(p[i] - t[i]) * g[0];
        gp[i] = d;
        gt[i] = -d;
      }
      acc(0, gp);
      acc(1, gt);
      return;
    }
    case Primitive::kCrossEntropyIndex: {
      const Tensor& logits = in_val(0);
      const std::size_t rows = logits.rows(), cols = logits.cols();
      Tensor ga(logits.shape());
      softmax_rows(logits.data(), ga.data(), rows, cols);
      const double w = g[0] / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] *= w;
        ga[r * cols + node.attrs.indices[r]] -= w;
      }
      acc(0, ga);
      return;
    }
  }
}

GradientMap Tape::backward(ValueId loss) const {
  const Tensor& loss_val = nodes_.at(loss).value;
  if (loss_val.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + loss_val.shape_str());
  }
  std::vector<Tensor> grads(nodes_.size());
  grads[loss] = Tensor::scalar(1.0);
  for (std::size_t i = loss + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (grads[i].empty() || !node.needs_grad) continue;
    dispatch_backward(node, grads[i], grads);
  }
  GradientMap out;
  for (ValueId p : params_) {
    if (grads[p].empty()) {
      out.put(p, Tensor(nodes_[p].value.shape()));
    } else {
      out.put(p, std::move(grads[p]));
    }
  }
  return out;
}

}  // namespace red
