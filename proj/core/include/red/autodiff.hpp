#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "red/tensor.hpp"

namespace red {

/// The primitive set every model in this project is composed from.
enum class Primitive {
  kMatMul,
  kAdd,
  kElemMul,
  kScalarScale,
  kRelu,
  kTanh,
  kSigmoid,
  kSoftmaxLastAxis,
  kConcatLastAxis,
  kMeanAxis,
  kSmoothL1,
  kCrossEntropyIndex,
};

const char* primitive_name(Primitive op);

struct OpAttrs {
  int axis = -1;                      // kMeanAxis: 0 = over rows, 1 = over cols
  double scalar = 1.0;                // kScalarScale
  bool transpose_b = false;           // kMatMul: use b as b^T
  std::vector<std::size_t> indices;   // kCrossEntropyIndex targets; gather rows
  std::vector<std::size_t> shape;     // reshape target
  std::size_t repeat = 1;             // repeat_rows group size
};

/// Forward-only evaluation of a primitive (no tape involved).
Tensor eval_primitive(Primitive op, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

using ValueId = std::size_t;

class GradientMap {
 public:
  const Tensor& at(ValueId id) const;
  bool contains(ValueId id) const { return grads_.count(id) != 0; }
  void put(ValueId id, Tensor g) { grads_[id] = std::move(g); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<ValueId, Tensor> grads_;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order by construction; backward visits each node once.
class Tape {
 public:
  ValueId constant(Tensor value);
  ValueId parameter(Tensor value);

  ValueId apply(Primitive op, std::vector<ValueId> inputs, OpAttrs attrs = {});

  // structural plumbing beyond the primitive set
  ValueId reshape(ValueId a, std::vector<std::size_t> shape);
  ValueId repeat_rows(ValueId a, std::size_t k);
  ValueId gather_rows(ValueId a, std::vector<std::size_t> rows);
  ValueId sum_all(ValueId a);

  // convenience wrappers
  ValueId matmul(ValueId a, ValueId b, bool transpose_b = false);
  ValueId add(ValueId a, ValueId b);
  ValueId mul(ValueId a, ValueId b);
  ValueId scale(ValueId a, double s);
  ValueId relu(ValueId a);
  ValueId tanh(ValueId a);
  ValueId sigmoid(ValueId a);
  ValueId softmax_last(ValueId a);
  ValueId concat_last(ValueId a, ValueId b);
  ValueId mean_axis(ValueId a, int axis);
  ValueId smooth_l1(ValueId pred, ValueId target);
  ValueId cross_entropy_index(ValueId logits, std::vector<std::size_t> targets);

  const Tensor& value(ValueId id) const;
  std::size_t node_count() const { return ops_.size(); }
  const std::vector<ValueId>& parameters() const { return params_; }

  /// Gradients of a scalar loss for every parameter leaf. Parameters with no
  /// path to the loss get zero gradients of their own shape.
  GradientMap backward(ValueId loss) const;

 private:
  enum class Op {
    kLeaf,
    kParam,
    kPrimitive,
    kReshape,
    kRepeatRows,
    kGatherRows,
    kSumAll,
  };
  struct Node {
    Op op;
    Primitive prim;  // valid when op == kPrimitive
    OpAttrs attrs;
    std::vector<ValueId> inputs;
    Tensor value;
    bool needs_grad = false;
  };

  ValueId push(Node node);
  void dispatch_backward(const Node& node, const Tensor& g, std::vector<Tensor>& grads) const;

  std::vector<Node> nodes_;
  std::vector<ValueId> params_;
  std::vector<ValueId> ops_;
};

}  // namespace red
