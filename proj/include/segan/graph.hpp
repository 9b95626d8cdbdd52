#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "segan/tensor.hpp"

namespace segan {

using NodeId = std::size_t;

enum class OpKind {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScale,      // a * attr.scalar
  kAddScalar,  // a + attr.scalar
  kMatMul,
  kConv2d,     // inputs: x, weight, bias
  kUpsample,   // nearest neighbour, attr.factor
  kLeakyRelu,  // attr.scalar = negative slope
  kRelu,
  kTanh,
  kSigmoid,
  kSoftmax,    // over axis 1
  kLog,
  kSquare,
  kAbs,
  kClamp,      // [attr.lo, attr.hi], zero gradient outside
  kReduceMean,
  kReduceSum,
  kConcat,     // attr.axis
  kSlice,      // axis 0, [attr.begin, attr.end)
  kGather,     // inputs: x[N,C,...], index[N,...]; picks x[n, index, ...]
};

const char* op_name(OpKind op);

struct OpAttrs {
  double scalar = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t factor = 1;
  std::size_t axis = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
};

struct Node {
  OpKind op = OpKind::kLeaf;
  std::vector<NodeId> inputs;
  OpAttrs attrs;
  Shape shape;
  std::string name;
  bool requires_grad = false;
};

/// Static computation graph. Nodes are appended in topological order and shapes
/// are inferred eagerly, so a malformed graph fails at construction time with
/// the offending node named in the error.
class Graph {
 public:
  NodeId leaf(std::string name, Shape shape, bool requires_grad = false);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double s);
  NodeId add_scalar(NodeId a, double s);
  NodeId matmul(NodeId a, NodeId b);
  NodeId conv2d(NodeId x, NodeId weight, NodeId bias, std::size_t stride, std::size_t pad);
  NodeId upsample(NodeId x, std::size_t factor);
  NodeId leaky_relu(NodeId x, double slope);
  NodeId relu(NodeId x);
  NodeId tanh(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId softmax(NodeId x);
  NodeId log(NodeId x);
  NodeId square(NodeId x);
  NodeId abs(NodeId x);
  NodeId clamp(NodeId x, double lo, double hi);
  NodeId reduce_mean(NodeId x);
  NodeId reduce_sum(NodeId x);
  NodeId concat(const std::vector<NodeId>& xs, std::size_t axis);
  NodeId slice(NodeId x, std::size_t begin, std::size_t end);
  NodeId gather(NodeId x, NodeId index);

  // Gives a node a readable name for diagnostics.
  NodeId named(NodeId id, std::string name);

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  std::vector<NodeId> leaves() const;
  std::string describe(NodeId id) const;

 private:
  NodeId push(Node n);
  const Node& checked(NodeId id) const;
  [[noreturn]] void fail(OpKind op, const std::string& what) const;

  std::vector<Node> nodes_;
};

/// Evaluates a graph in a fixed numeric precision. Buffers are allocated once
/// and reused across forward/backward passes, which is what the training loops
/// rely on for speed.
template <typename T>
class Executor {
 public:
  explicit Executor(const Graph& graph);

  void feed(NodeId leaf, const Tensor<T>& value);
  void feed(NodeId leaf, std::span<const T> values);
  void forward();
  void backward(NodeId loss);

  const Tensor<T>& value(NodeId id) const { return values_.at(id); }
  const Tensor<T>& grad(NodeId id) const;
  const Graph& graph() const { return *graph_; }

 private:
  void forward_node(NodeId id);
  void backward_node(NodeId id);

  const Graph* graph_;
  std::vector<Tensor<T>> values_;
  std::vector<Tensor<T>> grads_;
  std::vector<bool> fed_;
  std::vector<std::vector<T>> scratch_;  // im2col buffers per conv node
  bool forward_done_ = false;
};

extern template class Executor<float>;
extern template class Executor<double>;

template <typename T>
using Feeds = std::map<NodeId, Tensor<T>>;

// One-shot convenience wrappers around Executor.
template <typename T>
std::map<NodeId, Tensor<T>> forward(const Graph& graph, const Feeds<T>& feeds);

// Gradients of a scalar node with respect to every requires_grad leaf.
template <typename T>
std::map<NodeId, Tensor<T>> backward(const Graph& graph, const Feeds<T>& feeds, NodeId loss);

// Central differences (f(p+h) - f(p-h)) / 2h for every coordinate of `param`,
// evaluated in double precision.
Tensor<double> finite_diff_grad(const Graph& graph, const Feeds<double>& feeds, NodeId loss,
                                NodeId param, double h);

// Raw convolution kernels, shared with the spectral-norm operator code.
// x: [N,Ci,H,W], w: [Co,Ci,k,k] -> [N,Co,Ho,Wo]; no bias.
template <typename T>
Tensor<T> conv2d_apply(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride,
                       std::size_t pad);
// Adjoint of conv2d_apply with respect to x, for an input of spatial size h x w.
template <typename T>
Tensor<T> conv2d_adjoint(const Tensor<T>& dy, const Tensor<T>& w, std::size_t stride,
                         std::size_t pad, std::size_t in_h, std::size_t in_w);

std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                          std::size_t pad);

}  // namespace segan
