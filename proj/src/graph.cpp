#include "segan/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

namespace segan {
namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::size_t inner_size(const Shape& s, std::size_t from) {
  std::size_t n = 1;
  for (std::size_t i = from; i < s.size(); ++i) n *= s[i];
  return n;
}

template <typename T>
void im2col(const T* x, std::size_t ci, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* col) {
  for (std::size_t c = 0; c < ci; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                          static_cast<std::ptrdiff_t>(pad);
          T* out = row + oy * wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(out, out + wo, T{0});
            continue;
          }
          const T* src = x + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                            static_cast<std::ptrdiff_t>(pad);
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                          ? T{0}
                          : src[static_cast<std::size_t>(ix)];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, std::size_t ci, std::size_t h, std::size_t w, std::size_t k,
                std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* x) {
  for (std::size_t c = 0; c < ci; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((c * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                          static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dst = x + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                            static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w))
              dst[static_cast<std::size_t>(ix)] += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kUpsample: return "upsample";
    case OpKind::kLeakyRelu: return "leaky_relu";
    case OpKind::kRelu: return "relu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLog: return "log";
    case OpKind::kSquare: return "square";
    case OpKind::kAbs: return "abs";
    case OpKind::kClamp: return "clamp";
    case OpKind::kReduceMean: return "reduce_mean";
    case OpKind::kReduceSum: return "reduce_sum";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kGather: return "gather";
  }
  return "?";
}

std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                          std::size_t pad) {
  if (in + 2 * pad < kernel || stride == 0) return 0;
  return (in + 2 * pad - kernel) / stride + 1;
}

// ---------------------------------------------------------------------------
// Graph construction

NodeId Graph::push(Node n) {
  for (NodeId in : n.inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

const Node& Graph::checked(NodeId id) const {
  if (id >= nodes_.size()) throw ShapeError("unknown node id " + std::to_string(id));
  return nodes_[id];
}

void Graph::fail(OpKind op, const std::string& what) const {
  throw ShapeError(std::string("node #") + std::to_string(nodes_.size()) + " (" + op_name(op) +
                   "): " + what);
}

std::string Graph::describe(NodeId id) const {
  const Node& n = checked(id);
  std::ostringstream os;
  os << "node #" << id << " (" << op_name(n.op);
  if (!n.name.empty()) os << " '" << n.name << "'";
  os << ", shape " << shape_str(n.shape) << ")";
  return os.str();
}

NodeId Graph::leaf(std::string name, Shape shape, bool requires_grad) {
  if (shape.empty() || shape_numel(shape) == 0)
    fail(OpKind::kLeaf, "leaf '" + name + "' needs a non-empty shape");
  Node n;
  n.shape = std::move(shape);
  n.name = std::move(name);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

NodeId Graph::named(NodeId id, std::string name) {
  checked(id);
  nodes_[id].name = std::move(name);
  return id;
}

std::vector<NodeId> Graph::leaves() const {
  std::vector<NodeId> out;
  for (NodeId i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].op == OpKind::kLeaf) out.push_back(i);
  return out;
}

namespace {
Node make(OpKind op, std::vector<NodeId> inputs, Shape shape, OpAttrs attrs = {}) {
  Node n;
  n.op = op;
  n.inputs = std::move(inputs);
  n.shape = std::move(shape);
  n.attrs = attrs;
  return n;
}
}  // namespace

#define SEGAN_BINARY(fn, kind)                                                       \
  NodeId Graph::fn(NodeId a, NodeId b) {                                             \
    const Shape& sa = checked(a).shape;                                              \
    const Shape& sb = checked(b).shape;                                              \
    if (sa != sb) fail(kind, "operand shapes differ: " + shape_str(sa) + " vs " + shape_str(sb)); \
    return push(make(kind, {a, b}, sa));                                             \
  }
SEGAN_BINARY(add, OpKind::kAdd)
SEGAN_BINARY(sub, OpKind::kSub)
SEGAN_BINARY(mul, OpKind::kMul)
#undef SEGAN_BINARY

#define SEGAN_UNARY(fn, kind) \
  NodeId Graph::fn(NodeId x) { return push(make(kind, {x}, checked(x).shape)); }
SEGAN_UNARY(relu, OpKind::kRelu)
SEGAN_UNARY(tanh, OpKind::kTanh)
SEGAN_UNARY(sigmoid, OpKind::kSigmoid)
SEGAN_UNARY(log, OpKind::kLog)
SEGAN_UNARY(square, OpKind::kSquare)
SEGAN_UNARY(abs, OpKind::kAbs)
#undef SEGAN_UNARY

NodeId Graph::scale(NodeId a, double s) {
  OpAttrs at;
  at.scalar = s;
  return push(make(OpKind::kScale, {a}, checked(a).shape, at));
}

NodeId Graph::add_scalar(NodeId a, double s) {
  OpAttrs at;
  at.scalar = s;
  return push(make(OpKind::kAddScalar, {a}, checked(a).shape, at));
}

NodeId Graph::leaky_relu(NodeId x, double slope) {
  OpAttrs at;
  at.scalar = slope;
  return push(make(OpKind::kLeakyRelu, {x}, checked(x).shape, at));
}

NodeId Graph::clamp(NodeId x, double lo, double hi) {
  if (!(lo <= hi)) fail(OpKind::kClamp, "lo must not exceed hi");
  OpAttrs at;
  at.lo = lo;
  at.hi = hi;
  return push(make(OpKind::kClamp, {x}, checked(x).shape, at));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Shape& sa = checked(a).shape;
  const Shape& sb = checked(b).shape;
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    fail(OpKind::kMatMul, "cannot multiply " + shape_str(sa) + " by " + shape_str(sb));
  return push(make(OpKind::kMatMul, {a, b}, {sa[0], sb[1]}));
}

NodeId Graph::conv2d(NodeId x, NodeId weight, NodeId bias, std::size_t stride,
                     std::size_t pad) {
  const Shape& sx = checked(x).shape;
  const Shape& sw = checked(weight).shape;
  const Shape& sb = checked(bias).shape;
  if (sx.size() != 4) fail(OpKind::kConv2d, "input must be N,C,H,W, got " + shape_str(sx));
  if (sw.size() != 4 || sw[2] != sw[3])
    fail(OpKind::kConv2d, "weight must be Co,Ci,k,k, got " + shape_str(sw));
  if (sw[1] != sx[1])
    fail(OpKind::kConv2d, "weight expects " + std::to_string(sw[1]) + " input channels, input has " +
                              std::to_string(sx[1]));
  if (sb != Shape{sw[0]}) fail(OpKind::kConv2d, "bias must be [" + std::to_string(sw[0]) + "]");
  if (stride == 0) fail(OpKind::kConv2d, "stride must be positive");
  const std::size_t ho = conv_out_size(sx[2], sw[2], stride, pad);
  const std::size_t wo = conv_out_size(sx[3], sw[3], stride, pad);
  if (ho == 0 || wo == 0) fail(OpKind::kConv2d, "input " + shape_str(sx) + " too small for kernel");
  OpAttrs at;
  at.stride = stride;
  at.pad = pad;
  return push(make(OpKind::kConv2d, {x, weight, bias}, {sx[0], sw[0], ho, wo}, at));
}

NodeId Graph::upsample(NodeId x, std::size_t factor) {
  const Shape& s = checked(x).shape;
  if (s.size() != 4 || factor == 0) fail(OpKind::kUpsample, "needs N,C,H,W input and factor >= 1");
  OpAttrs at;
  at.factor = factor;
  return push(make(OpKind::kUpsample, {x}, {s[0], s[1], s[2] * factor, s[3] * factor}, at));
}

NodeId Graph::softmax(NodeId x) {
  const Shape& s = checked(x).shape;
  if (s.size() < 2) fail(OpKind::kSoftmax, "needs a channel axis, got " + shape_str(s));
  return push(make(OpKind::kSoftmax, {x}, s));
}

NodeId Graph::reduce_mean(NodeId x) {
  checked(x);
  return push(make(OpKind::kReduceMean, {x}, {1}));
}

NodeId Graph::reduce_sum(NodeId x) {
  checked(x);
  return push(make(OpKind::kReduceSum, {x}, {1}));
}

NodeId Graph::concat(const std::vector<NodeId>& xs, std::size_t axis) {
  if (xs.empty()) fail(OpKind::kConcat, "no inputs");
  Shape out = checked(xs[0]).shape;
  if (axis >= out.size()) fail(OpKind::kConcat, "axis out of range");
  for (std::size_t i = 1; i < xs.size(); ++i) {
    const Shape& s = checked(xs[i]).shape;
    if (s.size() != out.size()) fail(OpKind::kConcat, "rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != out[d])
        fail(OpKind::kConcat, "shape " + shape_str(s) + " incompatible with " + shape_str(out));
    out[axis] += s[axis];
  }
  OpAttrs at;
  at.axis = axis;
  return push(make(OpKind::kConcat, xs, out, at));
}

NodeId Graph::slice(NodeId x, std::size_t begin, std::size_t end) {
  Shape s = checked(x).shape;
  if (!(begin < end && end <= s[0]))
    fail(OpKind::kSlice, "range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") outside leading dimension " + std::to_string(s[0]));
  s[0] = end - begin;
  OpAttrs at;
  at.begin = begin;
  at.end = end;
  return push(make(OpKind::kSlice, {x}, s, at));
}

NodeId Graph::gather(NodeId x, NodeId index) {
  const Shape& sx = checked(x).shape;
  const Shape& si = checked(index).shape;
  if (sx.size() < 2 || si.size() != sx.size() - 1 || si[0] != sx[0] ||
      !std::equal(si.begin() + 1, si.end(), sx.begin() + 2))
    fail(OpKind::kGather, "index shape " + shape_str(si) + " does not match " + shape_str(sx));
  Shape out = sx;
  out[1] = 1;
  return push(make(OpKind::kGather, {x, index}, out));
}

// ---------------------------------------------------------------------------
// Execution

template <typename T>
Executor<T>::Executor(const Graph& graph)
    : graph_(&graph),
      values_(graph.size()),
      grads_(graph.size()),
      fed_(graph.size(), false),
      scratch_(graph.size()) {
  for (NodeId i = 0; i < graph.size(); ++i) values_[i] = Tensor<T>(graph.node(i).shape);
}

template <typename T>
void Executor<T>::feed(NodeId leaf, const Tensor<T>& value) {
  const Node& n = graph_->node(leaf);
  if (n.op != OpKind::kLeaf) throw ShapeError(graph_->describe(leaf) + " is not a leaf");
  if (value.shape() != n.shape)
    throw ShapeError(graph_->describe(leaf) + " fed shape " + shape_str(value.shape()));
  feed(leaf, value.data());
}

template <typename T>
void Executor<T>::feed(NodeId leaf, std::span<const T> values) {
  const Node& n = graph_->node(leaf);
  if (n.op != OpKind::kLeaf) throw ShapeError(graph_->describe(leaf) + " is not a leaf");
  if (values.size() != values_[leaf].numel())
    throw ShapeError(graph_->describe(leaf) + " fed " + std::to_string(values.size()) + " values");
  for (const T& v : values)
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(graph_->describe(leaf) + " fed a non-finite value");
  std::copy(values.begin(), values.end(), values_[leaf].data().begin());
  fed_[leaf] = true;
  forward_done_ = false;
}

template <typename T>
const Tensor<T>& Executor<T>::grad(NodeId id) const {
  if (grads_.at(id).empty())
    throw ShapeError(graph_->describe(id) + " has no gradient (not on a requires_grad path)");
  return grads_[id];
}

template <typename T>
void Executor<T>::forward() {
  for (NodeId i = 0; i < graph_->size(); ++i) {
    if (graph_->node(i).op == OpKind::kLeaf) {
      if (!fed_[i]) throw ShapeError(graph_->describe(i) + " was not fed");
      continue;
    }
    forward_node(i);
  }
  forward_done_ = true;
}

template <typename T>
void Executor<T>::forward_node(NodeId id) {
  const Node& n = graph_->node(id);
  Tensor<T>& out = values_[id];
  auto in = [&](std::size_t k) -> const Tensor<T>& { return values_[n.inputs[k]]; };
  T* y = out.data().data();
  const std::size_t len = out.numel();

  switch (n.op) {
    case OpKind::kLeaf: break;
    case OpKind::kAdd:
      for (std::size_t i = 0; i < len; ++i) y[i] = in(0)[i] + in(1)[i];
      break;
    case OpKind::kSub:
      for (std::size_t i = 0; i < len; ++i) y[i] = in(0)[i] - in(1)[i];
      break;
    case OpKind::kMul:
      for (std::size_t i = 0; i < len; ++i) y[i] = in(0)[i] * in(1)[i];
      break;
    case OpKind::kScale: {
      const T s = static_cast<T>(n.attrs.scalar);
      for (std::size_t i = 0; i < len; ++i) y[i] = in(0)[i] * s;
      break;
    }
    case OpKind::kAddScalar: {
      const T s = static_cast<T>(n.attrs.scalar);
      for (std::size_t i = 0; i < len; ++i) y[i] = in(0)[i] + s;
      break;
    }
    case OpKind::kMatMul: {
      const Shape& sa = in(0).shape();
      const Shape& sb = in(1).shape();
      Eigen::Map<const MatR<T>> a(in(0).data().data(), sa[0], sa[1]);
      Eigen::Map<const MatR<T>> b(in(1).data().data(), sb[0], sb[1]);
      Eigen::Map<MatR<T>> c(y, sa[0], sb[1]);
      c.noalias() = a * b;
      break;
    }
    case OpKind::kConv2d: {
      const Tensor<T>& x = in(0);
      const Tensor<T>& w = in(1);
      const Tensor<T>& b = in(2);
      const std::size_t batch = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
      const std::size_t co = w.dim(0), k = w.dim(2);
      const std::size_t ho = out.dim(2), wo = out.dim(3);
      const std::size_t ck = ci * k * k, hw = ho * wo;
      auto& col = scratch_[id];
      col.resize(batch * ck * hw);
      Eigen::Map<const MatR<T>> wm(w.data().data(), co, ck);
      for (std::size_t s = 0; s < batch; ++s) {
        T* c = col.data() + s * ck * hw;
        im2col(x.data().data() + s * ci * h * wd, ci, h, wd, k, n.attrs.stride, n.attrs.pad, ho,
               wo, c);
        Eigen::Map<const MatR<T>> cm(c, ck, hw);
        Eigen::Map<MatR<T>> ym(y + s * co * hw, co, hw);
        ym.noalias() = wm * cm;
        for (std::size_t o = 0; o < co; ++o) ym.row(o).array() += b[o];
      }
      break;
    }
    case OpKind::kUpsample: {
      const Tensor<T>& x = in(0);
      const std::size_t f = n.attrs.factor;
      const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t oy = 0; oy < h * f; ++oy)
          for (std::size_t ox = 0; ox < w * f; ++ox)
            y[(p * h * f + oy) * w * f + ox] = x[(p * h + oy / f) * w + ox / f];
      break;
    }
    case OpKind::kLeakyRelu: {
      const T slope = static_cast<T>(n.attrs.scalar);
      for (std::size_t i = 0; i < len; ++i) {
        const T v = in(0)[i];
        y[i] = v >= T{0} ? v : v * slope;
      }
      break;
    }
    case OpKind::kRelu:
      for (std::size_t i = 0; i < len; ++i) y[i] = std::max(in(0)[i], T{0});
      break;
    case OpKind::kTanh:
      for (std::size_t i = 0; i < len; ++i) y[i] = std::tanh(in(0)[i]);
      break;
    case OpKind::kSigmoid:
      for (std::size_t i = 0; i < len; ++i) {
        const T v = in(0)[i];
        if (v >= T{0}) {
          y[i] = T{1} / (T{1} + std::exp(-v));
        } else {
          const T e = std::exp(v);
          y[i] = e / (T{1} + e);
        }
      }
      break;
    case OpKind::kSoftmax: {
      const Shape& s = in(0).shape();
      const std::size_t outer = s[0], ch = s[1], inner = inner_size(s, 2);
      const T* x = in(0).data().data();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t p = 0; p < inner; ++p) {
          const std::size_t base = o * ch * inner + p;
          T mx = x[base];
          for (std::size_t c = 1; c < ch; ++c) mx = std::max(mx, x[base + c * inner]);
          T sum{0};
          for (std::size_t c = 0; c < ch; ++c) {
            const T e = std::exp(x[base + c * inner] - mx);
            y[base + c * inner] = e;
            sum += e;
          }
          for (std::size_t c = 0; c < ch; ++c) y[base + c * inner] /= sum;
        }
      break;
    }
    case OpKind::kLog:
      for (std::size_t i = 0; i < len; ++i) {
        const T v = in(0)[i];
        if (!(v > T{0}))
          throw NumericError(graph_->describe(id) + ": log of non-positive value");
        y[i] = std::log(v);
      }
      break;
    case OpKind::kSquare:
      for (std::size_t i = 0; i < len; ++i) y[i] = in(0)[i] * in(0)[i];
      break;
    case OpKind::kAbs:
      for (std::size_t i = 0; i < len; ++i) y[i] = std::abs(in(0)[i]);
      break;
    case OpKind::kClamp: {
      const T lo = static_cast<T>(n.attrs.lo), hi = static_cast<T>(n.attrs.hi);
      for (std::size_t i = 0; i < len; ++i) y[i] = std::clamp(in(0)[i], lo, hi);
      break;
    }
    case OpKind::kReduceMean:
    case OpKind::kReduceSum: {
      // Accumulate in double so float runs do not drift with batch size.
      double acc = 0.0;
      for (const T& v : in(0).data()) acc += static_cast<double>(v);
      if (n.op == OpKind::kReduceMean) acc /= static_cast<double>(in(0).numel());
      y[0] = static_cast<T>(acc);
      break;
    }
    case OpKind::kConcat: {
      const std::size_t axis = n.attrs.axis;
      const std::size_t outer = shape_numel(Shape(n.shape.begin(), n.shape.begin() + axis));
      std::size_t offset = 0;
      const std::size_t out_chunk = inner_size(n.shape, axis);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t chunk = inner_size(in(k).shape(), axis);
        for (std::size_t o = 0; o < outer; ++o)
          std::copy_n(in(k).data().data() + o * chunk, chunk, y + o * out_chunk + offset);
        offset += chunk;
      }
      break;
    }
    case OpKind::kSlice: {
      const std::size_t row = inner_size(n.shape, 1);
      std::copy_n(in(0).data().data() + n.attrs.begin * row, len, y);
      break;
    }
    case OpKind::kGather: {
      const Shape& s = in(0).shape();
      const std::size_t batch = s[0], ch = s[1], inner = inner_size(s, 2);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < inner; ++p) {
          const T raw = in(1)[b * inner + p];
          const auto c = static_cast<std::size_t>(raw);
          if (raw < T{0} || c >= ch || static_cast<T>(c) != raw)
            throw ShapeError(graph_->describe(id) + ": index out of range");
          y[b * inner + p] = in(0)[(b * ch + c) * inner + p];
        }
      break;
    }
  }
}

template <typename T>
void Executor<T>::backward(NodeId loss) {
  if (!forward_done_) throw ShapeError("backward called before forward");
  const Node& ln = graph_->node(loss);
  if (shape_numel(ln.shape) != 1)
    throw ShapeError(graph_->describe(loss) + " is not a scalar loss");
  for (NodeId i = 0; i < graph_->size(); ++i) {
    if (graph_->node(i).requires_grad) {
      if (grads_[i].shape() != graph_->node(i).shape) grads_[i] = Tensor<T>(graph_->node(i).shape);
      else grads_[i].fill(T{0});
    }
  }
  if (!ln.requires_grad) return;
  grads_[loss][0] = T{1};
  for (NodeId i = loss + 1; i-- > 0;) {
    const Node& n = graph_->node(i);
    if (n.op == OpKind::kLeaf || !n.requires_grad) continue;
    backward_node(i);
  }
}

template <typename T>
void Executor<T>::backward_node(NodeId id) {
  const Node& n = graph_->node(id);
  const Tensor<T>& gy = grads_[id];
  const Tensor<T>& yv = values_[id];
  auto wants = [&](std::size_t k) { return graph_->node(n.inputs[k]).requires_grad; };
  auto gin = [&](std::size_t k) -> T* { return grads_[n.inputs[k]].data().data(); };
  auto in = [&](std::size_t k) -> const Tensor<T>& { return values_[n.inputs[k]]; };
  const std::size_t len = gy.numel();

  switch (n.op) {
    case OpKind::kLeaf: break;
    case OpKind::kAdd:
    case OpKind::kSub: {
      const T sign = n.op == OpKind::kSub ? T{-1} : T{1};
      if (wants(0)) for (std::size_t i = 0; i < len; ++i) gin(0)[i] += gy[i];
      if (wants(1)) for (std::size_t i = 0; i < len; ++i) gin(1)[i] += sign * gy[i];
      break;
    }
    case OpKind::kMul:
      if (wants(0)) for (std::size_t i = 0; i < len; ++i) gin(0)[i] += gy[i] * in(1)[i];
      if (wants(1)) for (std::size_t i = 0; i < len; ++i) gin(1)[i] += gy[i] * in(0)[i];
      break;
    case OpKind::kScale: {
      const T s = static_cast<T>(n.attrs.scalar);
      for (std::size_t i = 0; i < len; ++i) gin(0)[i] += gy[i] * s;
      break;
    }
    case OpKind::kAddScalar:
      for (std::size_t i = 0; i < len; ++i) gin(0)[i] += gy[i];
      break;
    case OpKind::kMatMul: {
      const Shape& sa = in(0).shape();
      const Shape& sb = in(1).shape();
      Eigen::Map<const MatR<T>> a(in(0).data().data(), sa[0], sa[1]);
      Eigen::Map<const MatR<T>> b(in(1).data().data(), sb[0], sb[1]);
      Eigen::Map<const MatR<T>> g(gy.data().data(), sa[0], sb[1]);
      if (wants(0)) Eigen::Map<MatR<T>>(gin(0), sa[0], sa[1]).noalias() += g * b.transpose();
      if (wants(1)) Eigen::Map<MatR<T>>(gin(1), sb[0], sb[1]).noalias() += a.transpose() * g;
      break;
    }
    case OpKind::kConv2d: {
      const Tensor<T>& x = in(0);
      const Tensor<T>& w = in(1);
      const std::size_t batch = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
      const std::size_t co = w.dim(0), k = w.dim(2);
      const std::size_t ho = yv.dim(2), wo = yv.dim(3);
      const std::size_t ck = ci * k * k, hw = ho * wo;
      const auto& col = scratch_[id];
      Eigen::Map<const MatR<T>> wm(w.data().data(), co, ck);
      std::vector<T> dcol(wants(0) ? ck * hw : 0);
      for (std::size_t s = 0; s < batch; ++s) {
        Eigen::Map<const MatR<T>> g(gy.data().data() + s * co * hw, co, hw);
        if (wants(1)) {
          Eigen::Map<const MatR<T>> cm(col.data() + s * ck * hw, ck, hw);
          Eigen::Map<MatR<T>>(gin(1), co, ck).noalias() += g * cm.transpose();
        }
        if (wants(2)) {
          T* gb = gin(2);
          for (std::size_t o = 0; o < co; ++o) gb[o] += g.row(o).sum();
        }
        if (wants(0)) {
          Eigen::Map<MatR<T>> dc(dcol.data(), ck, hw);
          dc.noalias() = wm.transpose() * g;
          col2im_add(dcol.data(), ci, h, wd, k, n.attrs.stride, n.attrs.pad, ho, wo,
                     gin(0) + s * ci * h * wd);
        }
      }
      break;
    }
    case OpKind::kUpsample: {
      const Tensor<T>& x = in(0);
      const std::size_t f = n.attrs.factor;
      const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
      T* gx = gin(0);
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t oy = 0; oy < h * f; ++oy)
          for (std::size_t ox = 0; ox < w * f; ++ox)
            gx[(p * h + oy / f) * w + ox / f] += gy[(p * h * f + oy) * w * f + ox];
      break;
    }
    case OpKind::kLeakyRelu: {
      // Ties at exactly zero take the positive-side slope.
      const T slope = static_cast<T>(n.attrs.scalar);
      for (std::size_t i = 0; i < len; ++i) gin(0)[i] += in(0)[i] >= T{0} ? gy[i] : gy[i] * slope;
      break;
    }
    case OpKind::kRelu:
      for (std::size_t i = 0; i < len; ++i)
        if (in(0)[i] >= T{0}) gin(0)[i] += gy[i];
      break;
    case OpKind::kTanh:
      for (std::size_t i = 0; i < len; ++i) gin(0)[i] += gy[i] * (T{1} - yv[i] * yv[i]);
      break;
    case OpKind::kSigmoid:
      for (std::size_t i = 0; i < len; ++i) gin(0)[i] += gy[i] * yv[i] * (T{1} - yv[i]);
      break;
    case OpKind::kSoftmax: {
      const Shape& s = yv.shape();
      const std::size_t outer = s[0], ch = s[1], inner = inner_size(s, 2);
      T* gx = gin(0);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t p = 0; p < inner; ++p) {
          const std::size_t base = o * ch * inner + p;
          T dot{0};
          for (std::size_t c = 0; c < ch; ++c) dot += gy[base + c * inner] * yv[base + c * inner];
          for (std::size_t c = 0; c < ch; ++c)
            gx[base + c * inner] += yv[base + c * inner] * (gy[base + c * inner] - dot);
        }
      break;
    }
    case OpKind::kLog:
      for (std::size_t i = 0; i < len; ++i) gin(0)[i] += gy[i] / in(0)[i];
      break;
    case OpKind::kSquare:
      for (std::size_t i = 0; i < len; ++i) gin(0)[i] += T{2} * in(0)[i] * gy[i];
      break;
    case OpKind::kAbs:
      for (std::size_t i = 0; i < len; ++i) gin(0)[i] += in(0)[i] >= T{0} ? gy[i] : -gy[i];
      break;
    case OpKind::kClamp: {
      const T lo = static_cast<T>(n.attrs.lo), hi = static_cast<T>(n.attrs.hi);
      for (std::size_t i = 0; i < len; ++i)
        if (in(0)[i] >= lo && in(0)[i] <= hi) gin(0)[i] += gy[i];
      break;
    }
    case OpKind::kReduceMean:
    case OpKind::kReduceSum: {
      T g = gy[0];
      if (n.op == OpKind::kReduceMean) g /= static_cast<T>(in(0).numel());
      T* gx = gin(0);
      for (std::size_t i = 0; i < in(0).numel(); ++i) gx[i] += g;
      break;
    }
    case OpKind::kConcat: {
      const std::size_t axis = n.attrs.axis;
      const std::size_t outer = shape_numel(Shape(n.shape.begin(), n.shape.begin() + axis));
      const std::size_t out_chunk = inner_size(n.shape, axis);
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t chunk = inner_size(in(k).shape(), axis);
        if (wants(k)) {
          T* gx = gin(k);
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < chunk; ++j) gx[o * chunk + j] += gy[o * out_chunk + offset + j];
        }
        offset += chunk;
      }
      break;
    }
    case OpKind::kSlice: {
      const std::size_t row = inner_size(n.shape, 1);
      T* gx = gin(0) + n.attrs.begin * row;
      for (std::size_t i = 0; i < len; ++i) gx[i] += gy[i];
      break;
    }
    case OpKind::kGather: {
      if (!wants(0)) break;
      const Shape& s = in(0).shape();
      const std::size_t batch = s[0], ch = s[1], inner = inner_size(s, 2);
      T* gx = gin(0);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < inner; ++p) {
          const auto c = static_cast<std::size_t>(in(1)[b * inner + p]);
          gx[(b * ch + c) * inner + p] += gy[b * inner + p];
        }
      break;
    }
  }
}

template class Executor<float>;
template class Executor<double>;

// ---------------------------------------------------------------------------
// Convenience wrappers

template <typename T>
std::map<NodeId, Tensor<T>> forward(const Graph& graph, const Feeds<T>& feeds) {
  Executor<T> ex(graph);
  for (const auto& [id, t] : feeds) ex.feed(id, t);
  ex.forward();
  std::map<NodeId, Tensor<T>> out;
  for (NodeId i = 0; i < graph.size(); ++i) out.emplace(i, ex.value(i));
  return out;
}

template <typename T>
std::map<NodeId, Tensor<T>> backward(const Graph& graph, const Feeds<T>& feeds, NodeId loss) {
  Executor<T> ex(graph);
  for (const auto& [id, t] : feeds) ex.feed(id, t);
  ex.forward();
  ex.backward(loss);
  std::map<NodeId, Tensor<T>> out;
  for (NodeId leaf : graph.leaves())
    if (graph.node(leaf).requires_grad) out.emplace(leaf, ex.grad(leaf));
  return out;
}

template std::map<NodeId, Tensor<float>> forward(const Graph&, const Feeds<float>&);
template std::map<NodeId, Tensor<double>> forward(const Graph&, const Feeds<double>&);
template std::map<NodeId, Tensor<float>> backward(const Graph&, const Feeds<float>&, NodeId);
template std::map<NodeId, Tensor<double>> backward(const Graph&, const Feeds<double>&, NodeId);

Tensor<double> finite_diff_grad(const Graph& graph, const Feeds<double>& feeds, NodeId loss,
                                NodeId param, double h) {
  if (!(h > 0.0)) throw ShapeError("finite-difference step must be positive");
  if (shape_numel(graph.node(loss).shape) != 1)
    throw ShapeError(graph.describe(loss) + " is not a scalar loss");
  auto it = feeds.find(param);
  if (it == feeds.end()) throw ShapeError(graph.describe(param) + " has no feed");

  Executor<double> ex(graph);
  for (const auto& [id, t] : feeds) ex.feed(id, t);
  Tensor<double> theta = it->second;
  Tensor<double> out(theta.shape());
  for (std::size_t i = 0; i < theta.numel(); ++i) {
    const double orig = theta[i];
    theta[i] = orig + h;
    ex.feed(param, theta);
    ex.forward();
    const double fp = ex.value(loss)[0];
    theta[i] = orig - h;
    ex.feed(param, theta);
    ex.forward();
    const double fm = ex.value(loss)[0];
    theta[i] = orig;
    out[i] = (fp - fm) / (2.0 * h);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Standalone convolution kernels

template <typename T>
Tensor<T> conv2d_apply(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride,
                       std::size_t pad) {
  Graph g;
  const NodeId xi = g.leaf("x", x.shape());
  const NodeId wi = g.leaf("w", w.shape());
  const NodeId bi = g.leaf("b", {w.dim(0)});
  const NodeId y = g.conv2d(xi, wi, bi, stride, pad);
  Executor<T> ex(g);
  ex.feed(xi, x);
  ex.feed(wi, w);
  ex.feed(bi, Tensor<T>({w.dim(0)}));
  ex.forward();
  return ex.value(y);
}

template <typename T>
Tensor<T> conv2d_adjoint(const Tensor<T>& dy, const Tensor<T>& w, std::size_t stride,
                         std::size_t pad, std::size_t in_h, std::size_t in_w) {
  const std::size_t batch = dy.dim(0), co = w.dim(0), ci = w.dim(1), k = w.dim(2);
  const std::size_t ho = dy.dim(2), wo = dy.dim(3);
  if (dy.dim(1) != co || conv_out_size(in_h, k, stride, pad) != ho ||
      conv_out_size(in_w, k, stride, pad) != wo)
    throw ShapeError("conv2d_adjoint: output gradient shape inconsistent with input size");
  const std::size_t ck = ci * k * k, hw = ho * wo;
  Tensor<T> dx({batch, ci, in_h, in_w});
  std::vector<T> dcol(ck * hw);
  Eigen::Map<const MatR<T>> wm(w.data().data(), co, ck);
  for (std::size_t s = 0; s < batch; ++s) {
    Eigen::Map<const MatR<T>> g(dy.data().data() + s * co * hw, co, hw);
    Eigen::Map<MatR<T>>(dcol.data(), ck, hw).noalias() = wm.transpose() * g;
    col2im_add(dcol.data(), ci, in_h, in_w, k, stride, pad, ho, wo,
               dx.data().data() + s * ci * in_h * in_w);
  }
  return dx;
}

template Tensor<float> conv2d_apply(const Tensor<float>&, const Tensor<float>&, std::size_t,
                                    std::size_t);
template Tensor<double> conv2d_apply(const Tensor<double>&, const Tensor<double>&, std::size_t,
                                     std::size_t);
template Tensor<float> conv2d_adjoint(const Tensor<float>&, const Tensor<float>&, std::size_t,
                                      std::size_t, std::size_t, std::size_t);
template Tensor<double> conv2d_adjoint(const Tensor<double>&, const Tensor<double>&, std::size_t,
                                       std::size_t, std::size_t, std::size_t);

}  // namespace segan
