#include "segan/networks.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "segan/rng.hpp"

namespace segan {
namespace {

Tensor<float> kaiming(Rng& rng, std::size_t co, std::size_t ci, std::size_t k) {
  Tensor<float> w({co, ci, k, k});
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(ci * k * k)));
  for (auto& v : w.data()) v = static_cast<float>(normal(rng));
  return w;
}

void add_conv(ParamSet& ps, Rng& rng, const std::string& name, std::size_t co, std::size_t ci,
              std::size_t k, bool zero = false) {
  Tensor<float> w = zero ? Tensor<float>({co, ci, k, k}) : kaiming(rng, co, ci, k);
  ps.add(name + ".w", std::move(w));
  ps.add(name + ".b", Tensor<float>({co}));
}

ParamNodes declare_all(Graph& g, const ParamSet& shapes, const std::string& prefix,
                       bool requires_grad) {
  ParamNodes out;
  for (std::size_t i = 0; i < shapes.size(); ++i)
    out.push_back(g.leaf(prefix + shapes.name(i), shapes[i].shape(), requires_grad));
  return out;
}

void require_widths(const std::vector<std::size_t>& widths, const char* what) {
  for (std::size_t w : widths)
    if (w == 0) throw ConfigError(std::string(what) + ": channel widths must be positive");
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamSet

void ParamSet::add(std::string name, Tensor<float> value) {
  for (const auto& e : entries_)
    if (e.name == name) throw ConfigError("duplicate parameter name " + name);
  entries_.push_back({std::move(name), std::move(value)});
}

Tensor<float>& ParamSet::at(const std::string& name) {
  for (auto& e : entries_)
    if (e.name == name) return e.value;
  throw ConfigError("no parameter named " + name);
}

const Tensor<float>& ParamSet::at(const std::string& name) const {
  return const_cast<ParamSet*>(this)->at(name);
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

bool ParamSet::congruent(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].name != other.entries_[i].name ||
        entries_[i].value.shape() != other.entries_[i].value.shape())
      return false;
  return true;
}

std::vector<Tensor<float>*> ParamSet::pointers() {
  std::vector<Tensor<float>*> out;
  for (auto& e : entries_) out.push_back(&e.value);
  return out;
}

std::vector<NamedTensor> ParamSet::to_named(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (const auto& e : entries_) out.push_back({prefix + e.name, e.value});
  return out;
}

ParamSet ParamSet::from_checkpoint(const Checkpoint& ck, const std::string& prefix) {
  ParamSet ps;
  for (const auto& t : ck.tensors)
    if (t.name.rfind(prefix, 0) == 0) ps.add(t.name.substr(prefix.size()), t.value);
  return ps;
}

template <typename T>
void feed_params(Executor<T>& ex, const ParamNodes& nodes, const ParamSet& params) {
  if (nodes.size() != params.size())
    throw ShapeError("parameter node count does not match parameter set");
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if constexpr (std::is_same_v<T, float>) ex.feed(nodes[i], params[i]);
    else ex.feed(nodes[i], params[i].template cast<T>());
  }
}

template void feed_params(Executor<float>&, const ParamNodes&, const ParamSet&);
template void feed_params(Executor<double>&, const ParamNodes&, const ParamSet&);

// ---------------------------------------------------------------------------
// Spec serialisation

nlohmann::json to_json(const SegNetSpec& s) {
  return {{"in_channels", s.in_channels}, {"classes", s.classes}, {"widths", s.widths},
          {"downsample", s.downsample}};
}
nlohmann::json to_json(const DiscSpec& s) {
  return {{"in_channels", s.in_channels}, {"widths", s.widths}, {"kernel", s.kernel},
          {"stride", s.stride}, {"pad", s.pad}, {"slope", s.slope}};
}
nlohmann::json to_json(const StyleGenSpec& s) {
  return {{"widths", s.widths}, {"residual", s.residual}};
}

SegNetSpec segnet_spec_from_json(const nlohmann::json& j) {
  SegNetSpec s;
  s.in_channels = j.at("in_channels").get<std::size_t>();
  s.classes = j.at("classes").get<std::size_t>();
  s.widths = j.at("widths").get<std::vector<std::size_t>>();
  s.downsample = j.at("downsample").get<std::size_t>();
  return s;
}
DiscSpec disc_spec_from_json(const nlohmann::json& j) {
  DiscSpec s;
  s.in_channels = j.at("in_channels").get<std::size_t>();
  s.widths = j.at("widths").get<std::vector<std::size_t>>();
  s.kernel = j.at("kernel").get<std::size_t>();
  s.stride = j.at("stride").get<std::size_t>();
  s.pad = j.at("pad").get<std::size_t>();
  s.slope = j.at("slope").get<double>();
  return s;
}
StyleGenSpec style_spec_from_json(const nlohmann::json& j) {
  StyleGenSpec s;
  s.widths = j.at("widths").get<std::vector<std::size_t>>();
  s.residual = j.at("residual").get<bool>();
  return s;
}

// ---------------------------------------------------------------------------
// Segmenter

SegNet::SegNet(SegNetSpec spec) : spec_(std::move(spec)) {
  if (spec_.classes < 2) throw ConfigError("segnet: class count must be at least 2");
  if (spec_.in_channels == 0) throw ConfigError("segnet: in_channels must be positive");
  if (spec_.widths.size() != spec_.downsample + 1)
    throw ConfigError("segnet: expected " + std::to_string(spec_.downsample + 1) +
                      " widths for " + std::to_string(spec_.downsample) + " downsampling layers");
  require_widths(spec_.widths, "segnet");
}

ParamSet SegNet::init(std::uint64_t seed) const {
  Rng rng(seed);
  ParamSet ps;
  std::size_t in = spec_.in_channels;
  for (std::size_t i = 0; i < spec_.downsample; ++i) {
    add_conv(ps, rng, "down" + std::to_string(i + 1), spec_.widths[i], in, 3);
    in = spec_.widths[i];
  }
  const std::size_t w = spec_.widths.back();
  add_conv(ps, rng, "same1", w, in, 3);
  add_conv(ps, rng, "same2", w, w, 3);
  add_conv(ps, rng, "head", spec_.classes, w, 1);
  return ps;
}

ParamNodes SegNet::declare(Graph& g, const std::string& prefix, bool requires_grad) const {
  return declare_all(g, init(0), prefix, requires_grad);
}

SegNet::Taps SegNet::build(Graph& g, NodeId image, const ParamNodes& p) const {
  const Shape& s = g.node(image).shape;
  if (s.size() != 4 || s[1] != spec_.in_channels)
    throw ShapeError("segnet input must be [N," + std::to_string(spec_.in_channels) +
                     ",H,W], got " + shape_str(s));
  if (s[2] % size_multiple() != 0 || s[3] % size_multiple() != 0)
    throw ShapeError("segnet input size " + shape_str(s) + " not a multiple of " +
                     std::to_string(size_multiple()));
  if (p.size() != 2 * (spec_.downsample + 3)) throw ShapeError("segnet parameter count mismatch");
  NodeId h = image;
  std::size_t k = 0;
  for (std::size_t i = 0; i < spec_.downsample; ++i, k += 2)
    h = g.relu(g.conv2d(h, p[k], p[k + 1], 2, 1));
  h = g.relu(g.conv2d(h, p[k], p[k + 1], 1, 1));
  k += 2;
  h = g.relu(g.conv2d(h, p[k], p[k + 1], 1, 1));
  k += 2;
  const NodeId features = g.named(h, "features");
  // A 1x1 head commutes with nearest-neighbour upsampling, so classify first.
  const NodeId coarse = g.conv2d(features, p[k], p[k + 1], 1, 0);
  const NodeId logits = g.named(g.upsample(coarse, size_multiple()), "logits");
  return {logits, features};
}

// ---------------------------------------------------------------------------
// Discriminator

Discriminator::Discriminator(DiscSpec spec) : spec_(std::move(spec)) {
  if (spec_.widths.empty()) throw ConfigError("discriminator: needs at least one layer");
  require_widths(spec_.widths, "discriminator");
  if (spec_.kernel == 0 || spec_.stride == 0) throw ConfigError("discriminator: bad kernel/stride");
}

ParamSet Discriminator::init(std::uint64_t seed) const {
  Rng rng(seed);
  ParamSet ps;
  std::size_t in = spec_.in_channels;
  for (std::size_t i = 0; i < spec_.widths.size(); ++i) {
    add_conv(ps, rng, "l" + std::to_string(i + 1), spec_.widths[i], in, spec_.kernel);
    in = spec_.widths[i];
  }
  return ps;
}

ParamNodes Discriminator::declare(Graph& g, const std::string& prefix, bool requires_grad) const {
  return declare_all(g, init(0), prefix, requires_grad);
}

NodeId Discriminator::build(Graph& g, NodeId input, const ParamNodes& p) const {
  const Shape& s = g.node(input).shape;
  if (s.size() != 4 || s[1] != spec_.in_channels)
    throw ShapeError("discriminator input must be [N," + std::to_string(spec_.in_channels) +
                     ",H,W], got " + shape_str(s));
  if (s[2] < kMinInput || s[3] < kMinInput)
    throw ShapeError("discriminator input " + shape_str(s) + " smaller than " +
                     std::to_string(kMinInput) + " pixels");
  NodeId h = input;
  const std::size_t layers = spec_.widths.size();
  for (std::size_t i = 0; i < layers; ++i) {
    h = g.conv2d(h, p[2 * i], p[2 * i + 1], spec_.stride, spec_.pad);
    if (i + 1 < layers) h = g.leaky_relu(h, spec_.slope);
  }
  return g.named(h, "disc_out");
}

// ---------------------------------------------------------------------------
// Style generator

StyleGenerator::StyleGenerator(StyleGenSpec spec) : spec_(std::move(spec)) {
  if (spec_.widths.empty()) throw ConfigError("style generator: needs at least one hidden layer");
  require_widths(spec_.widths, "style generator");
}

ParamSet StyleGenerator::init(std::uint64_t seed) const {
  Rng rng(seed);
  ParamSet ps;
  std::size_t in = 3;
  for (std::size_t i = 0; i < spec_.widths.size(); ++i) {
    add_conv(ps, rng, "c" + std::to_string(i + 1), spec_.widths[i], in, 3);
    in = spec_.widths[i];
  }
  add_conv(ps, rng, "out", 3, in, 3, spec_.residual);
  return ps;
}

ParamNodes StyleGenerator::declare(Graph& g, const std::string& prefix, bool requires_grad) const {
  return declare_all(g, init(0), prefix, requires_grad);
}

NodeId StyleGenerator::build(Graph& g, NodeId image, const ParamNodes& p) const {
  const Shape& s = g.node(image).shape;
  if (s.size() != 4 || s[1] != 3)
    throw ShapeError("style generator input must be [N,3,H,W], got " + shape_str(s));
  NodeId h = image;
  std::size_t k = 0;
  for (; k + 2 < p.size(); k += 2) h = g.relu(g.conv2d(h, p[k], p[k + 1], 1, 1));
  const NodeId r = g.conv2d(h, p[k], p[k + 1], 1, 1);
  if (spec_.residual) return g.named(g.clamp(g.add(image, g.tanh(r)), 0.0, 1.0), "styled");
  return g.named(g.sigmoid(r), "styled");
}

Tensor<float> StyleGenerator::apply(const ParamSet& params, const Tensor<float>& images) const {
  Graph g;
  const NodeId x = g.leaf("image", images.shape());
  const ParamNodes p = declare(g, "", false);
  const NodeId y = build(g, x, p);
  Executor<float> ex(g);
  ex.feed(x, images);
  feed_params(ex, p, params);
  ex.forward();
  return ex.value(y);
}

BuiltSegNet build_segnet(const SegNetSpec& spec, std::uint64_t seed) {
  SegNet net(spec);
  ParamSet params = net.init(seed);
  return {std::move(net), std::move(params)};
}

BuiltDiscriminator build_discriminator(const DiscSpec& spec, std::uint64_t seed) {
  Discriminator net(spec);
  ParamSet params = net.init(seed);
  return {std::move(net), std::move(params)};
}

BuiltStyleGenerator build_style_generator(const StyleGenSpec& spec, std::uint64_t seed) {
  StyleGenerator net(spec);
  ParamSet params = net.init(seed);
  return {std::move(net), std::move(params)};
}

// ---------------------------------------------------------------------------
// Inference

namespace {
Tensor<float> run_segnet(const SegNet& net, const ParamSet& params, const Tensor<float>& images,
                         bool features) {
  Graph g;
  const NodeId x = g.leaf("image", images.shape());
  const ParamNodes p = net.declare(g, "", false);
  const auto taps = net.build(g, x, p);
  Executor<float> ex(g);
  ex.feed(x, images);
  feed_params(ex, p, params);
  ex.forward();
  return ex.value(features ? taps.features : taps.logits);
}
}  // namespace

Tensor<float> segnet_logits(const SegNet& net, const ParamSet& params, const Tensor<float>& images) {
  return run_segnet(net, params, images, false);
}

Tensor<float> segnet_features(const SegNet& net, const ParamSet& params,
                              const Tensor<float>& images) {
  return run_segnet(net, params, images, true);
}

Tensor<float> softmax_channels(const Tensor<float>& logits) {
  Graph g;
  const NodeId x = g.leaf("logits", logits.shape());
  const NodeId y = g.softmax(x);
  Executor<float> ex(g);
  ex.feed(x, logits);
  ex.forward();
  return ex.value(y);
}

LabelMap argmax_channels(const Tensor<float>& probs) {
  const std::size_t n = probs.dim(0), c = probs.dim(1), h = probs.dim(2), w = probs.dim(3);
  LabelMap out({n, h, w});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < h * w; ++p) {
      std::size_t best = 0;
      float bv = probs[(b * c) * h * w + p];
      for (std::size_t k = 1; k < c; ++k) {
        const float v = probs[(b * c + k) * h * w + p];
        if (v > bv) {  // strict: ties go to the lowest index
          bv = v;
          best = k;
        }
      }
      out[b * h * w + p] = static_cast<std::uint8_t>(best);
    }
  return out;
}

Prediction predict_segmentation(const SegNet& net, const ParamSet& params,
                                const Tensor<float>& images) {
  Prediction p;
  p.probs = softmax_channels(segnet_logits(net, params, images));
  p.labels = argmax_channels(p.probs);
  return p;
}

Tensor<float> resize_bilinear(const Tensor<float>& x, std::size_t oh, std::size_t ow) {
  const std::size_t n = x.dim(0), c = x.dim(1), ih = x.dim(2), iw = x.dim(3);
  if (oh == ih && ow == iw) return x;
  Tensor<float> out({n, c, oh, ow});
  auto coord = [](std::size_t o, std::size_t in, std::size_t out_len, std::size_t& i0,
                  std::size_t& i1, double& t) {
    double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in) /
                     static_cast<double>(out_len) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(src));
    i1 = std::min(i0 + 1, in - 1);
    t = src - static_cast<double>(i0);
  };
  for (std::size_t oy = 0; oy < oh; ++oy) {
    std::size_t y0, y1;
    double ty;
    coord(oy, ih, oh, y0, y1, ty);
    for (std::size_t ox = 0; ox < ow; ++ox) {
      std::size_t x0, x1;
      double tx;
      coord(ox, iw, ow, x0, x1, tx);
      for (std::size_t p = 0; p < n * c; ++p) {
        const float* src = x.data().data() + p * ih * iw;
        const double top = src[y0 * iw + x0] * (1 - tx) + src[y0 * iw + x1] * tx;
        const double bot = src[y1 * iw + x0] * (1 - tx) + src[y1 * iw + x1] * tx;
        out[(p * oh + oy) * ow + ox] = static_cast<float>(top * (1 - ty) + bot * ty);
      }
    }
  }
  return out;
}

Tensor<float> multi_scale_predict(const SegNet& net, const ParamSet& params,
                                  const Tensor<float>& images, const std::vector<double>& scales) {
  if (scales.empty()) throw ConfigError("multi-scale prediction needs at least one scale");
  const std::size_t h = images.dim(2), w = images.dim(3), m = net.size_multiple();
  auto scaled = [m](std::size_t len, double s) {
    const auto units = static_cast<std::size_t>(std::lround(static_cast<double>(len) * s / m));
    return std::max<std::size_t>(units, 1) * m;
  };
  Tensor<float> acc;
  for (double s : scales) {
    if (!(s > 0.0)) throw ConfigError("multi-scale prediction scales must be positive");
    const std::size_t sh = scaled(h, s), sw = scaled(w, s);
    Tensor<float> probs =
        softmax_channels(segnet_logits(net, params, resize_bilinear(images, sh, sw)));
    probs = resize_bilinear(probs, h, w);
    if (acc.empty()) {
      acc = std::move(probs);
    } else {
      for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += probs[i];
    }
  }
  if (scales.size() > 1) {
    const auto inv = static_cast<float>(scales.size());
    for (auto& v : acc.data()) v /= inv;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Spectral norms

LinearOperator matrix_operator(Tensor<double> matrix) {
  if (matrix.rank() != 2) throw ShapeError("matrix_operator needs a 2-D tensor");
  const std::size_t rows = matrix.dim(0), cols = matrix.dim(1);
  auto m = std::make_shared<Tensor<double>>(std::move(matrix));
  LinearOperator op;
  op.in_dim = cols;
  op.out_dim = rows;
  op.apply = [m, rows, cols](std::span<const double> v, std::span<double> out) {
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < cols; ++c) acc += (*m)[r * cols + c] * v[c];
      out[r] = acc;
    }
  };
  op.adjoint = [m, rows, cols](std::span<const double> u, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out[c] += (*m)[r * cols + c] * u[r];
  };
  return op;
}

LinearOperator conv_operator(Tensor<double> weight, std::size_t stride, std::size_t pad,
                             std::size_t in_h, std::size_t in_w) {
  if (weight.rank() != 4) throw ShapeError("conv_operator needs a [Co,Ci,k,k] weight");
  const std::size_t co = weight.dim(0), ci = weight.dim(1), k = weight.dim(2);
  const std::size_t ho = conv_out_size(in_h, k, stride, pad);
  const std::size_t wo = conv_out_size(in_w, k, stride, pad);
  if (ho == 0 || wo == 0) throw ShapeError("conv_operator: input too small for kernel");
  auto w = std::make_shared<Tensor<double>>(std::move(weight));
  LinearOperator op;
  op.in_dim = ci * in_h * in_w;
  op.out_dim = co * ho * wo;
  op.apply = [=](std::span<const double> v, std::span<double> out) {
    Tensor<double> x({1, ci, in_h, in_w}, std::vector<double>(v.begin(), v.end()));
    const Tensor<double> y = conv2d_apply(x, *w, stride, pad);
    std::copy(y.data().begin(), y.data().end(), out.begin());
  };
  op.adjoint = [=](std::span<const double> u, std::span<double> out) {
    Tensor<double> dy({1, co, ho, wo}, std::vector<double>(u.begin(), u.end()));
    const Tensor<double> dx = conv2d_adjoint(dy, *w, stride, pad, in_h, in_w);
    std::copy(dx.data().begin(), dx.data().end(), out.begin());
  };
  return op;
}

SpectralNormResult spectral_norm(const LinearOperator& op, int iters, double tol,
                                 std::uint64_t seed) {
  if (iters < 1) throw ConfigError("spectral_norm needs at least one iteration");
  Rng rng(seed);
  std::normal_distribution<double> normal;
  std::vector<double> v(op.in_dim), u(op.out_dim);
  for (auto& x : v) x = normal(rng);
  auto norm = [](const std::vector<double>& x) {
    double s = 0.0;
    for (double e : x) s += e * e;
    return std::sqrt(s);
  };
  double nv = norm(v);
  for (auto& x : v) x /= nv;

  SpectralNormResult res;
  double prev = -1.0;
  for (int it = 1; it <= iters; ++it) {
    op.apply(v, u);
    const double sigma = norm(u);
    res.value = sigma;
    res.iterations = it;
    if (sigma == 0.0) {
      res.converged = true;
      return res;
    }
    if (prev >= 0.0 && std::abs(sigma - prev) <= tol * sigma) {
      res.converged = true;
      return res;
    }
    prev = sigma;
    op.adjoint(u, v);
    nv = norm(v);
    if (nv == 0.0) {
      res.converged = true;
      return res;
    }
    for (auto& x : v) x /= nv;
  }
  return res;
}

}  // namespace segan
