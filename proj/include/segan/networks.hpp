#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "segan/graph.hpp"
#include "segan/serialize.hpp"
#include "segan/tensor.hpp"

namespace segan {

/// Ordered, named parameter tensors of one network.
class ParamSet {
 public:
  void add(std::string name, Tensor<float> value);

  std::size_t size() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_.at(i).name; }
  Tensor<float>& operator[](std::size_t i) { return entries_.at(i).value; }
  const Tensor<float>& operator[](std::size_t i) const { return entries_.at(i).value; }
  Tensor<float>& at(const std::string& name);
  const Tensor<float>& at(const std::string& name) const;

  std::size_t scalar_count() const;
  // Same names and shapes in the same order.
  bool congruent(const ParamSet& other) const;

  std::vector<Tensor<float>*> pointers();
  std::vector<NamedTensor> to_named(const std::string& prefix) const;
  static ParamSet from_checkpoint(const Checkpoint& ck, const std::string& prefix);

 private:
  std::vector<NamedTensor> entries_;
};

// Leaf node ids, aligned with ParamSet order.
using ParamNodes = std::vector<NodeId>;

template <typename T>
void feed_params(Executor<T>& ex, const ParamNodes& nodes, const ParamSet& params);

struct SegNetSpec {
  std::size_t in_channels = 3;
  std::size_t classes = 4;
  // One width per stride-2 layer, then the width of the two same-resolution layers.
  std::vector<std::size_t> widths{16, 32, 32};
  std::size_t downsample = 2;
};

struct DiscSpec {
  std::size_t in_channels = 4;
  std::vector<std::size_t> widths{8, 16, 32, 64, 1};
  std::size_t kernel = 4;
  std::size_t stride = 2;
  std::size_t pad = 1;
  double slope = 0.2;
};

struct StyleGenSpec {
  std::vector<std::size_t> widths{16, 16};
  bool residual = true;
};

nlohmann::json to_json(const SegNetSpec& s);
nlohmann::json to_json(const DiscSpec& s);
nlohmann::json to_json(const StyleGenSpec& s);
SegNetSpec segnet_spec_from_json(const nlohmann::json& j);
DiscSpec disc_spec_from_json(const nlohmann::json& j);
StyleGenSpec style_spec_from_json(const nlohmann::json& j);

/// Desk-scale segmenter: stride-2 convs, two same-resolution convs, a 1x1
/// classifier head, and a nearest-neighbour upsample back to input size.
class SegNet {
 public:
  explicit SegNet(SegNetSpec spec);

  struct Taps {
    NodeId logits;    // [N,C,H,W]
    NodeId features;  // last feature layer before the classifier head
  };

  const SegNetSpec& spec() const { return spec_; }
  std::size_t classes() const { return spec_.classes; }
  // Input height and width must be multiples of this.
  std::size_t size_multiple() const { return std::size_t{1} << spec_.downsample; }

  ParamSet init(std::uint64_t seed) const;
  ParamNodes declare(Graph& g, const std::string& prefix, bool requires_grad) const;
  Taps build(Graph& g, NodeId image, const ParamNodes& params) const;

 private:
  SegNetSpec spec_;
};

/// Fully convolutional discriminator: stride-2 convs with leaky ReLU after every
/// layer except the last.
class Discriminator {
 public:
  explicit Discriminator(DiscSpec spec);

  static constexpr std::size_t kMinInput = 32;

  const DiscSpec& spec() const { return spec_; }
  std::size_t layer_count() const { return spec_.widths.size(); }
  ParamSet init(std::uint64_t seed) const;
  ParamNodes declare(Graph& g, const std::string& prefix, bool requires_grad) const;
  NodeId build(Graph& g, NodeId input, const ParamNodes& params) const;  // raw score map

 private:
  DiscSpec spec_;
};

/// Image-to-image generator for style transfer. In residual mode the output is
/// clamp(x + tanh(r(x)), 0, 1) with the last layer zero-initialised, so it starts
/// as the identity; otherwise it is sigmoid(r(x)).
class StyleGenerator {
 public:
  explicit StyleGenerator(StyleGenSpec spec);

  const StyleGenSpec& spec() const { return spec_; }
  ParamSet init(std::uint64_t seed) const;
  ParamNodes declare(Graph& g, const std::string& prefix, bool requires_grad) const;
  NodeId build(Graph& g, NodeId image, const ParamNodes& params) const;

  Tensor<float> apply(const ParamSet& params, const Tensor<float>& images) const;

 private:
  StyleGenSpec spec_;
};

struct BuiltSegNet {
  SegNet net;
  ParamSet params;
};
struct BuiltDiscriminator {
  Discriminator net;
  ParamSet params;
};
struct BuiltStyleGenerator {
  StyleGenerator net;
  ParamSet params;
};

BuiltSegNet build_segnet(const SegNetSpec& spec, std::uint64_t seed);
BuiltDiscriminator build_discriminator(const DiscSpec& spec, std::uint64_t seed);
BuiltStyleGenerator build_style_generator(const StyleGenSpec& spec, std::uint64_t seed);

struct Prediction {
  Tensor<float> probs;  // [N,C,H,W]
  LabelMap labels;      // [N,H,W], argmax with ties to the lowest class
};

Tensor<float> segnet_logits(const SegNet& net, const ParamSet& params, const Tensor<float>& images);
Tensor<float> segnet_features(const SegNet& net, const ParamSet& params,
                              const Tensor<float>& images);
Prediction predict_segmentation(const SegNet& net, const ParamSet& params,
                                const Tensor<float>& images);
// Average of softmax maps predicted at each rescaled input, resampled back to the
// native resolution. Rescaled sizes are rounded to the network's size multiple.
Tensor<float> multi_scale_predict(const SegNet& net, const ParamSet& params,
                                  const Tensor<float>& images, const std::vector<double>& scales);

LabelMap argmax_channels(const Tensor<float>& probs);
Tensor<float> softmax_channels(const Tensor<float>& logits);
// Bilinear resize with half-pixel centres, [N,C,H,W] -> [N,C,h,w].
Tensor<float> resize_bilinear(const Tensor<float>& x, std::size_t h, std::size_t w);

// ---------------------------------------------------------------------------
// Spectral norms

struct LinearOperator {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::function<void(std::span<const double>, std::span<double>)> apply;
  std::function<void(std::span<const double>, std::span<double>)> adjoint;
};

LinearOperator matrix_operator(Tensor<double> matrix);  // [rows, cols]
// Convolution (no bias) acting on a flattened [Ci, h, w] input.
LinearOperator conv_operator(Tensor<double> weight, std::size_t stride, std::size_t pad,
                             std::size_t in_h, std::size_t in_w);

struct SpectralNormResult {
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Power iteration on A^T A from a seeded random start; stops when successive
// estimates agree to `tol` relative.
SpectralNormResult spectral_norm(const LinearOperator& op, int iters, double tol,
                                 std::uint64_t seed = 0);

}  // namespace segan
