#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "segan/tensor.hpp"

namespace segan {

struct AppearanceParams {
  double palette_rotation = 0.0;   // radians, about the grey axis
  double brightness = 0.0;         // additive, result clamped to [0,1]
  double blur_sigma = 0.0;         // Gaussian blur radius in pixels
  double texture_frequency = 0.0;  // cycles per pixel of the overlay; 0 disables it
};

struct ClassLayout {
  std::array<double, 2> mean{0.5, 0.5};          // object centre (y, x), image-relative
  std::array<double, 3> cov{0.02, 0.0, 0.02};    // (var_y, cov_yx, var_x)
  double occurrence = 0.5;                       // probability the class appears
  double size = 0.12;                            // nominal half-extent, image-relative
};

struct ShiftParams {
  AppearanceParams appearance;
  std::vector<ClassLayout> layout;  // classes 1..C-1; class 0 is background
};

// Default per-class layout for `classes` classes.
std::vector<ClassLayout> default_layout(std::size_t classes);

nlohmann::json to_json(const ShiftParams& p);
ShiftParams shift_params_from_json(const nlohmann::json& j);

enum class ShapeKind { kRectangle, kDisk, kBar };
// Object geometry by class: 1 rectangle, 2 disk, 3 bar, repeating.
ShapeKind shape_for_class(std::size_t cls);

struct Scene {
  Tensor<float> image;  // [H,W,3] in [0,1]
  LabelMap label;       // [H,W]
  std::vector<std::uint8_t> present;  // per class: object drawn this scene
};

Scene generate_scene(const ShiftParams& params, std::uint64_t seed, std::size_t h, std::size_t w,
                     std::size_t classes);

// Palette rotation, brightness offset, Gaussian blur, texture overlay; [H,W,3] in and out.
Tensor<float> apply_domain_style(const Tensor<float>& image, const AppearanceParams& appearance);

// Transform that moves images rendered under `from` toward `to`.
AppearanceParams relative_appearance(const AppearanceParams& from, const AppearanceParams& to);

// Images and labels the training loops may read; no target labels.
struct TrainingData {
  std::vector<Tensor<float>> source_images;  // [3,H,W]
  std::vector<LabelMap> source_labels;       // [H,W]
  std::vector<Tensor<float>> target_images;  // [3,H,W]
  std::size_t classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};

struct EvalSet {
  std::vector<Tensor<float>> images;  // [3,H,W]
  std::vector<LabelMap> labels;
  std::size_t classes = 0;
};

class DomainDataset {
 public:
  DomainDataset() = default;
  DomainDataset(std::vector<Scene> source, std::vector<Scene> target, std::size_t classes,
                ShiftParams source_params, ShiftParams target_params, std::uint64_t seed);

  std::size_t classes() const { return classes_; }
  std::size_t height() const;
  std::size_t width() const;
  std::size_t source_count() const { return source_.size(); }
  std::size_t target_count() const { return target_.size(); }
  std::uint64_t seed() const { return seed_; }
  const ShiftParams& source_params() const { return source_params_; }
  const ShiftParams& target_params() const { return target_params_; }

  const Tensor<float>& source_image(std::size_t i) const { return source_.at(i).image; }
  const LabelMap& source_label(std::size_t i) const { return source_.at(i).label; }
  const Tensor<float>& target_image(std::size_t i) const { return target_.at(i).image; }
  // Held-out annotations; only evaluation code may read these.
  const LabelMap& target_label_for_evaluation(std::size_t i) const { return target_.at(i).label; }

  TrainingData training_view() const;
  EvalSet target_eval_set() const;

  nlohmann::json manifest() const;
  void save(const std::filesystem::path& dir) const;
  static DomainDataset load(const std::filesystem::path& dir);

 private:
  std::vector<Scene> source_;
  std::vector<Scene> target_;
  std::size_t classes_ = 0;
  ShiftParams source_params_;
  ShiftParams target_params_;
  std::uint64_t seed_ = 0;
};

std::vector<Scene> generate_domain(const ShiftParams& params, std::size_t count,
                                   std::uint64_t seed, std::size_t h, std::size_t w,
                                   std::size_t classes);

DomainDataset generate_dataset(const ShiftParams& src_params, const ShiftParams& tgt_params,
                               std::size_t n_src, std::size_t n_tgt, std::uint64_t seed,
                               std::size_t h = 64, std::size_t w = 64, std::size_t classes = 4);

struct ShiftSeverity {
  double appearance_gap = 0.0;
  double layout_gap = 0.0;
};

inline constexpr std::size_t kHistogramBins = 16;

// Per-channel colour histogram averaged over images, normalised per channel.
std::vector<double> mean_color_histogram(const std::vector<Tensor<float>>& images);
std::vector<double> class_frequencies(const std::vector<LabelMap>& labels, std::size_t classes);
double histogram_distance(const std::vector<double>& a, const std::vector<double>& b);
double total_variation(const std::vector<double>& p, const std::vector<double>& q);

ShiftSeverity shift_severity(const DomainDataset& ds);

Tensor<float> hwc_to_chw(const Tensor<float>& image);
Tensor<float> chw_to_hwc(const Tensor<float>& image);

}  // namespace segan
