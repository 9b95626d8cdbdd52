#include "segan/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

#include "segan/error.hpp"
#include "segan/rng.hpp"
#include "segan/serialize.hpp"

namespace segan {
namespace {

constexpr double kTextureAmplitude = 0.06;
constexpr double kPixelNoise = 0.03;
constexpr double kColorJitter = 0.06;

std::array<double, 3> class_color(std::size_t cls, std::size_t classes) {
  if (cls == 0) return {0.45, 0.45, 0.45};
  static constexpr std::array<std::array<double, 3>, 3> kBase{
      {{0.85, 0.30, 0.25}, {0.25, 0.75, 0.30}, {0.30, 0.35, 0.85}}};
  if (classes <= 4) return kBase[(cls - 1) % 3];
  // Evenly spaced hues for larger class counts.
  const double hue = static_cast<double>(cls - 1) / static_cast<double>(classes - 1);
  auto chan = [hue](double shift) {
    return 0.55 + 0.3 * std::cos(2.0 * std::numbers::pi * (hue - shift));
  };
  return {chan(0.0), chan(1.0 / 3.0), chan(2.0 / 3.0)};
}

// Lower Cholesky factor of (var_y, cov_yx, var_x); throws on non-PSD input.
std::array<double, 3> cholesky(const std::array<double, 3>& c, std::size_t cls) {
  const double a = c[0], b = c[1], d = c[2];
  if (a < 0.0 || d < 0.0 || a * d - b * b < -1e-15)
    throw ConfigError("layout covariance for class " + std::to_string(cls) +
                      " is not positive semi-definite");
  const double l00 = std::sqrt(a);
  const double l10 = l00 > 0.0 ? b / l00 : 0.0;
  const double l11 = std::sqrt(std::max(0.0, d - l10 * l10));
  return {l00, l10, l11};
}

void validate(const ShiftParams& p, std::size_t classes) {
  if (classes < 2) throw ConfigError("classes: need at least 2, got " + std::to_string(classes));
  if (p.layout.size() != classes - 1)
    throw ConfigError("layout: expected " + std::to_string(classes - 1) + " class entries, got " +
                      std::to_string(p.layout.size()));
  if (p.appearance.blur_sigma < 0.0) throw ConfigError("appearance.blur_sigma must be >= 0");
  if (p.appearance.texture_frequency < 0.0)
    throw ConfigError("appearance.texture_frequency must be >= 0");
  for (std::size_t c = 0; c < p.layout.size(); ++c) {
    const auto& l = p.layout[c];
    if (!(l.occurrence >= 0.0 && l.occurrence <= 1.0))
      throw ConfigError("layout[" + std::to_string(c) + "].occurrence must lie in [0,1]");
    if (!(l.size > 0.0)) throw ConfigError("layout[" + std::to_string(c) + "].size must be > 0");
    cholesky(l.cov, c + 1);
  }
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Half-sample symmetric reflection: ... b a | a b c ... x y | y x ...
std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
  const auto len = static_cast<std::ptrdiff_t>(n);
  const std::ptrdiff_t period = 2 * len;
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < len ? i : period - 1 - i);
}

void blur_hwc(std::vector<double>& img, std::size_t h, std::size_t w, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const auto radius = static_cast<std::ptrdiff_t>(k.size() / 2);
  std::vector<double> tmp(img.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t j = -radius; j <= radius; ++j)
          acc += k[j + radius] * img[(y * w + reflect(static_cast<std::ptrdiff_t>(x) + j, w)) * 3 + c];
        tmp[(y * w + x) * 3 + c] = acc;
      }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t j = -radius; j <= radius; ++j)
          acc += k[j + radius] * tmp[(reflect(static_cast<std::ptrdiff_t>(y) + j, h) * w + x) * 3 + c];
        img[(y * w + x) * 3 + c] = acc;
      }
}

}  // namespace

std::vector<ClassLayout> default_layout(std::size_t classes) {
  std::vector<ClassLayout> out;
  for (std::size_t c = 1; c < classes; ++c) {
    ClassLayout l;
    const double t = classes > 2 ? static_cast<double>(c - 1) / static_cast<double>(classes - 2) : 0.5;
    l.mean = {0.35 + 0.3 * t, 0.3 + 0.4 * t};
    l.cov = {0.02, 0.0, 0.02};
    l.occurrence = 0.7;
    l.size = 0.12;
    out.push_back(l);
  }
  return out;
}

ShapeKind shape_for_class(std::size_t cls) {
  switch ((cls - 1) % 3) {
    case 0: return ShapeKind::kRectangle;
    case 1: return ShapeKind::kDisk;
    default: return ShapeKind::kBar;
  }
}

nlohmann::json to_json(const ShiftParams& p) {
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& l : p.layout)
    layout.push_back({{"mean", l.mean}, {"cov", l.cov}, {"occurrence", l.occurrence}, {"size", l.size}});
  return {{"appearance",
           {{"palette_rotation", p.appearance.palette_rotation},
            {"brightness", p.appearance.brightness},
            {"blur_sigma", p.appearance.blur_sigma},
            {"texture_frequency", p.appearance.texture_frequency}}},
          {"layout", layout}};
}

ShiftParams shift_params_from_json(const nlohmann::json& j) {
  ShiftParams p;
  const auto& a = j.at("appearance");
  p.appearance.palette_rotation = a.at("palette_rotation").get<double>();
  p.appearance.brightness = a.at("brightness").get<double>();
  p.appearance.blur_sigma = a.at("blur_sigma").get<double>();
  p.appearance.texture_frequency = a.at("texture_frequency").get<double>();
  for (const auto& l : j.at("layout")) {
    ClassLayout c;
    c.mean = l.at("mean").get<std::array<double, 2>>();
    c.cov = l.at("cov").get<std::array<double, 3>>();
    c.occurrence = l.at("occurrence").get<double>();
    c.size = l.at("size").get<double>();
    p.layout.push_back(c);
  }
  return p;
}

Scene generate_scene(const ShiftParams& params, std::uint64_t seed, std::size_t h, std::size_t w,
                     std::size_t classes) {
  if (h < 32 || w < 32) throw ConfigError("scene size must be at least 32x32");
  validate(params, classes);
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal;

  Scene s;
  s.label = LabelMap({h, w});
  s.present.assign(classes, 0);
  s.present[0] = 1;
  const double extent = static_cast<double>(std::min(h, w));

  for (std::size_t cls = 1; cls < classes; ++cls) {
    const ClassLayout& l = params.layout[cls - 1];
    // Draw every variate unconditionally so one class's occurrence does not
    // shift the random stream seen by the others.
    const double u = unit(rng);
    const double z0 = normal(rng), z1 = normal(rng);
    const double j0 = unit(rng), j1 = unit(rng), orient = unit(rng);
    if (u >= l.occurrence) continue;
    s.present[cls] = 1;

    const auto L = cholesky(l.cov, cls);
    const double cy = std::clamp(l.mean[0] + L[0] * z0, 0.0, 1.0) * static_cast<double>(h - 1);
    const double cx = std::clamp(l.mean[1] + L[1] * z0 + L[2] * z1, 0.0, 1.0) *
                      static_cast<double>(w - 1);
    const double nominal = l.size * extent;
    auto jitter = [nominal](double r) {
      const long lo = std::max(1L, std::lround(0.75 * nominal));
      const long hi = std::max(lo, std::lround(1.25 * nominal));
      return lo + std::min(static_cast<long>(r * static_cast<double>(hi - lo + 1)), hi - lo);
    };
    const long a = jitter(j0), b = jitter(j1);
    const long icy = std::lround(cy), icx = std::lround(cx);

    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const long dy = static_cast<long>(y) - icy, dx = static_cast<long>(x) - icx;
        bool inside = false;
        switch (shape_for_class(cls)) {
          case ShapeKind::kRectangle: inside = std::labs(dy) <= a && std::labs(dx) <= b; break;
          case ShapeKind::kDisk: inside = dy * dy + dx * dx <= a * a; break;
          case ShapeKind::kBar: {
            const long len = 2 * a, thick = std::max(1L, a / 3);
            inside = orient < 0.5 ? (std::labs(dy) <= thick && std::labs(dx) <= len)
                                  : (std::labs(dy) <= len && std::labs(dx) <= thick);
            break;
          }
        }
        if (inside) s.label[y * w + x] = static_cast<std::uint8_t>(cls);
      }
  }

  // Per-scene colour jitter per class, then per-pixel noise.
  std::vector<std::array<double, 3>> colors(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    colors[c] = class_color(c, classes);
    for (auto& v : colors[c]) v += kColorJitter * (2.0 * unit(rng) - 1.0);
  }
  Tensor<float> img({h, w, 3});
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      img[p * 3 + c] = static_cast<float>(
          std::clamp(colors[s.label[p]][c] + kPixelNoise * normal(rng), 0.0, 1.0));
  s.image = apply_domain_style(img, params.appearance);
  return s;
}

Tensor<float> apply_domain_style(const Tensor<float>& image, const AppearanceParams& a) {
  if (image.rank() != 3 || image.dim(2) != 3)
    throw ShapeError("apply_domain_style expects [H,W,3], got " + shape_str(image.shape()));
  const std::size_t h = image.dim(0), w = image.dim(1);
  std::vector<double> px(image.numel());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = image[i];

  if (a.palette_rotation != 0.0) {
    // Rodrigues rotation about (1,1,1)/sqrt(3), centred on mid-grey.
    const double c = std::cos(a.palette_rotation), s = std::sin(a.palette_rotation);
    const double k = 1.0 / std::sqrt(3.0), t = 1.0 - c;
    const double r[3][3] = {{c + t * k * k, t * k * k - s * k, t * k * k + s * k},
                            {t * k * k + s * k, c + t * k * k, t * k * k - s * k},
                            {t * k * k - s * k, t * k * k + s * k, c + t * k * k}};
    for (std::size_t p = 0; p < h * w; ++p) {
      const double v[3] = {px[p * 3] - 0.5, px[p * 3 + 1] - 0.5, px[p * 3 + 2] - 0.5};
      for (int i = 0; i < 3; ++i)
        px[p * 3 + i] = 0.5 + r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2];
    }
  }
  if (a.palette_rotation != 0.0 || a.brightness != 0.0)
    for (auto& v : px) v = std::clamp(v + a.brightness, 0.0, 1.0);
  if (a.blur_sigma > 0.0) blur_hwc(px, h, w, a.blur_sigma);
  if (a.texture_frequency > 0.0) {
    const double f = 2.0 * std::numbers::pi * a.texture_frequency;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double t = kTextureAmplitude * std::sin(f * static_cast<double>(x)) *
                         std::sin(f * static_cast<double>(y));
        for (std::size_t c = 0; c < 3; ++c)
          px[(y * w + x) * 3 + c] = std::clamp(px[(y * w + x) * 3 + c] + t, 0.0, 1.0);
      }
  }
  Tensor<float> out(image.shape());
  for (std::size_t i = 0; i < px.size(); ++i) out[i] = static_cast<float>(px[i]);
  return out;
}

AppearanceParams relative_appearance(const AppearanceParams& from, const AppearanceParams& to) {
  AppearanceParams d;
  d.palette_rotation = to.palette_rotation - from.palette_rotation;
  d.brightness = to.brightness - from.brightness;
  d.blur_sigma = std::sqrt(std::max(0.0, to.blur_sigma * to.blur_sigma -
                                             from.blur_sigma * from.blur_sigma));
  d.texture_frequency = from.texture_frequency > 0.0 ? 0.0 : to.texture_frequency;
  return d;
}

// ---------------------------------------------------------------------------

Tensor<float> hwc_to_chw(const Tensor<float>& image) {
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  Tensor<float> out({c, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) out[(k * h + y) * w + x] = image[(y * w + x) * c + k];
  return out;
}

Tensor<float> chw_to_hwc(const Tensor<float>& image) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor<float> out({h, w, c});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) out[(y * w + x) * c + k] = image[(k * h + y) * w + x];
  return out;
}

DomainDataset::DomainDataset(std::vector<Scene> source, std::vector<Scene> target,
                             std::size_t classes, ShiftParams source_params,
                             ShiftParams target_params, std::uint64_t seed)
    : source_(std::move(source)),
      target_(std::move(target)),
      classes_(classes),
      source_params_(std::move(source_params)),
      target_params_(std::move(target_params)),
      seed_(seed) {
  if (source_.empty() || target_.empty()) throw ConfigError("dataset needs both domains");
  const Shape img = source_[0].image.shape();
  for (const auto* dom : {&source_, &target_})
    for (const auto& s : *dom) {
      if (s.image.shape() != img || s.label.shape() != Shape{img[0], img[1]})
        throw ShapeError("dataset scenes must share one image size");
      for (auto v : s.label.data())
        if (v >= classes_) throw ConfigError("label value exceeds class count");
    }
}

std::size_t DomainDataset::height() const { return source_.at(0).image.dim(0); }
std::size_t DomainDataset::width() const { return source_.at(0).image.dim(1); }

TrainingData DomainDataset::training_view() const {
  TrainingData t;
  t.classes = classes_;
  t.height = height();
  t.width = width();
  for (const auto& s : source_) {
    t.source_images.push_back(hwc_to_chw(s.image));
    t.source_labels.push_back(s.label);
  }
  for (const auto& s : target_) t.target_images.push_back(hwc_to_chw(s.image));
  return t;
}

EvalSet DomainDataset::target_eval_set() const {
  EvalSet e;
  e.classes = classes_;
  for (const auto& s : target_) {
    e.images.push_back(hwc_to_chw(s.image));
    e.labels.push_back(s.label);
  }
  return e;
}

nlohmann::json DomainDataset::manifest() const {
  return {{"format", "segan-dataset-1"},
          {"classes", classes_},
          {"height", height()},
          {"width", width()},
          {"seed", seed_},
          {"source_seed", sub_seed(seed_, "source")},
          {"target_seed", sub_seed(seed_, "target")},
          {"n_source", source_.size()},
          {"n_target", target_.size()},
          {"source_params", to_json(source_params_)},
          {"target_params", to_json(target_params_)}};
}

namespace {
std::string scene_file(const char* stem, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%05zu.sgt", stem, i);
  return buf;
}
}  // namespace

void DomainDataset::save(const std::filesystem::path& dir) const {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "source", ec);
  fs::create_directories(dir / "target", ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  auto write_domain = [](const fs::path& d, const std::vector<Scene>& scenes) {
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      save_sgt(d / scene_file("img", i), scenes[i].image);
      save_sgt(d / scene_file("lab", i), scenes[i].label);
    }
  };
  write_domain(dir / "source", source_);
  write_domain(dir / "target", target_);
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write manifest in " + dir.string());
  os << manifest().dump(2) << '\n';
}

DomainDataset DomainDataset::load(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("no manifest.json in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt dataset manifest: " + std::string(e.what()));
  }
  auto read_domain = [](const fs::path& d, std::size_t n) {
    std::vector<Scene> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      out[i].image = expect_dtype<float>(load_sgt(d / scene_file("img", i)), "image");
      out[i].label = expect_dtype<std::uint8_t>(load_sgt(d / scene_file("lab", i)), "label");
    }
    return out;
  };
  const auto classes = m.at("classes").get<std::size_t>();
  auto src = read_domain(dir / "source", m.at("n_source").get<std::size_t>());
  auto tgt = read_domain(dir / "target", m.at("n_target").get<std::size_t>());
  for (auto* dom : {&src, &tgt})
    for (auto& s : *dom) {
      s.present.assign(classes, 0);
      for (auto v : s.label.data()) s.present.at(v) = 1;
    }
  return DomainDataset(std::move(src), std::move(tgt), classes,
                       shift_params_from_json(m.at("source_params")),
                       shift_params_from_json(m.at("target_params")), m.at("seed").get<std::uint64_t>());
}

std::vector<Scene> generate_domain(const ShiftParams& params, std::size_t count,
                                   std::uint64_t seed, std::size_t h, std::size_t w,
                                   std::size_t classes) {
  std::vector<Scene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(generate_scene(params, sub_seed(seed, static_cast<std::uint64_t>(i)), h, w, classes));
  return out;
}

DomainDataset generate_dataset(const ShiftParams& src_params, const ShiftParams& tgt_params,
                               std::size_t n_src, std::size_t n_tgt, std::uint64_t seed,
                               std::size_t h, std::size_t w, std::size_t classes) {
  if (n_src < 1 || n_tgt < 1) throw ConfigError("dataset counts must be at least 1");
  auto src = generate_domain(src_params, n_src, sub_seed(seed, "source"), h, w, classes);
  auto tgt = generate_domain(tgt_params, n_tgt, sub_seed(seed, "target"), h, w, classes);
  return DomainDataset(std::move(src), std::move(tgt), classes, src_params, tgt_params, seed);
}

// ---------------------------------------------------------------------------

std::vector<double> mean_color_histogram(const std::vector<Tensor<float>>& images) {
  if (images.empty()) throw ConfigError("colour histogram of an empty image set");
  std::vector<double> hist(3 * kHistogramBins, 0.0);
  for (const auto& img : images) {
    if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("colour histogram expects [3,H,W]");
    const std::size_t plane = img.dim(1) * img.dim(2);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = std::clamp(static_cast<double>(img[c * plane + p]), 0.0, 1.0);
        const auto bin = std::min(kHistogramBins - 1, static_cast<std::size_t>(v * kHistogramBins));
        hist[c * kHistogramBins + bin] += 1.0 / static_cast<double>(plane);
      }
  }
  for (auto& v : hist) v /= static_cast<double>(images.size());
  return hist;
}

std::vector<double> class_frequencies(const std::vector<LabelMap>& labels, std::size_t classes) {
  if (labels.empty()) throw ConfigError("class frequencies of an empty label set");
  std::vector<double> freq(classes, 0.0);
  double total = 0.0;
  for (const auto& l : labels)
    for (auto v : l.data()) {
      if (v >= classes) throw ConfigError("label value exceeds class count");
      freq[v] += 1.0;
      total += 1.0;
    }
  for (auto& f : freq) f /= total;
  return freq;
}

double histogram_distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("histogram length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw ShapeError("distribution length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

ShiftSeverity shift_severity(const DomainDataset& ds) {
  if (ds.source_count() == 0 || ds.target_count() == 0)
    throw ConfigError("shift_severity needs both domains");
  std::vector<Tensor<float>> src_img, tgt_img;
  std::vector<LabelMap> src_lab, tgt_lab;
  for (std::size_t i = 0; i < ds.source_count(); ++i) {
    src_img.push_back(hwc_to_chw(ds.source_image(i)));
    src_lab.push_back(ds.source_label(i));
  }
  for (std::size_t i = 0; i < ds.target_count(); ++i) {
    tgt_img.push_back(hwc_to_chw(ds.target_image(i)));
    tgt_lab.push_back(ds.target_label_for_evaluation(i));
  }
  ShiftSeverity s;
  s.appearance_gap = histogram_distance(mean_color_histogram(src_img), mean_color_histogram(tgt_img));
  s.layout_gap = total_variation(class_frequencies(src_lab, ds.classes()),
                                 class_frequencies(tgt_lab, ds.classes()));
  return s;
}

}  // namespace segan
