#include "segan/metrics.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "segan/error.hpp"

namespace segan {

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw ShapeError("cannot merge confusion matrices of different size");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& gt, std::size_t classes) {
  if (classes < 1) throw ConfigError("confusion: need at least one class");
  if (pred.shape() != gt.shape())
    throw ShapeError("confusion: prediction " + shape_str(pred.shape()) + " vs ground truth " +
                     shape_str(gt.shape()));
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    if (pred[i] >= classes || gt[i] >= classes)
      throw ConfigError("confusion: label " + std::to_string(std::max(pred[i], gt[i])) +
                        " out of range for " + std::to_string(classes) + " classes");
    ++cm.at(gt[i], pred[i]);
  }
  return cm;
}

MetricReport iou_report(const ConfusionMatrix& cm,
                        const std::optional<std::vector<std::size_t>>& subset) {
  const std::size_t c = cm.classes();
  MetricReport r;
  r.classes = c;
  r.pixels = cm.total();
  r.iou.assign(c, 0.0);
  r.defined.assign(c, 0);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < c; ++k) {
    std::uint64_t tp = cm.at(k, k), fp = 0, fn = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (j == k) continue;
      fp += cm.at(j, k);
      fn += cm.at(k, j);
    }
    const std::uint64_t uni = tp + fp + fn;
    if (uni == 0) continue;
    r.defined[k] = 1;
    r.iou[k] = static_cast<double>(tp) / static_cast<double>(uni);
    sum += r.iou[k];
    ++n;
  }
  if (n == 0) throw ConfigError("iou_report: every class has an empty union");
  r.miou = sum / static_cast<double>(n);
  if (subset) {
    double s = 0.0;
    std::size_t m = 0;
    for (std::size_t k : *subset) {
      if (k >= c) throw ConfigError("iou_report: subset class " + std::to_string(k) + " out of range");
      if (!r.defined[k]) continue;
      s += r.iou[k];
      ++m;
    }
    r.subset = *subset;
    if (m > 0) r.miou_subset = s / static_cast<double>(m);
  }
  return r;
}

std::size_t stability_window(std::size_t points, double window_fraction) {
  if (!(window_fraction > 0.0 && window_fraction <= 1.0))
    throw ConfigError("stability window fraction must lie in (0,1]");
  return static_cast<std::size_t>(std::ceil(window_fraction * static_cast<double>(points) - 1e-9));
}

double stability_index(const std::vector<double>& eval_points, double window_fraction) {
  const std::size_t w = stability_window(eval_points.size(), window_fraction);
  if (w < 5)
    throw ConfigError("stability_index: " + std::to_string(w) +
                      " evaluation points in the window, need at least 5");
  const auto first = eval_points.end() - static_cast<std::ptrdiff_t>(w);
  double mean = 0.0;
  for (auto it = first; it != eval_points.end(); ++it) mean += *it;
  mean /= static_cast<double>(w);
  double var = 0.0;
  for (auto it = first; it != eval_points.end(); ++it) var += (*it - mean) * (*it - mean);
  return std::sqrt(var / static_cast<double>(w));
}

TransferGain transfer_gain(const MetricReport& adapted, const MetricReport& baseline) {
  if (adapted.classes != baseline.classes)
    throw ConfigError("transfer_gain: class count " + std::to_string(adapted.classes) + " vs " +
                      std::to_string(baseline.classes));
  TransferGain g;
  g.gains.assign(adapted.classes, 0.0);
  for (std::size_t k = 0; k < adapted.classes; ++k) {
    if (!adapted.defined.at(k) || !baseline.defined.at(k)) {
      g.excluded.push_back(k);
      continue;
    }
    g.gains[k] = adapted.iou[k] - baseline.iou[k];
    if (g.gains[k] < 0.0) g.negative.push_back(k);
  }
  return g;
}

nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json iou = nlohmann::json::array();
  for (std::size_t k = 0; k < r.classes; ++k)
    iou.push_back(r.defined[k] ? nlohmann::json(r.iou[k]) : nlohmann::json(nullptr));
  nlohmann::json j{{"classes", r.classes}, {"pixels", r.pixels}, {"iou", iou}, {"miou", r.miou}};
  j["subset"] = r.subset;
  j["miou_subset"] = r.miou_subset ? nlohmann::json(*r.miou_subset) : nlohmann::json(nullptr);
  return j;
}

MetricReport metric_report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.classes = j.at("classes").get<std::size_t>();
  r.pixels = j.at("pixels").get<std::uint64_t>();
  for (const auto& v : j.at("iou")) {
    r.defined.push_back(v.is_null() ? 0 : 1);
    r.iou.push_back(v.is_null() ? 0.0 : v.get<double>());
  }
  if (r.iou.size() != r.classes) throw ConfigError("report: iou length does not match classes");
  r.miou = j.at("miou").get<double>();
  if (j.contains("subset")) r.subset = j.at("subset").get<std::vector<std::size_t>>();
  if (j.contains("miou_subset") && !j.at("miou_subset").is_null())
    r.miou_subset = j.at("miou_subset").get<double>();
  return r;
}

nlohmann::json to_json(const TransferGain& g) {
  return {{"gains", g.gains}, {"negative_transfer", g.negative}, {"excluded", g.excluded}};
}

void write_report(const std::filesystem::path& dir, const MetricReport& r,
                  const ReportExtras& extras) {
  nlohmann::json j = to_json(r);
  j["stability"] = extras.stability ? nlohmann::json(*extras.stability) : nlohmann::json(nullptr);
  j["stability_definition"] = "population standard deviation of eval mIoU over the final third";
  j["gains"] = extras.gains ? to_json(*extras.gains) : nlohmann::json(nullptr);
  if (!extras.info.empty()) j["info"] = extras.info;
  {
    std::ofstream os(dir / "report.json");
    if (!os) throw IoError("cannot write " + (dir / "report.json").string());
    os << j.dump(2) << '\n';
  }
  std::ofstream os(dir / "report.csv");
  if (!os) throw IoError("cannot write " + (dir / "report.csv").string());
  os << "class,iou,defined,gain\n";
  os.precision(17);
  for (std::size_t k = 0; k < r.classes; ++k) {
    os << k << ',' << r.iou[k] << ',' << int(r.defined[k]) << ',';
    if (extras.gains) os << extras.gains->gains[k];
    os << '\n';
  }
}

}  // namespace segan
