#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "segan/tensor.hpp"

namespace segan {

/// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_.at(gt * classes_ + pred); }
  std::uint64_t& at(std::size_t gt, std::size_t pred) { return counts_.at(gt * classes_ + pred); }
  std::uint64_t total() const;
  void merge(const ConfusionMatrix& other);

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t classes_ = 0;
  std::vector<std::uint64_t> counts_;
};

ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& gt, std::size_t classes);

struct MetricReport {
  std::size_t classes = 0;
  std::uint64_t pixels = 0;
  std::vector<double> iou;         // 0 where undefined
  std::vector<std::uint8_t> defined;  // union non-empty
  double miou = 0.0;
  std::vector<std::size_t> subset;
  std::optional<double> miou_subset;
};

MetricReport iou_report(const ConfusionMatrix& cm,
                        const std::optional<std::vector<std::size_t>>& subset = std::nullopt);

// Population standard deviation of the final `window_fraction` of the points.
double stability_index(const std::vector<double>& eval_points, double window_fraction = 1.0 / 3.0);
std::size_t stability_window(std::size_t points, double window_fraction);

struct TransferGain {
  std::vector<double> gains;
  std::vector<std::size_t> negative;  // classes with gain < 0
  std::vector<std::size_t> excluded;  // undefined in either report
};

TransferGain transfer_gain(const MetricReport& adapted, const MetricReport& baseline);

nlohmann::json to_json(const MetricReport& r);
MetricReport metric_report_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TransferGain& g);

struct ReportExtras {
  std::optional<double> stability;
  std::optional<TransferGain> gains;
  nlohmann::json info = nlohmann::json::object();
};

void write_report(const std::filesystem::path& dir, const MetricReport& r,
                  const ReportExtras& extras = {});

}  // namespace segan
