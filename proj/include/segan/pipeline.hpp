#pragma once

#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "segan/datagen.hpp"
#include "segan/trainer.hpp"

namespace segan {

struct DatasetConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t classes = 4;
  std::size_t n_source = 200;
  std::size_t n_target = 200;
  ShiftParams source;
  ShiftParams target;
};

// The desk-scale benchmark: 64x64, four classes, appearance and layout shift.
DatasetConfig default_dataset_config();
DatasetConfig dataset_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DatasetConfig& c);
DomainDataset generate_from_config(const DatasetConfig& c, std::uint64_t seed);

// Parses a JSON file; syntax errors become ConfigError with the line number.
nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

// Creates `dir`; a non-empty existing directory is an IoError unless `force`.
void prepare_output_dir(const std::filesystem::path& dir, bool force);

struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  nlohmann::json inputs = nlohmann::json::object();
  std::filesystem::path output;
  double duration_seconds = 0.0;
  nlohmann::json to_json() const;
};
inline constexpr const char* kArtifactVersion = "1.0.0";

// TGSTN checkpoint: generator, style discriminator and the frozen segmenter.
void save_tgstn(const std::filesystem::path& path, const TGSTNResult& result, const SegModel& phi,
                const TGSTNConfig& cfg);
StyleTransform load_style_generator(const std::filesystem::path& path);

// Parsed train_log.csv.
TrainLog read_train_log(const std::filesystem::path& path);

struct ExportSummary {
  std::size_t runs = 0;
  std::size_t stability_rows = 0;
  std::size_t gain_rows = 0;
};

// Writes fig6_stability.csv, table3_ablation.csv and fig7_gains.csv. Each run
// directory holds train_log.csv, report.json and run.json.
ExportSummary export_plots(const std::vector<std::filesystem::path>& runs,
                           const std::filesystem::path& out,
                           const std::optional<std::filesystem::path>& baseline);

}  // namespace segan
