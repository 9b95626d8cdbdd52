#include "segan/pipeline.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "segan/config.hpp"
#include "segan/error.hpp"
#include "segan/serialize.hpp"

namespace segan {

DatasetConfig default_dataset_config() {
  DatasetConfig c;
  c.source.layout = default_layout(c.classes);
  c.target.appearance = {0.9, -0.08, 1.0, 0.12};
  c.target.layout = default_layout(c.classes);
  for (auto& l : c.target.layout) {
    l.mean = {1.0 - l.mean[0], l.mean[1]};
    l.occurrence = 0.55;
  }
  return c;
}

namespace {

AppearanceParams read_appearance(const nlohmann::json& j, const std::string& path) {
  AppearanceParams a;
  StrictObject o(j, path);
  o.get("palette_rotation", a.palette_rotation);
  o.get("brightness", a.brightness);
  o.get("blur_sigma", a.blur_sigma);
  o.get("texture_frequency", a.texture_frequency);
  o.finish();
  return a;
}

ShiftParams read_shift(const nlohmann::json& j, const std::string& path, ShiftParams s) {
  StrictObject o(j, path);
  if (o.has("appearance")) s.appearance = read_appearance(o.sub("appearance"), path + ".appearance");
  if (o.has("layout")) {
    const auto& arr = o.sub("layout");
    if (!arr.is_array()) throw ConfigError(path + ".layout: expected an array");
    s.layout.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      ClassLayout l;
      StrictObject lo(arr[i], path + ".layout[" + std::to_string(i) + "]");
      lo.get("mean", l.mean);
      lo.get("cov", l.cov);
      lo.get("occurrence", l.occurrence);
      lo.get("size", l.size);
      lo.finish();
      s.layout.push_back(l);
    }
  }
  o.finish();
  return s;
}

}  // namespace

DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  DatasetConfig c = default_dataset_config();
  StrictObject o(j, "");
  o.get("height", c.height);
  o.get("width", c.width);
  o.get("classes", c.classes);
  o.get("n_source", c.n_source);
  o.get("n_target", c.n_target);
  if (c.classes < 2) throw ConfigError("classes: need at least 2, got " + std::to_string(c.classes));
  if (c.classes > 255) throw ConfigError("classes: at most 255");
  if (c.n_source < 1) throw ConfigError("n_source: must be >= 1");
  if (c.n_target < 1) throw ConfigError("n_target: must be >= 1");
  if (c.height < 32 || c.width < 32 || c.height % 4 || c.width % 4)
    throw ConfigError("height/width: must be multiples of 4 and at least 32");
  // A class count other than the default's needs matching layouts.
  if (c.classes != 4) {
    c.source.layout = default_layout(c.classes);
    c.target.layout = default_layout(c.classes);
  }
  if (o.has("source")) c.source = read_shift(o.sub("source"), "source", c.source);
  if (o.has("target")) c.target = read_shift(o.sub("target"), "target", c.target);
  o.finish();
  for (const auto* s : {&c.source, &c.target})
    if (s->layout.size() != c.classes - 1)
      throw ConfigError(std::string(s == &c.source ? "source" : "target") +
                        ".layout: expected " + std::to_string(c.classes - 1) + " entries");
  return c;
}

nlohmann::json to_json(const DatasetConfig& c) {
  return {{"height", c.height},     {"width", c.width},       {"classes", c.classes},
          {"n_source", c.n_source}, {"n_target", c.n_target}, {"source", to_json(c.source)},
          {"target", to_json(c.target)}};
}

DomainDataset generate_from_config(const DatasetConfig& c, std::uint64_t seed) {
  return generate_dataset(c.source, c.target, c.n_source, c.n_target, seed, c.height, c.width,
                          c.classes);
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string text = ss.str();
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n');
    throw ConfigError(path.string() + ":" + std::to_string(line) + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

void prepare_output_dir(const std::filesystem::path& dir, bool force) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    if (!fs::is_directory(dir, ec)) throw IoError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir, ec) && !force)
      throw IoError(dir.string() + " is not empty; pass --force to overwrite");
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

nlohmann::json RunManifest::to_json() const {
  return {{"command", command},
          {"config", config},
          {"seed", seed},
          {"inputs", inputs},
          {"output", output.string()},
          {"version", kArtifactVersion},
          {"duration_seconds", duration_seconds}};
}

void save_tgstn(const std::filesystem::path& path, const TGSTNResult& result, const SegModel& phi,
                const TGSTNConfig& cfg) {
  nlohmann::json m{{"format", "segan-tgstn-1"},
                   {"generator", to_json(result.net.spec())},
                   {"style_disc", to_json(result.disc.spec())},
                   {"segnet", to_json(phi.net.spec())},
                   {"config", to_json(cfg)}};
  std::vector<NamedTensor> tensors = result.generator.to_named("generator/");
  for (auto& t : result.disc_params.to_named("style_disc/")) tensors.push_back(std::move(t));
  for (auto& t : phi.params.to_named("phi/")) tensors.push_back(std::move(t));
  save_checkpoint(path, m, tensors);
}

StyleTransform load_style_generator(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.manifest.value("format", std::string()) != "segan-tgstn-1")
    throw IoError(path.string() + ": not a TGSTN checkpoint");
  StyleGenerator net(style_spec_from_json(ck.manifest.at("generator")));
  ParamSet params = ParamSet::from_checkpoint(ck, "generator/");
  if (!params.congruent(net.init(0)))
    throw IoError(path.string() + ": generator tensors do not match the recorded architecture");
  return generator_style(std::move(net), std::move(params));
}

TrainLog read_train_log(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("missing training log " + path.string());
  std::string line;
  std::getline(is, line);
  if (line.rfind("iter,", 0) != 0) throw IoError(path.string() + ": unexpected header");
  TrainLog log;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() == 7) cells.emplace_back();
    if (cells.size() != 8) throw IoError(path.string() + ": malformed row '" + line + "'");
    LogRecord r;
    r.iter = std::stol(cells[0]);
    r.lr_student = std::stod(cells[1]);
    r.lr_disc = std::stod(cells[2]);
    r.loss_seg = std::stod(cells[3]);
    r.loss_con = std::stod(cells[4]);
    r.loss_adv_g = std::stod(cells[5]);
    r.loss_adv_d = std::stod(cells[6]);
    if (!cells[7].empty()) r.miou_eval = std::stod(cells[7]);
    log.append(r);
  }
  return log;
}

ExportSummary export_plots(const std::vector<std::filesystem::path>& runs,
                           const std::filesystem::path& out,
                           const std::optional<std::filesystem::path>& baseline) {
  if (runs.empty()) throw ConfigError("export-plots: no run directories given");
  struct Run {
    std::string name;
    TrainLog log;
    MetricReport report;
    nlohmann::json report_json;
    std::string mode;
  };
  std::vector<Run> loaded;
  std::set<std::string> names;
  for (const auto& dir : runs) {
    Run r;
    r.log = read_train_log(dir / "train_log.csv");
    if (!std::filesystem::exists(dir / "report.json"))
      throw IoError("missing report.json in " + dir.string());
    r.report_json = read_json_file(dir / "report.json");
    r.report = metric_report_from_json(r.report_json);
    r.mode = "unknown";
    if (std::filesystem::exists(dir / "run.json")) {
      const auto run = read_json_file(dir / "run.json");
      if (run.contains("inputs") && run["inputs"].contains("mode"))
        r.mode = run["inputs"]["mode"].get<std::string>();
    }
    r.name = dir.filename().string();
    if (r.name.empty()) r.name = dir.parent_path().filename().string();
    std::string unique = r.name;
    for (int k = 2; names.count(unique); ++k) unique = r.name + "_" + std::to_string(k);
    r.name = unique;
    names.insert(r.name);
    loaded.push_back(std::move(r));
  }

  std::ofstream fig6(out / "fig6_stability.csv");
  if (!fig6) throw IoError("cannot write into " + out.string());
  fig6.precision(9);
  std::map<long, std::vector<std::optional<double>>> grid;
  for (std::size_t i = 0; i < loaded.size(); ++i)
    for (const auto& rec : loaded[i].log.records)
      if (rec.miou_eval) {
        auto& row = grid[rec.iter];
        row.resize(loaded.size());
        row[i] = rec.miou_eval;
      }
  fig6 << "iter";
  for (const auto& r : loaded) fig6 << ',' << r.name;
  fig6 << '\n';
  for (auto& [iter, row] : grid) {
    row.resize(loaded.size());
    fig6 << iter;
    for (const auto& v : row) {
      fig6 << ',';
      if (v) fig6 << *v;
    }
    fig6 << '\n';
  }

  std::ofstream table(out / "table3_ablation.csv");
  table.precision(17);
  table << "run,mode,miou,stability\n";
  for (const auto& r : loaded) {
    table << r.name << ',' << r.mode << ',' << r.report.miou << ',';
    if (r.report_json.contains("stability") && !r.report_json["stability"].is_null())
      table << r.report_json["stability"].get<double>();
    table << '\n';
  }

  // Gains relative to the explicit baseline, else the first noadapt run.
  std::optional<MetricReport> base;
  if (baseline) {
    base = metric_report_from_json(read_json_file(*baseline / "report.json"));
  } else {
    for (const auto& r : loaded)
      if (r.mode == "noadapt") {
        base = r.report;
        break;
      }
  }
  std::ofstream fig7(out / "fig7_gains.csv");
  fig7.precision(17);
  fig7 << "class";
  for (const auto& r : loaded) fig7 << ',' << r.name;
  fig7 << '\n';
  const std::size_t classes = loaded[0].report.classes;
  std::vector<TransferGain> gains;
  for (const auto& r : loaded) gains.push_back(base ? transfer_gain(r.report, *base)
                                                    : transfer_gain(r.report, r.report));
  for (std::size_t k = 0; k < classes; ++k) {
    fig7 << k;
    for (const auto& g : gains) fig7 << ',' << g.gains.at(k);
    fig7 << '\n';
  }
  return {loaded.size(), grid.size(), classes};
}

}  // namespace segan
