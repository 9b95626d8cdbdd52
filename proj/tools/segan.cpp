// segan: data generation, TGSTN and SE-GAN training, evaluation, bounds, plot export.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "segan/bounds.hpp"
#include "segan/pipeline.hpp"
#include "segan/rng.hpp"

namespace fs = std::filesystem;
using namespace segan;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kNumeric = 3, kIo = 4 };

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* app, Common& c, bool need_config = false) {
  auto* opt = app->add_option("--config", c.config, "JSON configuration file");
  if (need_config) opt->required();
  app->add_option("--seed", c.seed, "Root seed for every random stream");
  app->add_option("--out", c.out, "Output directory")->required();
  app->add_flag("--force", c.force, "Overwrite a populated output directory");
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_manifest(const Common& c, const std::string& command, const nlohmann::json& config,
                    std::uint64_t seed, const nlohmann::json& inputs,
                    std::chrono::steady_clock::time_point t0) {
  RunManifest m{command, config, seed, inputs, c.out, elapsed(t0)};
  write_json_file(fs::path(c.out) / "run.json", m.to_json());
}

std::vector<double> parse_scales(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      out.push_back(std::stod(cell));
    } catch (const std::exception&) {
      throw ConfigError("--mst: cannot parse scale '" + cell + "'");
    }
  }
  if (out.empty()) throw ConfigError("--mst: no scales given");
  return out;
}

// --- gen-data ---------------------------------------------------------------

int cmd_gen_data(const Common& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const DatasetConfig cfg = c.config.empty() ? default_dataset_config()
                                             : dataset_config_from_json(read_json_file(c.config));
  prepare_output_dir(c.out, c.force);
  const DomainDataset ds = generate_from_config(cfg, c.seed);
  ds.save(c.out);
  const ShiftSeverity sev = shift_severity(ds);
  write_manifest(c, "gen-data", to_json(cfg), c.seed,
                 {{"appearance_gap", sev.appearance_gap}, {"layout_gap", sev.layout_gap}}, t0);
  std::printf("wrote %zu source + %zu target scenes to %s (appearance gap %.4f, layout gap %.4f)\n",
              ds.source_count(), ds.target_count(), c.out.c_str(), sev.appearance_gap,
              sev.layout_gap);
  return kOk;
}

// --- train-tgstn ------------------------------------------------------------

int cmd_train_tgstn(const Common& c, const std::string& data_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  TGSTNConfig cfg = c.config.empty() ? TGSTNConfig{} : tgstn_config_from_json(read_json_file(c.config));
  const DomainDataset ds = DomainDataset::load(data_dir);
  cfg.segnet.classes = ds.classes();
  if (c.seed_set) cfg.seed = c.seed;
  cfg.validate();
  prepare_output_dir(c.out, c.force);
  const TrainingData data = ds.training_view();
  const SegModel phi = freeze(train_source_only(cfg.segnet, data, cfg.phi_iters, cfg.phi_lr,
                                                cfg.phi_momentum, cfg.weight_decay,
                                                cfg.batch_source, sub_seed(cfg.seed, "phi")));
  const TGSTNResult res = train_tgstn(cfg, data, phi, cfg.seed);
  save_tgstn(fs::path(c.out) / "tgstn.sgck", res, phi, cfg);
  write_tgstn_log(fs::path(c.out) / "tgstn_log.csv", res.log);

  std::vector<Tensor<float>> transferred;
  for (const auto& img : data.source_images) transferred.push_back(res.net.apply(res.generator, [&] {
    Tensor<float> b = img;
    b.reshape({1, img.dim(0), img.dim(1), img.dim(2)});
    return b;
  }()));
  for (auto& t : transferred) t.reshape({t.dim(1), t.dim(2), t.dim(3)});
  const auto tgt_hist = mean_color_histogram(data.target_images);
  const double before = histogram_distance(mean_color_histogram(data.source_images), tgt_hist);
  const double after = histogram_distance(mean_color_histogram(transferred), tgt_hist);
  write_manifest(c, "train-tgstn", to_json(cfg), cfg.seed,
                 {{"data", data_dir}, {"appearance_gap_before", before},
                  {"appearance_gap_after", after}, {"steps", res.log.size()}},
                 t0);
  std::printf("TGSTN: %zu steps, appearance gap %.4f -> %.4f\n", res.log.size(), before, after);
  return kOk;
}

// --- train --------------------------------------------------------------------

int cmd_train(const Common& c, const std::string& mode_text, const std::string& data_dir,
              const std::string& tgstn, bool oracle) {
  const auto t0 = std::chrono::steady_clock::now();
  const AblationMode mode = parse_mode(mode_text);
  TrainConfig cfg = c.config.empty() ? TrainConfig{} : train_config_from_json(read_json_file(c.config));
  if (c.seed_set) cfg.seed = c.seed;
  if (!tgstn.empty() && oracle) throw ConfigError("--tgstn and --oracle-style are exclusive");
  const DomainDataset ds = DomainDataset::load(data_dir);
  cfg.segnet.classes = ds.classes();
  cfg.disc.in_channels = ds.classes();
  cfg.validate();

  std::optional<StyleTransform> style;
  if (!tgstn.empty()) style = load_style_generator(tgstn);
  if (oracle) style = oracle_style(ds.source_params().appearance, ds.target_params().appearance);
  if (mode_flags(mode).aug && !style)
    throw ConfigError("mode " + mode_text + " needs --tgstn <checkpoint> or --oracle-style");

  prepare_output_dir(c.out, c.force);
  const fs::path out(c.out);
  cfg.flags = mode_flags(mode);
  nlohmann::json inputs{{"mode", mode_name(mode)},
                        {"data", data_dir},
                        {"style", tgstn.empty() ? (oracle ? "oracle" : "none") : tgstn}};
  std::optional<AblationResult> run;
  try {
    run = run_ablation(mode, cfg, ds, style ? &*style : nullptr,
                       [&](const ModelBundle& b, const MetricReport& r) {
                         if (!mode_flags(mode).st) return;
                         b.save(out / "stage1.sgck", {{"mode", mode_name(mode)}, {"stage", 1}});
                         write_json_file(out / "stage1_report.json", to_json(r));
                       });
  } catch (const NumericAbort& e) {
    const fs::path diag = out / "abort.json";
    write_json_file(diag, {{"iteration", e.iteration()}, {"losses", e.breakdown()},
                           {"message", e.what()}});
    std::fprintf(stderr, "numeric abort at iteration %ld; diagnostics in %s\n", e.iteration(),
                 diag.c_str());
    return kNumeric;
  }
  const AblationResult& res = *run;
  const ModelBundle& b = res.outcome.bundle;
  b.save(out / "checkpoint.sgck", {{"mode", mode_name(mode)}, {"seed", cfg.seed}});
  res.outcome.log.write_csv(out / "train_log.csv");
  ReportExtras extras;
  extras.stability = res.stability;
  extras.info = {{"mode", mode_name(mode)}, {"eval_model", b.eval_model}};
  write_report(out, res.report, extras);
  write_manifest(c, "train", to_json(cfg), cfg.seed, inputs, t0);
  std::printf("%s: target mIoU %.4f", mode_name(mode).c_str(), res.report.miou);
  if (res.stability) std::printf(", stability %.4f", *res.stability);
  std::printf("\n");
  return kOk;
}

// --- eval ---------------------------------------------------------------------

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& data_dir,
             const std::string& mst, const std::string& model, const std::string& baseline) {
  const auto t0 = std::chrono::steady_clock::now();
  const ModelBundle b = ModelBundle::load(checkpoint);
  const DomainDataset ds = DomainDataset::load(data_dir);
  if (b.net.classes() != ds.classes())
    throw ConfigError("checkpoint has " + std::to_string(b.net.classes()) +
                      " classes, dataset has " + std::to_string(ds.classes()));
  const ParamSet* params = &b.eval_params();
  if (model == "student") params = &b.student;
  else if (model == "teacher") params = &b.teacher;
  else if (model != "auto") throw ConfigError("--model: expected auto, student or teacher");
  std::optional<std::vector<double>> scales;
  if (!mst.empty()) scales = parse_scales(mst);
  prepare_output_dir(c.out, c.force);
  const MetricReport r = evaluate(b.net, *params, ds.target_eval_set(), scales ? &*scales : nullptr);
  ReportExtras extras;
  if (!baseline.empty()) extras.gains = transfer_gain(r, metric_report_from_json(read_json_file(baseline)));
  extras.info = {{"checkpoint", checkpoint}, {"model", model}};
  write_report(c.out, r, extras);
  write_manifest(c, "eval", {{"mst", scales ? nlohmann::json(*scales) : nlohmann::json(nullptr)},
                             {"model", model}},
                 c.seed, {{"checkpoint", checkpoint}, {"data", data_dir}}, t0);
  std::printf("target mIoU %.4f over %llu pixels\n", r.miou,
              static_cast<unsigned long long>(r.pixels));
  return kOk;
}

// --- bounds -------------------------------------------------------------------

int cmd_bounds(const Common& c, const std::string& checkpoint, const std::string& data_dir,
               const std::string& policy, MeasureOptions opt) {
  const auto t0 = std::chrono::steady_clock::now();
  if (policy == "zero") opt.policy = ReferencePolicy::kZero;
  else if (policy == "init") opt.policy = ReferencePolicy::kInit;
  else throw ConfigError("--policy: expected zero or init");
  if (!(opt.delta > 0.0 && opt.delta <= 1.0)) throw ConfigError("--delta: must lie in (0,1]");
  if (!(opt.eps > 0.0)) throw ConfigError("--eps: must be > 0");
  if (opt.phi < 0.0) throw ConfigError("--phi: must be >= 0");

  const ModelBundle b = ModelBundle::load(checkpoint);
  if (!b.disc) throw ConfigError(checkpoint + ": checkpoint holds no discriminator");
  const Checkpoint ck = load_checkpoint(checkpoint);
  const DomainDataset ds = DomainDataset::load(data_dir);
  const EvalSet eval = ds.target_eval_set();
  Tensor<float> maps;
  {
    // Discriminator inputs: softmax maps of the reported segmenter on target images.
    const std::size_t n = eval.images.size(), C = b.net.classes();
    const std::size_t h = eval.images[0].dim(1), w = eval.images[0].dim(2);
    maps = Tensor<float>({n, C, h, w});
    for (std::size_t i = 0; i < n; ++i) {
      Tensor<float> img = eval.images[i];
      img.reshape({1, 3, h, w});
      const Tensor<float> p = predict_segmentation(b.net, b.eval_params(), img).probs;
      std::copy(p.vec().begin(), p.vec().end(), maps.vec().begin() + i * C * h * w);
    }
  }
  prepare_output_dir(c.out, c.force);
  const BoundSpec spec = measure_discriminator(ck, "disc/", "disc_init/", maps, opt);
  const BoundReport stmt = bound_report(spec, CoverVariant::kStatement);
  const BoundReport proof = bound_report(spec, CoverVariant::kProofFinalLine);
  write_json_file(fs::path(c.out) / "bounds.json",
                  {{"spec", to_json(spec)},
                   {"policy", policy},
                   {"statement", to_json(stmt)},
                   {"proof_final_line", to_json(proof)}});
  write_manifest(c, "bounds", {{"policy", policy}, {"eps", opt.eps}, {"delta", opt.delta},
                               {"phi", opt.phi}, {"tight_sigmoid", opt.tight_sigmoid}},
                 c.seed, {{"checkpoint", checkpoint}, {"data", data_dir}}, t0);
  std::printf("R %.6g, rademacher %.6g, gen_bound %.6g\n", stmt.cover.R, stmt.rademacher,
              stmt.gen_bound);
  return kOk;
}

// --- export-plots -------------------------------------------------------------

int cmd_export(const Common& c, const std::vector<std::string>& runs, const std::string& baseline) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<fs::path> dirs(runs.begin(), runs.end());
  for (const auto& d : dirs)
    if (!fs::exists(d / "train_log.csv")) throw IoError("missing logs in " + d.string());
  prepare_output_dir(c.out, c.force);
  std::optional<fs::path> base;
  if (!baseline.empty()) base = baseline;
  const ExportSummary s = export_plots(dirs, c.out, base);
  write_manifest(c, "export-plots", nlohmann::json::object(), c.seed, {{"runs", runs}}, t0);
  std::printf("exported %zu runs (%zu stability rows, %zu classes)\n", s.runs, s.stability_rows,
              s.gain_rows);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SE-GAN desk-scale toolkit"};
  app.require_subcommand(1);

  Common gen_c, tg_c, tr_c, ev_c, bd_c, ex_c;
  std::string tg_data, tr_data, tr_mode, tr_tgstn, ev_ckpt, ev_data, ev_mst, ev_model = "auto",
                                                                      ev_base, bd_ckpt, bd_data,
                                                                      bd_policy = "init", ex_base;
  bool tr_oracle = false;
  std::vector<std::string> ex_runs;
  MeasureOptions bd_opt;

  auto* gen = app.add_subcommand("gen-data", "Generate the two-domain synthetic benchmark");
  add_common(gen, gen_c);

  auto* tg = app.add_subcommand("train-tgstn", "Train the style transfer network");
  add_common(tg, tg_c);
  tg->add_option("--data", tg_data, "Dataset directory")->required();

  auto* tr = app.add_subcommand("train", "Train SE-GAN in an ablation mode");
  add_common(tr, tr_c);
  tr->add_option("--mode", tr_mode, "noadapt | at | at-se | at-se-aug | full | full-mst")->required();
  tr->add_option("--data", tr_data, "Dataset directory")->required();
  tr->add_option("--tgstn", tr_tgstn, "TGSTN checkpoint used by the Aug stage");
  tr->add_flag("--oracle-style", tr_oracle, "Use the dataset's own style transform for Aug");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the target labels");
  add_common(ev, ev_c);
  ev->add_option("--checkpoint", ev_ckpt, "Model checkpoint")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--mst", ev_mst, "Comma-separated test scales, e.g. 0.75,1,1.25");
  ev->add_option("--model", ev_model, "auto | student | teacher");
  ev->add_option("--baseline", ev_base, "report.json to compute per-class gains against");

  auto* bd = app.add_subcommand("bounds", "Covering and generalization bounds of the discriminator");
  add_common(bd, bd_c);
  bd->add_option("--checkpoint", bd_ckpt, "Model checkpoint with a discriminator")->required();
  bd->add_option("--data", bd_data, "Dataset directory")->required();
  bd->add_option("--policy", bd_policy, "Reference matrices: zero | init");
  bd->add_option("--eps", bd_opt.eps, "Cover radius");
  bd->add_option("--delta", bd_opt.delta, "Confidence level");
  bd->add_option("--phi", bd_opt.phi, "Optimisation slack");
  bd->add_flag("--tight-sigmoid", bd_opt.tight_sigmoid, "Use 1/4 as the sigmoid Lipschitz constant");

  auto* ex = app.add_subcommand("export-plots", "Collect run outputs into plot CSVs");
  add_common(ex, ex_c);
  ex->add_option("--runs", ex_runs, "Run directories")->required();
  ex->add_option("--baseline", ex_base, "Run directory used as the gain baseline");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  for (auto [sub, common] : {std::pair{gen, &gen_c}, {tg, &tg_c}, {tr, &tr_c}, {ev, &ev_c},
                             {bd, &bd_c}, {ex, &ex_c}})
    common->seed_set = sub->count("--seed") > 0;

  try {
    if (*gen) return cmd_gen_data(gen_c);
    if (*tg) return cmd_train_tgstn(tg_c, tg_data);
    if (*tr) return cmd_train(tr_c, tr_mode, tr_data, tr_tgstn, tr_oracle);
    if (*ev) return cmd_eval(ev_c, ev_ckpt, ev_data, ev_mst, ev_model, ev_base);
    if (*bd) return cmd_bounds(bd_c, bd_ckpt, bd_data, bd_policy, bd_opt);
    if (*ex) return cmd_export(ex_c, ex_runs, ex_base);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kNumeric;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kIo;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  }
  return kOk;
}
