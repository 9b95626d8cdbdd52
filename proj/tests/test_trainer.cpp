#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include <unistd.h>

#include "segan/rng.hpp"
#include "segan/trainer.hpp"

using namespace segan;
namespace fs = std::filesystem;

namespace {

DomainDataset tiny_dataset(std::uint64_t seed = 3, std::size_t n = 6) {
  ShiftParams s, t;
  s.layout = default_layout(4);
  t.layout = default_layout(4);
  t.appearance = {0.9, -0.08, 1.0, 0.0};
  return generate_dataset(s, t, n, n, seed, 32, 32, 4);
}

TrainConfig tiny_config(AblationMode mode) {
  TrainConfig c;
  c.segnet.widths = {4, 4, 4};
  c.disc.widths = {4, 4, 4, 4, 1};
  c.maxiter = 6;
  c.st_maxiter = 4;
  c.eval_interval = 2;
  c.lr_student = 0.01;
  c.momentum = 0.9;
  c.lambda_adv = 0.01;
  c.alpha = 0.9;
  c.seed = 11;
  c.flags = mode_flags(mode);
  return c;
}

bool same_params(const ParamSet& a, const ParamSet& b) {
  if (!a.congruent(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i] == b[i])) return false;
  return true;
}

double max_abs_diff(const ParamSet& a, const ParamSet& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].numel(); ++k)
      m = std::max(m, std::abs(static_cast<double>(a[i][k]) - b[i][k]));
  return m;
}

ParamSet filled(const ParamSet& shape_of, float v) {
  ParamSet p = shape_of;
  for (std::size_t i = 0; i < p.size(); ++i) p[i].fill(v);
  return p;
}

}  // namespace

TEST_CASE("EMA hand values") {
  std::vector<double> t{0.0};
  const std::vector<double> s{1.0};
  const double expected[] = {0.5, 0.75, 0.875};
  for (double e : expected) {
    t = ema_update(t, s, 0.5);
    CHECK(t[0] == e);
  }
  CHECK(ema_update({3.0}, {7.0}, 1.0)[0] == 3.0);
  CHECK(ema_update({3.0}, {7.0}, 0.0)[0] == 7.0);
  CHECK_THROWS_AS(ema_update({1.0}, {1.0, 2.0}, 0.5), ShapeError);
}

TEST_CASE("EMA recursion matches the closed form") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  std::vector<double> t0(50), s(50);
  for (auto& v : t0) v = nd(rng);
  for (auto& v : s) v = nd(rng);
  for (double alpha : {0.0, 0.5, 0.999, 1.0}) {
    std::vector<double> t = t0;
    for (int i = 1; i <= 2000; ++i) {
      t = ema_update(t, s, alpha);
      if (i % 250 != 0 && i > 3) continue;
      const double ai = std::pow(alpha, i);
      for (std::size_t k = 0; k < t.size(); ++k) {
        const double closed = ai * t0[k] + (1.0 - ai) * s[k];
        CHECK(std::abs(t[k] - closed) <= 1e-6 * std::max(std::abs(closed), 1e-12));
      }
    }
  }
}

TEST_CASE("EMA on parameter sets") {
  SegNet net(tiny_config(AblationMode::kNoAdapt).segnet);
  const ParamSet student = net.init(1);
  const ParamSet t0 = net.init(2);
  ParamSet teacher = t0;
  // Single precision: each step rounds, so compare absolutely.
  for (int i = 0; i < 200; ++i) ema_update(teacher, student, 0.99);
  const double ai = std::pow(0.99, 200);
  for (std::size_t p = 0; p < teacher.size(); ++p)
    for (std::size_t k = 0; k < teacher[p].numel(); ++k) {
      const double closed = ai * t0[p][k] + (1.0 - ai) * student[p][k];
      CHECK(std::abs(teacher[p][k] - closed) <= 1e-5 * std::max(1.0, std::abs(closed)));
    }

  ParamSet frozen = t0;
  ema_update(frozen, student, 1.0);
  CHECK(same_params(frozen, t0));
  ema_update(frozen, student, 0.0);
  CHECK(same_params(frozen, student));

  CHECK_THROWS_AS(ema_update(frozen, ParamSet{}, 0.5), ShapeError);
  CHECK_THROWS_AS(ema_update(frozen, student, 1.5), ConfigError);
}

TEST_CASE("mode flags are cumulative") {
  CHECK(mode_name(parse_mode("full")) == "full");
  for (const char* m : {"noadapt", "at", "at-se", "at-se-aug", "full", "full-mst"})
    CHECK(mode_name(parse_mode(m)) == m);
  CHECK_THROWS_AS(parse_mode("bogus"), ConfigError);
  const AblationFlags none = mode_flags(AblationMode::kNoAdapt);
  CHECK_FALSE((none.at || none.se || none.aug || none.st || none.mst));
  const AblationFlags full = mode_flags(AblationMode::kST);
  CHECK((full.at && full.se && full.aug && full.st));
  CHECK_FALSE(full.mst);
  CHECK(mode_flags(AblationMode::kMST).mst);
}

TEST_CASE("config JSON round trip and validation") {
  TrainConfig c = tiny_config(AblationMode::kAT);
  c.lambda_con = 2.5;
  const TrainConfig back = train_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));

  nlohmann::json bad = to_json(c);
  bad["lamda_adv"] = 0.1;
  try {
    train_config_from_json(bad);
    FAIL("unknown key accepted");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("lamda_adv") != std::string::npos);
  }
  c.alpha = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config(AblationMode::kAT);
  c.disc.in_channels = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  TGSTNConfig g;
  CHECK(to_json(tgstn_config_from_json(to_json(g))) == to_json(g));
  g.disc.in_channels = 4;
  CHECK_THROWS_AS(g.validate(), ConfigError);
}

TEST_CASE("train log bookkeeping") {
  TrainLog log;
  log.append({2, 0.1, 0, 1, 0, 0, 0, 0.5});
  log.append({4, 0.1, 0, 1, 0, 0, 0, std::nullopt});
  log.append({6, 0.1, 0, 1, 0, 0, 0, 0.7});
  CHECK(log.eval_curve() == std::vector<double>{0.5, 0.7});
  CHECK_THROWS_AS(log.append({6, 0, 0, 0, 0, 0, 0, std::nullopt}), ConfigError);
}

TEST_CASE("noadapt trains without a discriminator or teacher signal") {
  const DomainDataset ds = tiny_dataset();
  const TrainConfig cfg = tiny_config(AblationMode::kNoAdapt);
  const EvalSet eval = ds.target_eval_set();
  const TrainOutcome out = train_segan(cfg, ds.training_view(), &eval, nullptr);
  CHECK_FALSE(out.bundle.disc.has_value());
  CHECK(out.bundle.disc_params.size() == 0);
  CHECK(out.bundle.eval_model == "student");
  REQUIRE(out.log.records.size() == 3);
  for (const auto& r : out.log.records) {
    CHECK(r.loss_con == 0.0);
    CHECK(r.loss_adv_g == 0.0);
    CHECK(r.lr_disc == 0.0);
    CHECK(r.miou_eval.has_value());
  }
  CHECK(out.log.records.back().iter == 6);
  // The student moved away from its initialisation.
  CHECK_FALSE(same_params(out.bundle.student, out.bundle.net.init(sub_seed(cfg.seed, "init"))));
}

TEST_CASE("identical seeds give bit-identical training") {
  const DomainDataset ds = tiny_dataset();
  TrainConfig cfg = tiny_config(AblationMode::kATSEAug);
  const StyleTransform style = oracle_style(ds.source_params().appearance, ds.target_params().appearance);
  const EvalSet eval = ds.target_eval_set();
  const TrainOutcome a = train_segan(cfg, ds.training_view(), &eval, &style);
  const TrainOutcome b = train_segan(cfg, ds.training_view(), &eval, &style);
  CHECK(same_params(a.bundle.student, b.bundle.student));
  CHECK(same_params(a.bundle.teacher, b.bundle.teacher));
  CHECK(same_params(a.bundle.disc_params, b.bundle.disc_params));
  REQUIRE(a.log.records.size() == b.log.records.size());
  for (std::size_t i = 0; i < a.log.records.size(); ++i) {
    CHECK(a.log.records[i].loss_seg == b.log.records[i].loss_seg);
    CHECK(a.log.records[i].loss_adv_d == b.log.records[i].loss_adv_d);
    CHECK(a.log.records[i].miou_eval == b.log.records[i].miou_eval);
  }
  cfg.seed = 12;
  const TrainOutcome c = train_segan(cfg, ds.training_view(), &eval, &style);
  CHECK_FALSE(same_params(a.bundle.student, c.bundle.student));
}

TEST_CASE("teacher follows the EMA extremes") {
  const DomainDataset ds = tiny_dataset();
  TrainConfig cfg = tiny_config(AblationMode::kATSE);
  cfg.alpha = 1.0;
  const TrainOutcome frozen = train_segan(cfg, ds.training_view(), nullptr, nullptr);
  CHECK(same_params(frozen.bundle.teacher, frozen.bundle.net.init(sub_seed(cfg.seed, "init"))));
  CHECK(frozen.bundle.eval_model == "teacher");

  cfg.alpha = 0.0;
  const TrainOutcome copy = train_segan(cfg, ds.training_view(), nullptr, nullptr);
  CHECK(same_params(copy.bundle.teacher, copy.bundle.student));
}

TEST_CASE("a zero adversarial weight leaves the student on the source-only path") {
  const DomainDataset ds = tiny_dataset();
  TrainConfig at = tiny_config(AblationMode::kAT);
  at.lambda_adv = 0.0;
  const TrainOutcome a = train_segan(at, ds.training_view(), nullptr, nullptr);
  const TrainOutcome n = train_segan(tiny_config(AblationMode::kNoAdapt), ds.training_view(), nullptr, nullptr);
  CHECK(max_abs_diff(a.bundle.student, n.bundle.student) < 1e-5);
  // The discriminator still trains.
  CHECK_FALSE(same_params(a.bundle.disc_params, a.bundle.disc_init));
}

TEST_CASE("training preconditions") {
  const DomainDataset ds = tiny_dataset();
  TrainingData data = ds.training_view();
  CHECK_THROWS_AS(train_segan(tiny_config(AblationMode::kATSEAug), data, nullptr, nullptr), ConfigError);
  TrainConfig wrong = tiny_config(AblationMode::kNoAdapt);
  wrong.segnet.classes = 3;
  wrong.disc.in_channels = 3;
  CHECK_THROWS_AS(train_segan(wrong, data, nullptr, nullptr), ConfigError);
  TrainingData no_target = data;
  no_target.target_images.clear();
  CHECK_THROWS_AS(train_segan(tiny_config(AblationMode::kAT), no_target, nullptr, nullptr), ConfigError);
  CHECK_NOTHROW(train_segan(tiny_config(AblationMode::kNoAdapt), no_target, nullptr, nullptr));

  TrainingData poisoned = data;
  poisoned.source_images[0].fill(std::numeric_limits<float>::quiet_NaN());
  TrainConfig one = tiny_config(AblationMode::kNoAdapt);
  one.batch_source = data.source_images.size();
  CHECK_THROWS_AS(train_segan(one, poisoned, nullptr, nullptr), NumericError);
}

TEST_CASE("pseudo labels") {
  const DomainDataset ds = tiny_dataset();
  const TrainingData data = ds.training_view();
  SegNet net(tiny_config(AblationMode::kST).segnet);

  // All-zero weights give uniform probabilities; ties resolve to class 0.
  const ParamSet zero = filled(net.init(0), 0.0f);
  const Tensor32 ties = generate_pseudo_labels(net, zero, data.target_images);
  CHECK(ties.shape() == Shape{6, 4, 32, 32});
  for (std::size_t n = 0; n < 6; ++n)
    for (std::size_t p = 0; p < 32 * 32; ++p) {
      CHECK(ties[(n * 4 + 0) * 1024 + p] == 1.0f);
      CHECK(ties[(n * 4 + 1) * 1024 + p] == 0.0f);
    }

  // One-hot of the argmax of the teacher's softmax.
  const ParamSet teacher = net.init(5);
  const Tensor32 pl = generate_pseudo_labels(net, teacher, data.target_images);
  std::vector<const Tensor32*> imgs;
  Tensor32 batch({6, 3, 32, 32});
  for (std::size_t i = 0; i < 6; ++i)
    std::copy(data.target_images[i].vec().begin(), data.target_images[i].vec().end(),
              batch.vec().begin() + i * 3 * 1024);
  CHECK(pl == one_hot(predict_segmentation(net, teacher, batch).labels, 4));
  for (std::size_t n = 0; n < 6; ++n)
    for (std::size_t p = 0; p < 1024; ++p) {
      float s = 0;
      for (std::size_t c = 0; c < 4; ++c) s += pl[(n * 4 + c) * 1024 + p];
      CHECK(s == 1.0f);
    }
  CHECK_THROWS_AS(generate_pseudo_labels(net, teacher, {}), ConfigError);
}

TEST_CASE("one-hot encoding") {
  LabelMap l({1, 2, 2}, std::vector<std::uint8_t>{0, 2, 1, 2});
  const Tensor32 h = one_hot(l, 3);
  CHECK(h.shape() == Shape{1, 3, 2, 2});
  CHECK(h.vec() == std::vector<float>{1, 0, 0, 0, 0, 0, 1, 0, 0, 1, 0, 1});
  CHECK(argmax_channels(h) == l);
  CHECK_THROWS_AS(one_hot(l, 2), ConfigError);
  CHECK_THROWS_AS(one_hot(LabelMap({2, 2}), 3), ShapeError);
}

TEST_CASE("self-training") {
  const DomainDataset ds = tiny_dataset();
  const TrainingData data = ds.training_view();
  const EvalSet eval = ds.target_eval_set();
  TrainConfig cfg = tiny_config(AblationMode::kATSE);
  TrainOutcome out = train_segan(cfg, data, &eval, nullptr);
  const Tensor32 pseudo = generate_pseudo_labels(out.bundle.net, out.bundle.teacher, data.target_images);

  // No iterations: nothing moves, but the student becomes the reported model.
  ModelBundle idle = out.bundle;
  TrainLog idle_log;
  TrainConfig none = cfg;
  none.st_maxiter = 0;
  self_train(none, idle, pseudo, data.target_images, idle_log, &eval, cfg.maxiter);
  CHECK(same_params(idle.student, out.bundle.student));
  CHECK(idle.eval_model == "student");
  CHECK(idle_log.records.empty());

  ModelBundle b = out.bundle;
  TrainLog log = out.log;
  self_train(cfg, b, pseudo, data.target_images, log, &eval, cfg.maxiter);
  CHECK(same_params(b.teacher, out.bundle.teacher));
  CHECK_FALSE(same_params(b.student, out.bundle.student));
  REQUIRE(log.records.size() == out.log.records.size() + 2);
  CHECK(log.records.back().iter == cfg.maxiter + cfg.st_maxiter);
  CHECK(log.records.back().loss_con == 0.0);
  CHECK(log.records.back().miou_eval.has_value());

  // Training on the student's own labels with a zero-loss target still runs.
  ModelBundle again = out.bundle;
  TrainLog log2 = out.log;
  self_train(cfg, again, pseudo, data.target_images, log2, &eval, cfg.maxiter);
  CHECK(same_params(again.student, b.student));

  CHECK_THROWS_AS(self_train(cfg, b, Tensor32({6, 3, 32, 32}), data.target_images, log, nullptr, 100),
                  ConfigError);
  CHECK_THROWS_AS(self_train(cfg, b, Tensor32{}, data.target_images, log, nullptr, 100), ConfigError);
}

TEST_CASE("model bundles round trip through checkpoints") {
  const DomainDataset ds = tiny_dataset();
  const TrainOutcome out = train_segan(tiny_config(AblationMode::kATSE), ds.training_view(), nullptr, nullptr);
  const fs::path dir = fs::temp_directory_path() / ("segan_trainer_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  out.bundle.save(dir / "m.sgck", {{"note", "x"}});
  const ModelBundle back = ModelBundle::load(dir / "m.sgck");
  CHECK(same_params(back.student, out.bundle.student));
  CHECK(same_params(back.teacher, out.bundle.teacher));
  CHECK(same_params(back.disc_params, out.bundle.disc_params));
  CHECK(same_params(back.disc_init, out.bundle.disc_init));
  CHECK(back.eval_model == "teacher");
  CHECK(load_checkpoint(dir / "m.sgck").manifest["note"] == "x");

  save_checkpoint(dir / "other.sgck", {{"format", "other"}}, {});
  CHECK_THROWS_AS(ModelBundle::load(dir / "other.sgck"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("oracle style applies the relative appearance per image") {
  const DomainDataset ds = tiny_dataset();
  const AppearanceParams& src = ds.source_params().appearance;
  const AppearanceParams& tgt = ds.target_params().appearance;
  const StyleTransform style = oracle_style(src, tgt);
  Tensor32 batch({2, 3, 32, 32});
  for (std::size_t i = 0; i < 2; ++i) {
    const Tensor32 chw = hwc_to_chw(ds.source_image(i));
    std::copy(chw.vec().begin(), chw.vec().end(), batch.vec().begin() + i * 3 * 1024);
  }
  const Tensor32 out = style(batch);
  for (std::size_t i = 0; i < 2; ++i) {
    const Tensor32 expected = hwc_to_chw(apply_domain_style(ds.source_image(i), relative_appearance(src, tgt)));
    for (std::size_t k = 0; k < expected.numel(); ++k) CHECK(out[i * 3 * 1024 + k] == expected[k]);
  }
}

TEST_CASE("ablation driver") {
  const DomainDataset ds = tiny_dataset();
  const StyleTransform style = oracle_style(ds.source_params().appearance, ds.target_params().appearance);
  TrainConfig cfg = tiny_config(AblationMode::kNoAdapt);
  cfg.maxiter = 30;
  cfg.st_maxiter = 6;
  cfg.eval_interval = 2;

  const AblationResult na = run_ablation(AblationMode::kNoAdapt, cfg, ds, nullptr);
  CHECK_FALSE(na.outcome.bundle.disc.has_value());
  REQUIRE(na.stability.has_value());
  CHECK(*na.stability == doctest::Approx(stability_index(na.outcome.log.eval_curve())));
  CHECK_THROWS_AS(run_ablation(AblationMode::kATSEAug, cfg, ds, nullptr), ConfigError);

  // The adversarial stage of the full pipeline is the AT+SE+Aug run.
  const AblationResult aug = run_ablation(AblationMode::kATSEAug, cfg, ds, &style);
  std::optional<MetricReport> stage;
  std::optional<ParamSet> stage_teacher;
  const AblationResult full = run_ablation(AblationMode::kST, cfg, ds, &style,
                                           [&](const ModelBundle& b, const MetricReport& r) {
                                             stage = r;
                                             stage_teacher = b.teacher;
                                           });
  REQUIRE(stage.has_value());
  CHECK(stage->miou == aug.report.miou);
  CHECK(same_params(*stage_teacher, aug.outcome.bundle.teacher));
  CHECK(full.outcome.bundle.eval_model == "student");
  CHECK(full.outcome.log.records.back().iter == cfg.maxiter + cfg.st_maxiter);
  CHECK(*full.stability == *aug.stability);

  // Multi-scale testing at the native scale alone reproduces the plain report.
  cfg.mst_scales = {1.0};
  const AblationResult mst = run_ablation(AblationMode::kMST, cfg, ds, &style);
  CHECK(mst.report.iou == full.report.iou);
}

TEST_CASE("style transfer network training") {
  const DomainDataset ds = tiny_dataset(4, 4);
  const TrainingData data = ds.training_view();
  SegNetSpec spec;
  spec.widths = {4, 4, 4};
  const SegModel phi = train_source_only(spec, data, 4, 0.01, 0.9, 5e-5, 2, 1);
  TGSTNConfig cfg;
  cfg.segnet = spec;
  cfg.generator.widths = {4, 4};
  cfg.disc.widths = {4, 4, 4, 4, 1};
  cfg.epochs = 2;
  CHECK_THROWS_AS(train_tgstn(cfg, data, phi, 1), ConfigError);

  const SegModel frozen = freeze(phi);
  const TGSTNResult a = train_tgstn(cfg, data, frozen, 1);
  CHECK(a.steps_per_epoch == 2);
  REQUIRE(a.log.size() == 4);
  for (const auto& r : a.log) {
    CHECK(std::isfinite(r.loss_style_g));
    CHECK(r.loss_sem >= 0.0);
    CHECK(r.loss_per >= 0.0);
  }
  const TGSTNResult b = train_tgstn(cfg, data, frozen, 1);
  CHECK(same_params(a.generator, b.generator));
  CHECK_FALSE(same_params(a.generator, a.net.init(sub_seed(1, "generator"))));

  // Zero epochs leave the identity generator in place.
  cfg.epochs = 0;
  const TGSTNResult idle = train_tgstn(cfg, data, frozen, 1);
  CHECK(idle.log.empty());
  Tensor32 batch({1, 3, 32, 32});
  const Tensor32 chw = hwc_to_chw(ds.source_image(0));
  std::copy(chw.vec().begin(), chw.vec().end(), batch.vec().begin());
  const StyleTransform g = generator_style(idle.net, idle.generator);
  const Tensor32 same = g(batch);
  for (std::size_t k = 0; k < batch.numel(); ++k) CHECK(same[k] == doctest::Approx(batch[k]).epsilon(1e-6));

  TrainingData empty = data;
  empty.target_images.clear();
  cfg.epochs = 1;
  CHECK_THROWS_AS(train_tgstn(cfg, empty, frozen, 1), ConfigError);
}
