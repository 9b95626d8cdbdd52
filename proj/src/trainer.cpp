#include "segan/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "segan/config.hpp"
#include "segan/losses.hpp"
#include "segan/optim.hpp"
#include "segan/rng.hpp"

namespace segan {

// ---------------------------------------------------------------------------
// Configuration

namespace {

void check(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

SegNetSpec read_segnet(const nlohmann::json& j, const std::string& path) {
  SegNetSpec s;
  StrictObject o(j, path);
  o.get("in_channels", s.in_channels);
  o.get("classes", s.classes);
  o.get("widths", s.widths);
  o.get("downsample", s.downsample);
  o.finish();
  check(s.classes >= 2, path + ".classes: need at least 2");
  return s;
}

DiscSpec read_disc(const nlohmann::json& j, const std::string& path, DiscSpec s) {
  StrictObject o(j, path);
  o.get("in_channels", s.in_channels);
  o.get("widths", s.widths);
  o.get("kernel", s.kernel);
  o.get("stride", s.stride);
  o.get("pad", s.pad);
  o.get("slope", s.slope);
  o.finish();
  return s;
}

StyleGenSpec read_generator(const nlohmann::json& j, const std::string& path) {
  StyleGenSpec s;
  StrictObject o(j, path);
  o.get("widths", s.widths);
  o.get("residual", s.residual);
  o.finish();
  return s;
}

}  // namespace

void TrainConfig::validate() const {
  check(alpha >= 0.0 && alpha <= 1.0, "alpha: must lie in [0,1]");
  check(lambda_con >= 0.0, "lambda_con: must be >= 0");
  check(lambda_adv >= 0.0, "lambda_adv: must be >= 0");
  check(maxiter >= 1, "maxiter: must be >= 1");
  check(st_maxiter >= 0, "st_maxiter: must be >= 0");
  check(lr_student > 0.0, "lr_student: must be > 0");
  check(lr_disc > 0.0, "lr_disc: must be > 0");
  check(momentum >= 0.0 && momentum < 1.0, "momentum: must lie in [0,1)");
  check(beta1 >= 0.0 && beta1 < 1.0, "beta1: must lie in [0,1)");
  check(beta2 >= 0.0 && beta2 < 1.0, "beta2: must lie in [0,1)");
  check(weight_decay >= 0.0, "weight_decay: must be >= 0");
  check(poly_power > 0.0, "poly_power: must be > 0");
  check(batch_source >= 1, "batch_source: must be >= 1");
  check(batch_target >= 1, "batch_target: must be >= 1");
  check(eval_interval >= 1, "eval_interval: must be >= 1");
  check(checkpoint_interval >= 0, "checkpoint_interval: must be >= 0");
  check(!mst_scales.empty(), "mst_scales: need at least one scale");
  for (double s : mst_scales) check(s > 0.0, "mst_scales: scales must be positive");
  check(segnet.classes >= 2, "segnet.classes: need at least 2");
  check(disc.in_channels == segnet.classes, "disc.in_channels: must equal segnet.classes");
}

void TGSTNConfig::validate() const {
  check(lambda_sem >= 0.0, "lambda_sem: must be >= 0");
  check(lambda_per >= 0.0, "lambda_per: must be >= 0");
  check(lr_g > 0.0, "lr_g: must be > 0");
  check(lr_d > 0.0, "lr_d: must be > 0");
  check(beta1 >= 0.0 && beta1 < 1.0, "beta1: must lie in [0,1)");
  check(beta2 >= 0.0 && beta2 < 1.0, "beta2: must lie in [0,1)");
  check(weight_decay >= 0.0, "weight_decay: must be >= 0");
  check(poly_power > 0.0, "poly_power: must be > 0");
  check(epochs >= 0, "epochs: must be >= 0");
  check(batch_source >= 1, "batch_source: must be >= 1");
  check(batch_target >= 1, "batch_target: must be >= 1");
  check(phi_iters >= 1, "phi_iters: must be >= 1");
  check(phi_lr > 0.0, "phi_lr: must be > 0");
  check(disc.in_channels == 3, "disc.in_channels: the style discriminator sees RGB images");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lambda_con", c.lambda_con},
          {"lambda_adv", c.lambda_adv},
          {"alpha", c.alpha},
          {"lr_student", c.lr_student},
          {"momentum", c.momentum},
          {"lr_disc", c.lr_disc},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"weight_decay", c.weight_decay},
          {"poly_power", c.poly_power},
          {"maxiter", c.maxiter},
          {"st_maxiter", c.st_maxiter},
          {"batch_source", c.batch_source},
          {"batch_target", c.batch_target},
          {"flags",
           {{"at", c.flags.at},
            {"se", c.flags.se},
            {"aug", c.flags.aug},
            {"st", c.flags.st},
            {"mst", c.flags.mst}}},
          {"adv_target_only", c.adv_target_only},
          {"seed", c.seed},
          {"eval_interval", c.eval_interval},
          {"checkpoint_interval", c.checkpoint_interval},
          {"eval_images", c.eval_images},
          {"mst_scales", c.mst_scales},
          {"segnet", to_json(c.segnet)},
          {"disc", to_json(c.disc)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  StrictObject o(j, "");
  o.get("lambda_con", c.lambda_con);
  o.get("lambda_adv", c.lambda_adv);
  o.get("alpha", c.alpha);
  o.get("lr_student", c.lr_student);
  o.get("momentum", c.momentum);
  o.get("lr_disc", c.lr_disc);
  o.get("beta1", c.beta1);
  o.get("beta2", c.beta2);
  o.get("weight_decay", c.weight_decay);
  o.get("poly_power", c.poly_power);
  o.get("maxiter", c.maxiter);
  o.get("st_maxiter", c.st_maxiter);
  o.get("batch_source", c.batch_source);
  o.get("batch_target", c.batch_target);
  o.get("adv_target_only", c.adv_target_only);
  o.get("seed", c.seed);
  o.get("eval_interval", c.eval_interval);
  o.get("checkpoint_interval", c.checkpoint_interval);
  o.get("eval_images", c.eval_images);
  o.get("mst_scales", c.mst_scales);
  if (o.has("flags")) {
    StrictObject f(o.sub("flags"), "flags");
    f.get("at", c.flags.at);
    f.get("se", c.flags.se);
    f.get("aug", c.flags.aug);
    f.get("st", c.flags.st);
    f.get("mst", c.flags.mst);
    f.finish();
  }
  if (o.has("segnet")) c.segnet = read_segnet(o.sub("segnet"), "segnet");
  c.disc.in_channels = c.segnet.classes;
  if (o.has("disc")) c.disc = read_disc(o.sub("disc"), "disc", c.disc);
  o.finish();
  c.validate();
  return c;
}

nlohmann::json to_json(const TGSTNConfig& c) {
  return {{"lambda_sem", c.lambda_sem},
          {"lambda_per", c.lambda_per},
          {"lr_g", c.lr_g},
          {"lr_d", c.lr_d},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"weight_decay", c.weight_decay},
          {"poly_power", c.poly_power},
          {"epochs", c.epochs},
          {"batch_source", c.batch_source},
          {"batch_target", c.batch_target},
          {"phi_iters", c.phi_iters},
          {"phi_lr", c.phi_lr},
          {"phi_momentum", c.phi_momentum},
          {"seed", c.seed},
          {"generator", to_json(c.generator)},
          {"disc", to_json(c.disc)},
          {"segnet", to_json(c.segnet)}};
}

TGSTNConfig tgstn_config_from_json(const nlohmann::json& j) {
  TGSTNConfig c;
  StrictObject o(j, "");
  o.get("lambda_sem", c.lambda_sem);
  o.get("lambda_per", c.lambda_per);
  o.get("lr_g", c.lr_g);
  o.get("lr_d", c.lr_d);
  o.get("beta1", c.beta1);
  o.get("beta2", c.beta2);
  o.get("weight_decay", c.weight_decay);
  o.get("poly_power", c.poly_power);
  o.get("epochs", c.epochs);
  o.get("batch_source", c.batch_source);
  o.get("batch_target", c.batch_target);
  o.get("phi_iters", c.phi_iters);
  o.get("phi_lr", c.phi_lr);
  o.get("phi_momentum", c.phi_momentum);
  o.get("seed", c.seed);
  if (o.has("generator")) c.generator = read_generator(o.sub("generator"), "generator");
  if (o.has("disc")) c.disc = read_disc(o.sub("disc"), "disc", c.disc);
  if (o.has("segnet")) c.segnet = read_segnet(o.sub("segnet"), "segnet");
  o.finish();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Logs

void TrainLog::append(const LogRecord& r) {
  if (!records.empty() && r.iter <= records.back().iter)
    throw ConfigError("train log iterations must be strictly increasing");
  records.push_back(r);
}

std::vector<double> TrainLog::eval_curve() const {
  std::vector<double> out;
  for (const auto& r : records)
    if (r.miou_eval) out.push_back(*r.miou_eval);
  return out;
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os.precision(9);
  os << "iter,lr_student,lr_disc,loss_seg,loss_con,loss_adv_g,loss_adv_d,miou_eval\n";
  for (const auto& r : records) {
    os << r.iter << ',' << r.lr_student << ',' << r.lr_disc << ',' << r.loss_seg << ','
       << r.loss_con << ',' << r.loss_adv_g << ',' << r.loss_adv_d << ',';
    if (r.miou_eval) os << *r.miou_eval;
    os << '\n';
  }
}

void write_tgstn_log(const std::filesystem::path& path, const std::vector<TGSTNLogRecord>& log) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os.precision(9);
  os << "step,loss_style_g,loss_style_d,loss_sem,loss_per\n";
  for (const auto& r : log)
    os << r.step << ',' << r.loss_style_g << ',' << r.loss_style_d << ',' << r.loss_sem << ','
       << r.loss_per << '\n';
}

NumericAbort::NumericAbort(long iteration, nlohmann::json breakdown)
    : NumericError("non-finite loss at iteration " + std::to_string(iteration) + ": " +
                   breakdown.dump()),
      iteration_(iteration),
      breakdown_(std::move(breakdown)) {}

// ---------------------------------------------------------------------------
// EMA and style transforms

void ema_update(ParamSet& teacher, const ParamSet& student, double alpha) {
  if (!teacher.congruent(student)) throw ShapeError("ema_update: parameter sets are not congruent");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("ema_update: alpha must lie in [0,1]");
  if (alpha == 1.0) return;
  const auto a = static_cast<float>(alpha), b = static_cast<float>(1.0 - alpha);
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    auto t = teacher[i].data();
    auto s = student[i].data();
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = a * t[k] + b * s[k];
  }
}

std::vector<double> ema_update(const std::vector<double>& teacher, const std::vector<double>& student,
                               double alpha) {
  if (teacher.size() != student.size()) throw ShapeError("ema_update: length mismatch");
  std::vector<double> out(teacher.size());
  for (std::size_t k = 0; k < out.size(); ++k)
    out[k] = alpha * teacher[k] + (1.0 - alpha) * student[k];
  return out;
}

StyleTransform oracle_style(const AppearanceParams& source, const AppearanceParams& target) {
  const AppearanceParams rel = relative_appearance(source, target);
  return [rel](const Tensor<float>& batch) {
    const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    const std::size_t per = c * h * w;
    Tensor<float> out(batch.shape());
    for (std::size_t b = 0; b < n; ++b) {
      Tensor<float> img({c, h, w}, std::vector<float>(batch.vec().begin() + b * per,
                                                      batch.vec().begin() + (b + 1) * per));
      const Tensor<float> styled = hwc_to_chw(apply_domain_style(chw_to_hwc(img), rel));
      std::copy(styled.vec().begin(), styled.vec().end(), out.vec().begin() + b * per);
    }
    return out;
  };
}

StyleTransform generator_style(StyleGenerator net, ParamSet params) {
  return [net = std::move(net), params = std::move(params)](const Tensor<float>& batch) {
    return net.apply(params, batch);
  };
}

// ---------------------------------------------------------------------------
// Shared helpers

namespace {

std::size_t image_size(const Tensor<float>& img) { return img.numel(); }

Tensor<float> stack(const std::vector<const Tensor<float>*>& images) {
  const Shape& s = images.at(0)->shape();
  Tensor<float> out({images.size(), s[0], s[1], s[2]});
  const std::size_t per = image_size(*images[0]);
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (images[b]->shape() != s) throw ShapeError("cannot batch images of different shapes");
    std::copy(images[b]->vec().begin(), images[b]->vec().end(), out.vec().begin() + b * per);
  }
  return out;
}

void write_one_hot(const LabelMap& labels, std::size_t classes, float* dst) {
  const std::size_t plane = labels.numel();
  std::fill(dst, dst + classes * plane, 0.0f);
  for (std::size_t p = 0; p < plane; ++p) {
    if (labels[p] >= classes) throw ConfigError("label value exceeds class count");
    dst[labels[p] * plane + p] = 1.0f;
  }
}

// Cycles through shuffled permutations of [0, n).
class Sampler {
 public:
  Sampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) {}
  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    while (out.size() < count) {
      if (pos_ == order_.size()) {
        order_.resize(n_);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::size_t n_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

std::vector<const Tensor<float>*> grads_of(const Executor<float>& ex, const ParamNodes& nodes) {
  std::vector<const Tensor<float>*> out;
  out.reserve(nodes.size());
  for (NodeId id : nodes) out.push_back(&ex.grad(id));
  return out;
}

double scalar(const Executor<float>& ex, NodeId id) { return static_cast<double>(ex.value(id)[0]); }

// Running means of the logged losses over one interval.
struct Accumulator {
  double seg = 0, con = 0, adv_g = 0, adv_d = 0;
  long count = 0;
  void reset() { *this = Accumulator{}; }
  double mean(double v) const { return count ? v / static_cast<double>(count) : 0.0; }
};

}  // namespace

Tensor<float> one_hot(const LabelMap& labels, std::size_t classes) {
  if (labels.rank() != 3) throw ShapeError("one_hot expects [N,H,W] labels");
  const std::size_t n = labels.dim(0), h = labels.dim(1), w = labels.dim(2);
  Tensor<float> out({n, classes, h, w});
  for (std::size_t b = 0; b < n; ++b) {
    LabelMap one({h, w}, std::vector<std::uint8_t>(labels.vec().begin() + b * h * w,
                                                   labels.vec().begin() + (b + 1) * h * w));
    write_one_hot(one, classes, out.vec().data() + b * classes * h * w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

MetricReport evaluate(const SegNet& net, const ParamSet& params, const EvalSet& eval,
                      const std::vector<double>* mst_scales, std::size_t max_images) {
  const std::size_t total =
      max_images == 0 ? eval.images.size() : std::min(max_images, eval.images.size());
  if (total == 0) throw ConfigError("evaluate: empty evaluation set");
  if (eval.classes != net.classes())
    throw ConfigError("evaluate: model has " + std::to_string(net.classes()) +
                      " classes, dataset has " + std::to_string(eval.classes));
  constexpr std::size_t kChunk = 25;
  ConfusionMatrix cm(eval.classes);
  for (std::size_t begin = 0; begin < total; begin += kChunk) {
    const std::size_t end = std::min(total, begin + kChunk);
    std::vector<const Tensor<float>*> imgs;
    for (std::size_t i = begin; i < end; ++i) imgs.push_back(&eval.images[i]);
    const Tensor<float> batch = stack(imgs);
    const LabelMap pred = mst_scales ? argmax_channels(multi_scale_predict(net, params, batch, *mst_scales))
                                     : predict_segmentation(net, params, batch).labels;
    const std::size_t plane = pred.dim(1) * pred.dim(2);
    for (std::size_t i = begin; i < end; ++i) {
      LabelMap p({pred.dim(1), pred.dim(2)},
                 std::vector<std::uint8_t>(pred.vec().begin() + (i - begin) * plane,
                                           pred.vec().begin() + (i - begin + 1) * plane));
      cm.merge(confusion(p, eval.labels[i], eval.classes));
    }
  }
  return iou_report(cm);
}

// ---------------------------------------------------------------------------
// Checkpoints

nlohmann::json ModelBundle::manifest() const {
  nlohmann::json m{{"format", "segan-model-1"},
                   {"segnet", to_json(net.spec())},
                   {"eval_model", eval_model},
                   {"has_disc", disc.has_value()}};
  if (disc) m["disc"] = to_json(disc->spec());
  return m;
}

void ModelBundle::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  nlohmann::json m = manifest();
  if (extra.is_object())
    for (const auto& item : extra.items()) m[item.key()] = item.value();
  std::vector<NamedTensor> tensors = student.to_named("student/");
  for (auto& t : teacher.to_named("teacher/")) tensors.push_back(std::move(t));
  if (disc) {
    for (auto& t : disc_params.to_named("disc/")) tensors.push_back(std::move(t));
    for (auto& t : disc_init.to_named("disc_init/")) tensors.push_back(std::move(t));
  }
  save_checkpoint(path, m, tensors);
}

ModelBundle ModelBundle::load(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (!ck.manifest.contains("segnet")) throw IoError(path.string() + ": not a segmenter checkpoint");
  ModelBundle b{SegNet(segnet_spec_from_json(ck.manifest.at("segnet"))), {}, {}, {}, {}, {}, "student"};
  b.student = ParamSet::from_checkpoint(ck, "student/");
  b.teacher = ParamSet::from_checkpoint(ck, "teacher/");
  const ParamSet reference = b.net.init(0);
  if (!b.student.congruent(reference) || !b.teacher.congruent(reference))
    throw IoError(path.string() + ": segmenter tensors do not match the recorded architecture");
  b.eval_model = ck.manifest.value("eval_model", std::string("student"));
  if (ck.manifest.value("has_disc", false)) {
    b.disc.emplace(disc_spec_from_json(ck.manifest.at("disc")));
    b.disc_params = ParamSet::from_checkpoint(ck, "disc/");
    b.disc_init = ParamSet::from_checkpoint(ck, "disc_init/");
  }
  return b;
}

// ---------------------------------------------------------------------------
// Adversarial stage

namespace {

struct StudentGraph {
  Graph g;
  NodeId x = 0, y = 0;
  std::optional<NodeId> teacher_probs;
  ParamNodes seg_p, disc_p;
  NodeId probs = 0;  // softmax of the whole batch
  NodeId seg = 0, total = 0;
  std::optional<NodeId> con, adv;
};

struct DiscGraph {
  Graph g;
  NodeId maps = 0;
  ParamNodes p;
  NodeId adv = 0, loss = 0;
};

struct BatchLayout {
  std::size_t src = 0, aug = 0, tgt = 0;
  std::size_t total() const { return src + aug + tgt; }
};

// Splits a [src | aug | tgt] batch node into its parts.
struct Parts {
  NodeId src;
  std::optional<NodeId> aug;
  NodeId tgt;
};

Parts split(Graph& g, NodeId x, const BatchLayout& b) {
  Parts p{g.slice(x, 0, b.src), std::nullopt, 0};
  if (b.aug) p.aug = g.slice(x, b.src, b.src + b.aug);
  if (b.tgt) p.tgt = g.slice(x, b.src + b.aug, b.total());
  return p;
}

}  // namespace

TrainOutcome train_segan(const TrainConfig& cfg, const TrainingData& data, const EvalSet* eval,
                         const StyleTransform* style, const CheckpointHook& hook) {
  cfg.validate();
  const AblationFlags& f = cfg.flags;
  if (data.source_images.empty()) throw ConfigError("train_segan: no source images");
  if (data.classes != cfg.segnet.classes)
    throw ConfigError("train_segan: dataset has " + std::to_string(data.classes) +
                      " classes, config has " + std::to_string(cfg.segnet.classes));
  const bool use_target = f.at || f.se;
  if (use_target && data.target_images.empty()) throw ConfigError("train_segan: no target images");
  if (f.aug && !style) throw ConfigError("train_segan: the Aug flag needs a style transform");

  const std::size_t C = cfg.segnet.classes, H = data.height, W = data.width;
  const BatchLayout layout{cfg.batch_source, f.aug ? cfg.batch_source : 0,
                           use_target ? cfg.batch_target : 0};

  SegNet net(cfg.segnet);
  ModelBundle bundle{net, net.init(sub_seed(cfg.seed, "init")), {}, {}, {}, {},
                     f.se ? "teacher" : "student"};
  bundle.teacher = bundle.student;
  if (f.at) {
    bundle.disc.emplace(cfg.disc);
    bundle.disc_params = bundle.disc->init(sub_seed(cfg.seed, "disc"));
    bundle.disc_init = bundle.disc_params;
  }

  // Style-transferred copies of every source image, computed once.
  std::vector<Tensor<float>> aug_images;
  if (f.aug) {
    for (const auto& img : data.source_images) {
      Tensor<float> out = (*style)(stack({&img}));
      out.reshape(img.shape());
      aug_images.push_back(std::move(out));
    }
  }

  // Student graph.
  StudentGraph sg;
  sg.x = sg.g.leaf("x", {layout.total(), 3, H, W});
  sg.y = sg.g.leaf("y_src", {layout.src, C, H, W});
  sg.seg_p = net.declare(sg.g, "student/", true);
  const NodeId logits = net.build(sg.g, sg.x, sg.seg_p).logits;
  const Parts lp = split(sg.g, logits, layout);
  sg.seg = loss::seg_loss(sg.g, lp.src, lp.aug, sg.y);
  sg.probs = sg.g.softmax(logits);
  if (f.se) {
    sg.teacher_probs = sg.g.leaf("teacher_probs", {layout.tgt, C, H, W});
    const NodeId student_t = split(sg.g, sg.probs, layout).tgt;
    sg.con = loss::consistency_loss(sg.g, student_t, *sg.teacher_probs);
  }
  if (f.at) {
    sg.disc_p = bundle.disc->declare(sg.g, "disc/", false);
    const Parts dp = split(sg.g, bundle.disc->build(sg.g, sg.probs, sg.disc_p), layout);
    sg.adv = cfg.adv_target_only ? loss::adversarial_target_term(sg.g, dp.tgt)
                                 : loss::adversarial_loss(sg.g, dp.src, dp.aug, dp.tgt);
  }
  loss::LossWeights weights;
  weights.con = cfg.lambda_con;
  weights.adv = cfg.lambda_adv;
  sg.total = loss::segan_objective(sg.g, weights, sg.seg, sg.con, sg.adv);
  Executor<float> student_ex(sg.g);

  // Discriminator graph on detached maps; descent on -L_adv.
  std::optional<DiscGraph> dg;
  std::optional<Executor<float>> disc_ex;
  if (f.at) {
    dg.emplace();
    dg->maps = dg->g.leaf("maps", {layout.total(), C, H, W});
    dg->p = bundle.disc->declare(dg->g, "disc/", true);
    const Parts dp = split(dg->g, bundle.disc->build(dg->g, dg->maps, dg->p), layout);
    dg->adv = loss::adversarial_loss(dg->g, dp.src, dp.aug, dp.tgt);
    dg->loss = dg->g.scale(dg->adv, -1.0);
    disc_ex.emplace(dg->g);
  }

  // Teacher forward for the consistency target.
  Graph tg;
  NodeId t_x = 0, t_probs = 0;
  ParamNodes t_p;
  std::optional<Executor<float>> teacher_ex;
  if (f.se) {
    t_x = tg.leaf("x_tgt", {layout.tgt, 3, H, W});
    t_p = net.declare(tg, "teacher/", false);
    t_probs = tg.softmax(net.build(tg, t_x, t_p).logits);
    teacher_ex.emplace(tg);
  }

  OptimizerState opt_s = OptimizerState::sgd(cfg.lr_student, cfg.weight_decay, cfg.momentum);
  OptimizerState opt_d =
      OptimizerState::adam(cfg.lr_disc, cfg.weight_decay, cfg.beta1, cfg.beta2);
  const PolySchedule sched_s{cfg.lr_student, cfg.poly_power, cfg.maxiter};
  const PolySchedule sched_d{cfg.lr_disc, cfg.poly_power, cfg.maxiter};

  Sampler src_sampler(data.source_images.size(), sub_seed(cfg.seed, "batch-source"));
  Sampler tgt_sampler(std::max<std::size_t>(data.target_images.size(), 1),
                      sub_seed(cfg.seed, "batch-target"));

  Tensor<float> x({layout.total(), 3, H, W});
  Tensor<float> y({layout.src, C, H, W});
  const std::size_t img_sz = 3 * H * W, lab_sz = C * H * W;
  TrainLog log;
  Accumulator acc;

  long it = 0;
  try {
    for (; it < cfg.maxiter; ++it) {
      const auto si = src_sampler.next(layout.src);
      for (std::size_t b = 0; b < layout.src; ++b) {
        const auto& img = data.source_images.at(si[b]);
        std::copy(img.vec().begin(), img.vec().end(), x.vec().begin() + b * img_sz);
        write_one_hot(data.source_labels.at(si[b]), C, y.vec().data() + b * lab_sz);
        if (layout.aug) {
          const auto& a = aug_images[si[b]];
          std::copy(a.vec().begin(), a.vec().end(), x.vec().begin() + (layout.src + b) * img_sz);
        }
      }
      if (layout.tgt) {
        const auto ti = tgt_sampler.next(layout.tgt);
        for (std::size_t b = 0; b < layout.tgt; ++b) {
          const auto& img = data.target_images.at(ti[b]);
          std::copy(img.vec().begin(), img.vec().end(),
                    x.vec().begin() + (layout.src + layout.aug + b) * img_sz);
        }
      }

      student_ex.feed(sg.x, x);
      student_ex.feed(sg.y, y);
      feed_params(student_ex, sg.seg_p, bundle.student);
      if (f.se) {
        teacher_ex->feed(t_x, std::span<const float>(x.vec().data() + (layout.src + layout.aug) * img_sz,
                                                     layout.tgt * img_sz));
        feed_params(*teacher_ex, t_p, bundle.teacher);
        teacher_ex->forward();
        student_ex.feed(*sg.teacher_probs, teacher_ex->value(t_probs));
      }
      if (f.at) feed_params(student_ex, sg.disc_p, bundle.disc_params);
      student_ex.forward();

      const double l_seg = scalar(student_ex, sg.seg);
      const double l_con = sg.con ? scalar(student_ex, *sg.con) : 0.0;
      const double l_adv = sg.adv ? scalar(student_ex, *sg.adv) : 0.0;
      const double l_total = scalar(student_ex, sg.total);
      if (!std::isfinite(l_total))
        throw NumericAbort(it, {{"loss_seg", l_seg}, {"loss_con", l_con}, {"loss_adv_g", l_adv},
                                {"loss_total", l_total}});

      const double lr_s = poly_lr(sched_s, it);
      const double lr_d = poly_lr(sched_d, it);
      student_ex.backward(sg.total);
      optimizer_step(opt_s, bundle.student.pointers(), grads_of(student_ex, sg.seg_p), lr_s);

      double l_adv_d = 0.0;
      if (f.at) {
        disc_ex->feed(dg->maps, student_ex.value(sg.probs));
        feed_params(*disc_ex, dg->p, bundle.disc_params);
        disc_ex->forward();
        l_adv_d = scalar(*disc_ex, dg->loss);
        if (!std::isfinite(l_adv_d))
          throw NumericAbort(it, {{"loss_seg", l_seg}, {"loss_con", l_con}, {"loss_adv_g", l_adv},
                                  {"loss_adv_d", l_adv_d}});
        disc_ex->backward(dg->loss);
        optimizer_step(opt_d, bundle.disc_params.pointers(), grads_of(*disc_ex, dg->p), lr_d);
      }

      ema_update(bundle.teacher, bundle.student, cfg.alpha);

      acc.seg += l_seg;
      acc.con += l_con;
      acc.adv_g += l_adv;
      acc.adv_d += l_adv_d;
      ++acc.count;
      const long done = it + 1;
      if (done % cfg.eval_interval == 0 || done == cfg.maxiter) {
        LogRecord r{done, lr_s, f.at ? lr_d : 0.0, acc.mean(acc.seg), acc.mean(acc.con),
                    acc.mean(acc.adv_g), acc.mean(acc.adv_d), std::nullopt};
        if (eval) r.miou_eval = evaluate(net, bundle.eval_params(), *eval, nullptr, cfg.eval_images).miou;
        log.append(r);
        acc.reset();
      }
      if (hook && cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0) hook(done, bundle);
    }
  } catch (const NumericAbort&) {
    throw;
  } catch (const NumericError& e) {
    throw NumericAbort(it, {{"error", e.what()}});
  }
  return {std::move(bundle), std::move(log)};
}

// ---------------------------------------------------------------------------
// Self-training

Tensor<float> generate_pseudo_labels(const SegNet& net, const ParamSet& teacher,
                                     const std::vector<Tensor<float>>& target_images) {
  if (target_images.empty()) throw ConfigError("generate_pseudo_labels: no target images");
  const std::size_t C = net.classes(), H = target_images[0].dim(1), W = target_images[0].dim(2);
  Tensor<float> out({target_images.size(), C, H, W});
  constexpr std::size_t kChunk = 25;
  for (std::size_t begin = 0; begin < target_images.size(); begin += kChunk) {
    const std::size_t end = std::min(target_images.size(), begin + kChunk);
    std::vector<const Tensor<float>*> imgs;
    for (std::size_t i = begin; i < end; ++i) imgs.push_back(&target_images[i]);
    const LabelMap labels = predict_segmentation(net, teacher, stack(imgs)).labels;
    const Tensor<float> hot = one_hot(labels, C);
    std::copy(hot.vec().begin(), hot.vec().end(), out.vec().begin() + begin * C * H * W);
  }
  return out;
}

void self_train(const TrainConfig& cfg, ModelBundle& bundle, const Tensor<float>& pseudo_labels,
                const std::vector<Tensor<float>>& target_images, TrainLog& log,
                const EvalSet* eval, long iter_offset) {
  cfg.validate();
  if (pseudo_labels.empty()) throw ConfigError("self_train: missing pseudo labels");
  if (target_images.empty()) throw ConfigError("self_train: no target images");
  const std::size_t C = bundle.net.classes(), H = target_images[0].dim(1),
                    W = target_images[0].dim(2), n = target_images.size();
  if (pseudo_labels.shape() != Shape{n, C, H, W})
    throw ConfigError("self_train: pseudo labels " + shape_str(pseudo_labels.shape()) +
                      " do not cover the target images");
  bundle.eval_model = "student";
  if (cfg.st_maxiter == 0) return;

  const std::size_t bt = cfg.batch_target;
  Graph g;
  const NodeId x = g.leaf("x_tgt", {bt, 3, H, W});
  const NodeId y = g.leaf("pseudo", {bt, C, H, W});
  const ParamNodes p = bundle.net.declare(g, "student/", true);
  const NodeId loss = loss::self_train_loss(g, bundle.net.build(g, x, p).logits, y);
  Executor<float> ex(g);

  OptimizerState opt = OptimizerState::sgd(cfg.lr_student, cfg.weight_decay, cfg.momentum);
  const PolySchedule sched{cfg.lr_student, cfg.poly_power, cfg.st_maxiter};
  Sampler sampler(n, sub_seed(cfg.seed, "batch-self-train"));
  Tensor<float> xb({bt, 3, H, W}), yb({bt, C, H, W});
  const std::size_t img_sz = 3 * H * W, lab_sz = C * H * W;
  Accumulator acc;
  long it = 0;
  try {
    for (; it < cfg.st_maxiter; ++it) {
      const auto idx = sampler.next(bt);
      for (std::size_t b = 0; b < bt; ++b) {
        const auto& img = target_images[idx[b]];
        std::copy(img.vec().begin(), img.vec().end(), xb.vec().begin() + b * img_sz);
        std::copy(pseudo_labels.vec().begin() + idx[b] * lab_sz,
                  pseudo_labels.vec().begin() + (idx[b] + 1) * lab_sz, yb.vec().begin() + b * lab_sz);
      }
      ex.feed(x, xb);
      ex.feed(y, yb);
      feed_params(ex, p, bundle.student);
      ex.forward();
      const double l = scalar(ex, loss);
      if (!std::isfinite(l)) throw NumericAbort(iter_offset + it, {{"loss_self_train", l}});
      const double lr = poly_lr(sched, it);
      ex.backward(loss);
      optimizer_step(opt, bundle.student.pointers(), grads_of(ex, p), lr);

      acc.seg += l;
      ++acc.count;
      const long done = it + 1;
      if (done % cfg.eval_interval == 0 || done == cfg.st_maxiter) {
        LogRecord r{iter_offset + done, lr, 0.0, acc.mean(acc.seg), 0.0, 0.0, 0.0, std::nullopt};
        if (eval) r.miou_eval = evaluate(bundle.net, bundle.student, *eval, nullptr, cfg.eval_images).miou;
        log.append(r);
        acc.reset();
      }
    }
  } catch (const NumericAbort&) {
    throw;
  } catch (const NumericError& e) {
    throw NumericAbort(iter_offset + it, {{"error", e.what()}});
  }
}

// ---------------------------------------------------------------------------
// Style transfer network

SegModel train_source_only(const SegNetSpec& spec, const TrainingData& data, long iters, double lr,
                           double momentum, double weight_decay, std::size_t batch,
                           std::uint64_t seed) {
  TrainConfig cfg;
  cfg.segnet = spec;
  cfg.disc.in_channels = spec.classes;
  cfg.lr_student = lr;
  cfg.momentum = momentum;
  cfg.weight_decay = weight_decay;
  cfg.maxiter = iters;
  cfg.batch_source = batch;
  cfg.seed = seed;
  cfg.eval_interval = iters;
  TrainOutcome out = train_segan(cfg, data, nullptr, nullptr);
  return {out.bundle.net, std::move(out.bundle.student), false};
}

SegModel freeze(SegModel model) {
  model.frozen = true;
  return model;
}

TGSTNResult train_tgstn(const TGSTNConfig& cfg, const TrainingData& data, const SegModel& phi,
                        std::uint64_t seed) {
  cfg.validate();
  if (!phi.frozen) throw ConfigError("train_tgstn: the segmenter must be pre-trained and frozen");
  if (phi.net.classes() != data.classes)
    throw ConfigError("train_tgstn: segmenter and dataset disagree on the class count");
  if (data.source_images.empty() || data.target_images.empty())
    throw ConfigError("train_tgstn: both domains are required");

  const std::size_t C = data.classes, H = data.height, W = data.width;
  const std::size_t bs = cfg.batch_source, bt = cfg.batch_target;
  TGSTNResult res{StyleGenerator(cfg.generator), {}, Discriminator(cfg.disc), {}, {}, 0};
  res.generator = res.net.init(sub_seed(seed, "generator"));
  res.disc_params = res.disc.init(sub_seed(seed, "style-disc"));
  res.steps_per_epoch = static_cast<long>((data.source_images.size() + bs - 1) / bs);
  const long steps = cfg.epochs * res.steps_per_epoch;
  if (steps == 0) return res;

  // Generator graph: L_style + lambda_sem L_sem + lambda_per L_per.
  Graph gg;
  const NodeId xs = gg.leaf("x_src", {bs, 3, H, W});
  const NodeId xt = gg.leaf("x_tgt", {bt, 3, H, W});
  const NodeId ys = gg.leaf("y_src", {bs, C, H, W});
  const ParamNodes gp = res.net.declare(gg, "generator/", true);
  const NodeId gx = res.net.build(gg, xs, gp);
  const ParamNodes phi_p = phi.net.declare(gg, "phi/", false);
  const SegNet::Taps phi_taps = phi.net.build(gg, gx, phi_p);
  const Shape feat_shape = gg.node(phi_taps.features).shape;
  const NodeId feat_src = gg.leaf("phi_features_src", feat_shape);
  const ParamNodes dp_const = res.disc.declare(gg, "disc/", false);
  const NodeId d_all = res.disc.build(gg, gg.concat({xt, xs, gx}, 0), dp_const);
  const NodeId d_t = gg.slice(d_all, 0, bt), d_s = gg.slice(d_all, bt, bt + bs),
               d_g = gg.slice(d_all, bt + bs, bt + 2 * bs);
  const NodeId style = loss::style_loss(gg, d_t, d_s, d_g);
  const NodeId sem = loss::semantic_consistency_loss(gg, phi_taps.logits, ys);
  const NodeId per = loss::perceptual_loss(gg, phi_taps.features, feat_src);
  loss::LossWeights w;
  w.sem = cfg.lambda_sem;
  w.per = cfg.lambda_per;
  const NodeId total = loss::tgstn_objective(gg, w, style, sem, per);
  Executor<float> g_ex(gg);

  // Frozen segmenter features of the untransferred source batch.
  Graph fg;
  const NodeId f_x = fg.leaf("x_src", {bs, 3, H, W});
  const ParamNodes f_p = phi.net.declare(fg, "phi/", false);
  const NodeId f_out = phi.net.build(fg, f_x, f_p).features;
  Executor<float> f_ex(fg);

  // Style discriminator graph: descent on -L_style.
  Graph dg;
  const NodeId d_in = dg.leaf("images", {bt + 2 * bs, 3, H, W});
  const ParamNodes dp = res.disc.declare(dg, "disc/", true);
  const NodeId d_out = res.disc.build(dg, d_in, dp);
  const NodeId d_style = loss::style_loss(dg, dg.slice(d_out, 0, bt), dg.slice(d_out, bt, bt + bs),
                                          dg.slice(d_out, bt + bs, bt + 2 * bs));
  const NodeId d_loss = dg.scale(d_style, -1.0);
  Executor<float> d_ex(dg);

  OptimizerState opt_g = OptimizerState::adam(cfg.lr_g, cfg.weight_decay, cfg.beta1, cfg.beta2);
  OptimizerState opt_d = OptimizerState::adam(cfg.lr_d, cfg.weight_decay, cfg.beta1, cfg.beta2);
  const PolySchedule sched_g{cfg.lr_g, cfg.poly_power, steps};
  const PolySchedule sched_d{cfg.lr_d, cfg.poly_power, steps};
  Sampler src_sampler(data.source_images.size(), sub_seed(seed, "tgstn-source"));
  Sampler tgt_sampler(data.target_images.size(), sub_seed(seed, "tgstn-target"));

  const std::size_t img_sz = 3 * H * W, lab_sz = C * H * W;
  Tensor<float> xs_b({bs, 3, H, W}), xt_b({bt, 3, H, W}), ys_b({bs, C, H, W});
  Tensor<float> d_batch({bt + 2 * bs, 3, H, W});
  long step = 0;
  try {
    for (; step < steps; ++step) {
      const auto si = src_sampler.next(bs);
      const auto ti = tgt_sampler.next(bt);
      for (std::size_t b = 0; b < bs; ++b) {
        const auto& img = data.source_images[si[b]];
        std::copy(img.vec().begin(), img.vec().end(), xs_b.vec().begin() + b * img_sz);
        write_one_hot(data.source_labels[si[b]], C, ys_b.vec().data() + b * lab_sz);
      }
      for (std::size_t b = 0; b < bt; ++b) {
        const auto& img = data.target_images[ti[b]];
        std::copy(img.vec().begin(), img.vec().end(), xt_b.vec().begin() + b * img_sz);
      }

      f_ex.feed(f_x, xs_b);
      feed_params(f_ex, f_p, phi.params);
      f_ex.forward();

      g_ex.feed(xs, xs_b);
      g_ex.feed(xt, xt_b);
      g_ex.feed(ys, ys_b);
      g_ex.feed(feat_src, f_ex.value(f_out));
      feed_params(g_ex, gp, res.generator);
      feed_params(g_ex, phi_p, phi.params);
      feed_params(g_ex, dp_const, res.disc_params);
      g_ex.forward();
      TGSTNLogRecord r;
      r.step = step + 1;
      r.loss_style_g = scalar(g_ex, style);
      r.loss_sem = scalar(g_ex, sem);
      r.loss_per = scalar(g_ex, per);
      const double l_total = scalar(g_ex, total);
      if (!std::isfinite(l_total))
        throw NumericAbort(step, {{"loss_style", r.loss_style_g}, {"loss_sem", r.loss_sem},
                                  {"loss_per", r.loss_per}});

      // Discriminator sees the generator output from before the update.
      std::copy(xt_b.vec().begin(), xt_b.vec().end(), d_batch.vec().begin());
      std::copy(xs_b.vec().begin(), xs_b.vec().end(), d_batch.vec().begin() + bt * img_sz);
      const auto& gx_v = g_ex.value(gx);
      std::copy(gx_v.vec().begin(), gx_v.vec().end(), d_batch.vec().begin() + (bt + bs) * img_sz);

      g_ex.backward(total);
      optimizer_step(opt_g, res.generator.pointers(), grads_of(g_ex, gp), poly_lr(sched_g, step));

      d_ex.feed(d_in, d_batch);
      feed_params(d_ex, dp, res.disc_params);
      d_ex.forward();
      r.loss_style_d = scalar(d_ex, d_loss);
      if (!std::isfinite(r.loss_style_d))
        throw NumericAbort(step, {{"loss_style_d", r.loss_style_d}});
      d_ex.backward(d_loss);
      optimizer_step(opt_d, res.disc_params.pointers(), grads_of(d_ex, dp), poly_lr(sched_d, step));
      res.log.push_back(r);
    }
  } catch (const NumericAbort&) {
    throw;
  } catch (const NumericError& e) {
    throw NumericAbort(step, {{"error", e.what()}});
  }
  return res;
}

// ---------------------------------------------------------------------------
// Ablation driver

AblationMode parse_mode(const std::string& name) {
  if (name == "noadapt") return AblationMode::kNoAdapt;
  if (name == "at") return AblationMode::kAT;
  if (name == "at-se") return AblationMode::kATSE;
  if (name == "at-se-aug") return AblationMode::kATSEAug;
  if (name == "full") return AblationMode::kST;
  if (name == "full-mst") return AblationMode::kMST;
  throw ConfigError("unknown mode '" + name +
                    "' (expected noadapt, at, at-se, at-se-aug, full, full-mst)");
}

std::string mode_name(AblationMode mode) {
  switch (mode) {
    case AblationMode::kNoAdapt: return "noadapt";
    case AblationMode::kAT: return "at";
    case AblationMode::kATSE: return "at-se";
    case AblationMode::kATSEAug: return "at-se-aug";
    case AblationMode::kST: return "full";
    case AblationMode::kMST: return "full-mst";
  }
  return "";
}

AblationFlags mode_flags(AblationMode mode) {
  const int level = static_cast<int>(mode);
  AblationFlags f;
  f.at = level >= 1;
  f.se = level >= 2;
  f.aug = level >= 3;
  f.st = level >= 4;
  f.mst = level >= 5;
  return f;
}

AblationResult run_ablation(AblationMode mode, TrainConfig cfg, const DomainDataset& ds,
                            const StyleTransform* style, const StageHook& stage_hook) {
  cfg.flags = mode_flags(mode);
  if (cfg.flags.aug && !style) throw ConfigError("mode " + mode_name(mode) + " needs a style transform");
  const TrainingData data = ds.training_view();
  const EvalSet eval = ds.target_eval_set();

  AblationResult res{train_segan(cfg, data, &eval, style), {}, std::nullopt};
  const auto curve = res.outcome.log.eval_curve();
  if (stability_window(curve.size(), 1.0 / 3.0) >= 5) res.stability = stability_index(curve);
  if (stage_hook)
    stage_hook(res.outcome.bundle,
               evaluate(res.outcome.bundle.net, res.outcome.bundle.eval_params(), eval));
  if (cfg.flags.st) {
    ModelBundle& b = res.outcome.bundle;
    const Tensor<float> pseudo = generate_pseudo_labels(b.net, b.teacher, data.target_images);
    self_train(cfg, b, pseudo, data.target_images, res.outcome.log, &eval, cfg.maxiter);
  }
  const ModelBundle& b = res.outcome.bundle;
  res.report = evaluate(b.net, b.eval_params(), eval, cfg.flags.mst ? &cfg.mst_scales : nullptr);
  return res;
}

}  // namespace segan
