#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "segan/datagen.hpp"
#include "segan/error.hpp"
#include "segan/metrics.hpp"
#include "segan/networks.hpp"

namespace segan {

struct AblationFlags {
  bool at = false;
  bool se = false;
  bool aug = false;
  bool st = false;
  bool mst = false;
};

struct TrainConfig {
  double lambda_con = 3.0;
  double lambda_adv = 0.001;
  double alpha = 0.999;
  double lr_student = 2.5e-5;
  double momentum = 0.0;
  double lr_disc = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 5e-5;
  double poly_power = 0.9;
  long maxiter = 3000;
  long st_maxiter = 1000;
  std::size_t batch_source = 2;
  std::size_t batch_target = 2;
  AblationFlags flags;
  bool adv_target_only = false;
  std::uint64_t seed = 0;
  long eval_interval = 100;
  long checkpoint_interval = 0;  // 0: final checkpoint only
  std::size_t eval_images = 0;   // 0: every target image
  std::vector<double> mst_scales{0.75, 1.0, 1.25};
  SegNetSpec segnet;
  DiscSpec disc;

  void validate() const;
};

struct TGSTNConfig {
  double lambda_sem = 10.0;
  double lambda_per = 1.0;
  double lr_g = 5e-4;
  double lr_d = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 5e-5;
  double poly_power = 0.9;
  long epochs = 5;
  std::size_t batch_source = 2;
  std::size_t batch_target = 2;
  long phi_iters = 1000;  // source-only pre-training of the frozen segmenter
  double phi_lr = 0.02;
  double phi_momentum = 0.9;
  std::uint64_t seed = 0;
  StyleGenSpec generator;
  DiscSpec disc{3, {8, 16, 32, 64, 1}, 4, 2, 1, 0.2};
  SegNetSpec segnet;

  void validate() const;
};

// JSON round trips; unknown keys are rejected with the offending key named.
nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TGSTNConfig& c);
TGSTNConfig tgstn_config_from_json(const nlohmann::json& j);

struct LogRecord {
  long iter = 0;
  double lr_student = 0.0;
  double lr_disc = 0.0;
  double loss_seg = 0.0;
  double loss_con = 0.0;
  double loss_adv_g = 0.0;
  double loss_adv_d = 0.0;
  std::optional<double> miou_eval;
};

struct TrainLog {
  std::vector<LogRecord> records;

  void append(const LogRecord& r);  // iterations must increase
  std::vector<double> eval_curve() const;
  void write_csv(const std::filesystem::path& path) const;
};

/// Thrown when a loss turns non-finite; carries the iteration and loss breakdown.
class NumericAbort : public NumericError {
 public:
  NumericAbort(long iteration, nlohmann::json breakdown);
  long iteration() const { return iteration_; }
  const nlohmann::json& breakdown() const { return breakdown_; }

 private:
  long iteration_;
  nlohmann::json breakdown_;
};

// theta_t <- alpha theta_t + (1 - alpha) theta_s, elementwise.
void ema_update(ParamSet& teacher, const ParamSet& student, double alpha);
std::vector<double> ema_update(const std::vector<double>& teacher, const std::vector<double>& student,
                               double alpha);

// Maps a [N,3,H,W] batch into the target style.
using StyleTransform = std::function<Tensor<float>(const Tensor<float>&)>;
StyleTransform oracle_style(const AppearanceParams& source, const AppearanceParams& target);
StyleTransform generator_style(StyleGenerator net, ParamSet params);

struct SegModel {
  SegNet net;
  ParamSet params;
  bool frozen = false;
};

// Source-only supervised training, used for the baseline and for the frozen segmenter.
SegModel train_source_only(const SegNetSpec& spec, const TrainingData& data, long iters,
                           double lr, double momentum, double weight_decay, std::size_t batch,
                           std::uint64_t seed);
SegModel freeze(SegModel model);

struct TGSTNLogRecord {
  long step = 0;
  double loss_style_g = 0.0;
  double loss_style_d = 0.0;
  double loss_sem = 0.0;
  double loss_per = 0.0;
};

struct TGSTNResult {
  StyleGenerator net;
  ParamSet generator;
  Discriminator disc;
  ParamSet disc_params;
  std::vector<TGSTNLogRecord> log;
  long steps_per_epoch = 0;
};

TGSTNResult train_tgstn(const TGSTNConfig& cfg, const TrainingData& data, const SegModel& phi,
                        std::uint64_t seed);
void write_tgstn_log(const std::filesystem::path& path, const std::vector<TGSTNLogRecord>& log);

struct ModelBundle {
  SegNet net;
  ParamSet student;
  ParamSet teacher;
  std::optional<Discriminator> disc;
  ParamSet disc_params;
  ParamSet disc_init;
  std::string eval_model = "student";  // which segmenter is reported

  const ParamSet& eval_params() const { return eval_model == "teacher" ? teacher : student; }
  nlohmann::json manifest() const;
  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static ModelBundle load(const std::filesystem::path& path);
};

struct TrainOutcome {
  ModelBundle bundle;
  TrainLog log;
};

// Hook invoked at the checkpoint interval with the current iteration.
using CheckpointHook = std::function<void(long, const ModelBundle&)>;

// Adversarial stage. `eval` only feeds the logged mIoU curve and is never read by
// the losses. `style` is required when the Aug flag is on.
TrainOutcome train_segan(const TrainConfig& cfg, const TrainingData& data,
                         const EvalSet* eval, const StyleTransform* style,
                         const CheckpointHook& hook = {});

// One-hot [N,C,H,W] maps from the argmax of the teacher's softmax.
Tensor<float> generate_pseudo_labels(const SegNet& net, const ParamSet& teacher,
                                     const std::vector<Tensor<float>>& target_images);
Tensor<float> one_hot(const LabelMap& labels, std::size_t classes);  // [N,H,W] -> [N,C,H,W]

// Fine-tunes the student on fixed pseudo labels; records are offset by `iter_offset`.
void self_train(const TrainConfig& cfg, ModelBundle& bundle, const Tensor<float>& pseudo_labels,
                const std::vector<Tensor<float>>& target_images, TrainLog& log,
                const EvalSet* eval, long iter_offset = 0);

MetricReport evaluate(const SegNet& net, const ParamSet& params, const EvalSet& eval,
                      const std::vector<double>* mst_scales = nullptr,
                      std::size_t max_images = 0);

enum class AblationMode { kNoAdapt, kAT, kATSE, kATSEAug, kST, kMST };

AblationMode parse_mode(const std::string& name);  // noadapt | at | at-se | at-se-aug | full | full-mst
std::string mode_name(AblationMode mode);
AblationFlags mode_flags(AblationMode mode);

struct AblationResult {
  TrainOutcome outcome;
  MetricReport report;
  std::optional<double> stability;  // over the adversarial-stage eval curve
};

// `stage_hook`, if set, receives the bundle after the adversarial stage (before
// self-training) together with its report.
using StageHook = std::function<void(const ModelBundle&, const MetricReport&)>;

AblationResult run_ablation(AblationMode mode, TrainConfig cfg, const DomainDataset& ds,
                            const StyleTransform* style, const StageHook& stage_hook = {});

}  // namespace segan
