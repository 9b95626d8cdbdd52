// Acceptance suite: one PASS/FAIL line per criterion, details indented below it.
// Usage: acceptance [--quick] [--strict]
//   --quick   skips the multi-seed training criteria (6, 7, 8, 10)
//   --strict  exits non-zero when any criterion fails

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "segan/bounds.hpp"
#include "segan/graph.hpp"
#include "segan/losses.hpp"
#include "segan/metrics.hpp"
#include "segan/pipeline.hpp"
#include "segan/rng.hpp"
#include "segan/trainer.hpp"

using namespace segan;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned tolerances and budgets.
constexpr int kGradSeeds = 20;
constexpr double kGradTol = 1e-4;
constexpr double kGradBudgetSeconds = 60.0;
constexpr double kIdentityTol = 1e-6;
constexpr double kEmaTol = 1e-6;
constexpr double kScalingTol = 1e-9;
constexpr double kGridTol = 0.01;
constexpr double kLimitTol = 0.05;
constexpr double kLimitN = 1e8;
constexpr double kLimitR = 3.0;
constexpr int kSeeds = 5;
constexpr int kQuorum = 4;
constexpr double kSweepBudgetSeconds = 30.0 * 60.0;

int g_failed = 0;
nlohmann::json g_results = nlohmann::json::array();

void verdict(int id, bool ok, const std::string& text) {
  std::printf("%s %2d %s\n", ok ? "PASS" : "FAIL", id, text.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failed;
  g_results.push_back({{"criterion", id}, {"pass", ok}, {"summary", text}});
}

template <typename... A>
void detail(const char* fmt, A... args) {
  std::printf("      ");
  std::printf(fmt, args...);
  std::printf("\n");
  std::fflush(stdout);
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// --- 1: gradient suite ----------------------------------------------------------

Tensor64 randn(const Shape& s, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Tensor64 t(s);
  for (auto& v : t.vec()) v = nd(rng);
  return t;
}

Tensor64 random_one_hot(const Shape& s, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, s[1] - 1);
  Tensor64 t(s, 0.0);
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t i = 0; i < s[2]; ++i)
      for (std::size_t j = 0; j < s[3]; ++j) t.at(n, pick(rng), i, j) = 1.0;
  return t;
}

double rel_err(const Tensor64& analytic, const Tensor64& numeric) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.numel(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / std::max(scale, 1e-12);
}

struct Probe {
  Graph g;
  Feeds<double> feeds;
  std::mt19937_64 rng;
  explicit Probe(int seed) : rng(static_cast<std::uint64_t>(seed) * 104729 + 3) {}

  NodeId param(const Shape& s, double scale = 1.0) {
    NodeId id = g.leaf("p" + std::to_string(g.size()), s, true);
    feeds[id] = randn(s, rng, scale);
    return id;
  }
  NodeId constant(const Shape& s, Tensor64 v) {
    NodeId id = g.leaf("c" + std::to_string(g.size()), s, false);
    feeds[id] = std::move(v);
    return id;
  }
};

double worst_loss_error(const std::function<NodeId(Probe&)>& build) {
  double worst = 0.0;
  for (int seed = 0; seed < kGradSeeds; ++seed) {
    Probe p(seed);
    const NodeId loss = build(p);
    for (const auto& [leaf, grad] : backward<double>(p.g, p.feeds, loss))
      worst = std::max(worst, rel_err(grad, finite_diff_grad(p.g, p.feeds, loss, leaf, 1e-4)));
  }
  return worst;
}

void criterion_gradients() {
  const auto t0 = Clock::now();
  const Shape s{2, 4, 3, 3}, ds{2, 1, 2, 2}, fs_{2, 5, 3, 3};
  auto onehot = [&](Probe& p) { return p.constant(s, random_one_hot(s, p.rng)); };
  auto probs = [&](Probe& p) { return p.g.softmax(p.param(s, 1.5)); };

  const std::vector<std::pair<const char*, std::function<NodeId(Probe&)>>> cases{
      {"seg", [&](Probe& p) { return loss::seg_loss(p.g, p.param(s, 1.5), p.param(s, 1.5), onehot(p)); }},
      {"seg (source only)",
       [&](Probe& p) { return loss::seg_loss(p.g, p.param(s, 1.5), std::nullopt, onehot(p)); }},
      {"consistency", [&](Probe& p) { return loss::consistency_loss(p.g, probs(p), probs(p)); }},
      {"adversarial",
       [&](Probe& p) {
         return loss::adversarial_loss(p.g, p.param(ds, 2.0), p.param(ds, 2.0), p.param(ds, 2.0));
       }},
      {"adversarial (target term)",
       [&](Probe& p) { return loss::adversarial_target_term(p.g, p.param(ds, 2.0)); }},
      {"self-train", [&](Probe& p) { return loss::self_train_loss(p.g, p.param(s, 1.5), onehot(p)); }},
      {"style",
       [&](Probe& p) { return loss::style_loss(p.g, p.param(ds, 2.0), p.param(ds, 2.0), p.param(ds, 2.0)); }},
      {"semantic consistency",
       [&](Probe& p) { return loss::semantic_consistency_loss(p.g, p.param(s, 1.5), onehot(p)); }},
      {"perceptual", [&](Probe& p) { return loss::perceptual_loss(p.g, p.param(fs_), p.param(fs_)); }},
      {"segan objective",
       [&](Probe& p) {
         const NodeId seg = loss::seg_loss(p.g, p.param(s, 1.5), p.param(s, 1.5), onehot(p));
         const NodeId con = loss::consistency_loss(p.g, probs(p), probs(p));
         const NodeId adv = loss::adversarial_loss(p.g, p.param(ds), p.param(ds), p.param(ds));
         return loss::segan_objective(p.g, loss::LossWeights{}, seg, con, adv);
       }},
      {"tgstn objective",
       [&](Probe& p) {
         const NodeId st = loss::style_loss(p.g, p.param(ds), p.param(ds), p.param(ds));
         const NodeId sem = loss::semantic_consistency_loss(p.g, p.param(s), onehot(p));
         const NodeId per = loss::perceptual_loss(p.g, p.param(fs_), p.param(fs_));
         return loss::tgstn_objective(p.g, loss::LossWeights{}, st, sem, per);
       }},
  };
  double worst = 0.0;
  for (const auto& [name, build] : cases) {
    const double e = worst_loss_error(build);
    detail("%-26s max relative error %.3e", name, e);
    worst = std::max(worst, e);
  }
  const double secs = seconds_since(t0);
  verdict(1, worst < kGradTol && secs < kGradBudgetSeconds,
          "gradient suite: worst " + fmt("%.2e", worst) + " over " + std::to_string(cases.size()) +
              " losses x 20 seeds, " + fmt("%.1f s", secs));
}

// --- 2: analytic identities -------------------------------------------------------

void criterion_identities() {
  double worst = 0.0;
  std::mt19937_64 rng(12);
  for (std::size_t c : {2u, 4u, 7u}) {
    const Shape s{2, c, 3, 4};
    const Tensor64 zeros(s, 0.0), y = random_one_hot(s, rng);
    const double ln_c = std::log(static_cast<double>(c));
    for (double v : {loss::seg_loss(zeros, nullptr, y), loss::seg_loss(zeros, &zeros, y),
                     loss::self_train_loss(zeros, y), loss::semantic_consistency_loss(zeros, y)})
      worst = std::max(worst, std::abs(v - ln_c));
  }
  detail("uniform cross-entropies vs ln C: max deviation %.2e", worst);

  Tensor64 logits = randn({2, 4, 5, 5}, rng, 2.0);
  Graph g;
  const NodeId z = g.leaf("z", logits.shape(), false);
  const NodeId prob = g.softmax(z);
  const NodeId l = loss::consistency_loss(g, prob, prob);
  const double con = forward<double>(g, {{z, logits}}).at(l)[0];
  detail("consistency of identical maps: %.2e", con);

  const Tensor64 half({2, 1, 4, 4}, 0.0);
  const double target = 3.0 * std::log(0.5);
  const double adv = std::abs(loss::adversarial_loss(half, &half, half) - target);
  const double sty = std::abs(loss::style_loss(half, half, half) - target);
  detail("adversarial, style at D=0.5 vs 3 ln 0.5: %.2e, %.2e", adv, sty);

  const bool ok = worst <= kIdentityTol && con == 0.0 && adv <= kIdentityTol && sty <= kIdentityTol;
  verdict(2, ok, "analytic identities within 1e-6");
}

// --- 3: EMA oracle -------------------------------------------------------------------

void criterion_ema() {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd(0.0, 3.0);
  std::vector<double> t0(64), student(64);
  for (auto& v : t0) v = nd(rng);
  for (auto& v : student) v = nd(rng);
  double worst = 0.0;
  for (double alpha : {0.0, 0.5, 0.999, 1.0}) {
    std::vector<double> t = t0;
    for (int i = 1; i <= 5000; ++i) {
      t = ema_update(t, student, alpha);
      if (i % 250 != 0 && i > 10) continue;
      const double a = std::pow(alpha, i);
      for (std::size_t k = 0; k < t.size(); ++k) {
        const double closed = a * t0[k] + (1.0 - a) * student[k];
        worst = std::max(worst, std::abs(t[k] - closed) / std::max(std::abs(closed), 1e-12));
      }
    }
  }
  verdict(3, worst <= kEmaTol,
          "EMA closed form, alpha in {0, 0.5, 0.999, 1}, 5000 steps: max relative error " +
              fmt("%.2e", worst));
}

// --- 4: bounds -----------------------------------------------------------------------

BoundSpec unit_spec() {
  BoundSpec s;
  s.s.assign(5, 1.0);
  s.b.assign(5, 1.0);
  s.rho.assign(5, 1.0);
  s.W = 2.0;
  return s;
}

void criterion_bounds() {
  const double hand = std::log(8.0) * 125.0;
  const double unit = covering_bound(unit_spec()).log_cover;
  const double unit_err = std::abs(unit / hand - 1.0);
  detail("unit spec log cover %.6f vs ln(8)*125 = %.6f", unit, hand);

  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(0.2, 3.0), logu(0.0, 1.0);
  double scaling = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    BoundSpec s;
    for (int i = 0; i < 5; ++i) s.s.push_back(u(rng)), s.b.push_back(u(rng)), s.rho.push_back(u(rng));
    s.W = 1.0 + 100.0 * u(rng);
    s.X_norm = u(rng);
    s.eps = u(rng);
    BoundSpec scaled = s;
    for (auto& v : scaled.s) v *= 2.0;
    for (auto& v : scaled.b) v *= 2.0;
    const double ratio = covering_bound(scaled).log_cover / covering_bound(s).log_cover;
    scaling = std::max(scaling, std::abs(ratio / std::pow(2.0, 10) - 1.0));
  }
  detail("c^{2L} scaling at c=2, L=5: max relative error %.2e", scaling);

  double grid = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const double N = std::pow(10.0, 2.0 + 4.0 * logu(rng));
    const double R = std::pow(10.0, -1.0 + 2.0 * logu(rng));
    const double closed = dudley_sqrt_minimizer(R, N);
    double best_a = 0, best = INFINITY;
    const double lo = std::log(1e-6), hi = std::log(std::sqrt(N));
    for (int i = 0; i <= 200000; ++i) {
      const double a = std::exp(lo + (hi - lo) * i / 200000.0);
      const double v = dudley_sqrt_objective(a, R, N);
      if (v < best) best = v, best_a = a;
    }
    grid = std::max(grid, std::abs(best_a / closed - 1.0));
  }
  detail("alpha* = 3 sqrt(R/N) vs grid search, 20 random (R, N): max relative gap %.2e", grid);

  BoundSpec s = unit_spec();
  s.N = kLimitN;
  s.Delta = 1.0;
  s.delta = 0.05;
  const double limit = 2.0 * s.Delta * std::sqrt(2.0 * std::log(1.0 / s.delta));
  const double limit_gap = std::abs(generalization_bound(s, kLimitR) * std::sqrt(kLimitN) / limit - 1.0);
  const double unit_R = covering_bound(unit_spec()).R;
  const double unit_gap = std::abs(generalization_bound(s, unit_R) * std::sqrt(kLimitN) / limit - 1.0);
  detail("gen_bound*sqrt(N) at N=1e8 vs 2*Delta*sqrt(2 log(1/delta)): gap %.4f at R=3, %.4f at R=%.2f",
         limit_gap, unit_gap, unit_R);

  const bool ok = unit_err < 1e-12 && scaling < kScalingTol && grid < kGridTol && limit_gap < kLimitTol;
  verdict(4, ok, "bounds: hand value, scaling law, minimiser, N=1e8 limit (R=3) " + fmt("%.3f", limit_gap));
}

// --- 5: metrics oracle ------------------------------------------------------------------

void criterion_metrics() {
  const LabelMap pred({1, 4}, std::vector<std::uint8_t>{0, 0, 1, 1});
  const LabelMap gt({1, 4}, std::vector<std::uint8_t>{0, 1, 1, 1});
  const MetricReport hand = iou_report(confusion(pred, gt, 2));
  const bool hand_ok = hand.iou[0] == 0.5 && hand.iou[1] == 2.0 / 3.0;
  detail("hand instance IoU (%.17g, %.17g)", hand.iou[0], hand.iou[1]);

  std::mt19937_64 rng(55);
  int mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t classes = 2 + static_cast<std::size_t>(trial % 6);
    std::uniform_int_distribution<int> pick(0, static_cast<int>(classes) - 1);
    LabelMap p({11, 7}), g({11, 7});
    for (auto& v : p.vec()) v = static_cast<std::uint8_t>(pick(rng));
    for (auto& v : g.vec()) v = static_cast<std::uint8_t>(pick(rng));
    const MetricReport r = iou_report(confusion(p, g, classes));
    for (std::size_t k = 0; k < classes; ++k) {
      std::uint64_t inter = 0, uni = 0;
      for (std::size_t i = 0; i < p.numel(); ++i) {
        inter += p[i] == k && g[i] == k;
        uni += p[i] == k || g[i] == k;
      }
      if (uni == 0) {
        mismatches += r.defined[k] != 0;
        continue;
      }
      mismatches += r.iou[k] != static_cast<double>(inter) / static_cast<double>(uni);
    }
  }
  detail("100 random maps: %d per-class mismatches against the counting oracle", mismatches);
  verdict(5, hand_ok && mismatches == 0, "metrics oracle: hand instance exact, random maps exact");
}

// --- shared training setup --------------------------------------------------------------

TrainConfig desk_config(std::uint64_t seed, std::size_t classes) {
  TrainConfig c;
  c.maxiter = 2000;
  c.st_maxiter = 1000;
  c.eval_interval = 100;
  c.lr_student = 0.01;
  c.momentum = 0.9;
  c.lambda_adv = 0.01;
  c.alpha = 0.995;
  c.seed = seed;
  c.segnet.classes = classes;
  c.disc.in_channels = classes;
  return c;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SEGAN_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

// --- 9: determinism ----------------------------------------------------------------------

void criterion_determinism(const fs::path& work) {
  const fs::path data = work / "det_data", a = work / "det_a", b = work / "det_b",
                 cfg = work / "det_config.json";
  nlohmann::json j = to_json(desk_config(7, 4));
  j["maxiter"] = 300;
  j["st_maxiter"] = 150;
  write_json_file(cfg, j);
  bool ok = run_cli("gen-data --out " + data.string() + " --seed 7 --force") == 0;
  for (const auto& out : {a, b})
    ok = ok && run_cli("train --mode full --oracle-style --data " + data.string() + " --config " +
                       cfg.string() + " --seed 7 --out " + out.string() + " --force") == 0;
  std::size_t compared = 0, differing = 0;
  if (ok) {
    for (const char* f : {"checkpoint.sgck", "stage1.sgck", "train_log.csv", "report.json", "stage1_report.json"}) {
      ++compared;
      if (!fs::exists(a / f) || !fs::exists(b / f) || file_bytes(a / f) != file_bytes(b / f)) ++differing;
    }
  }
  detail("train --mode full twice (300 + 150 iterations, seed 7): %zu files compared, %zu differ",
         compared, differing);
  verdict(9, ok && differing == 0,
          "determinism: twin full runs are bit-identical");
}

// --- 10: TGSTN --------------------------------------------------------------------------

void criterion_tgstn() {
  const auto t0 = Clock::now();
  int hits = 0;
  for (int seed = 1; seed <= kSeeds; ++seed) {
    const DomainDataset ds = generate_from_config(default_dataset_config(), static_cast<std::uint64_t>(seed));
    TGSTNConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(seed);
    cfg.segnet.classes = ds.classes();
    cfg.validate();
    const TrainingData data = ds.training_view();
    const SegModel phi = freeze(train_source_only(cfg.segnet, data, cfg.phi_iters, cfg.phi_lr,
                                                  cfg.phi_momentum, cfg.weight_decay,
                                                  cfg.batch_source, sub_seed(cfg.seed, "phi")));
    const TGSTNResult res = train_tgstn(cfg, data, phi, cfg.seed);

    std::vector<Scene> source, target;
    bool labels_same = true, shapes_same = true;
    for (std::size_t i = 0; i < ds.source_count(); ++i) {
      Tensor<float> batch = data.source_images[i];
      batch.reshape({1, batch.dim(0), batch.dim(1), batch.dim(2)});
      Tensor<float> out = res.net.apply(res.generator, batch);
      shapes_same = shapes_same && out.shape() == batch.shape();
      out.reshape({out.dim(1), out.dim(2), out.dim(3)});
      Scene sc;
      sc.image = chw_to_hwc(out);
      sc.label = ds.source_label(i);
      sc.present.assign(ds.classes(), 0);
      for (auto v : sc.label.vec()) sc.present[v] = 1;
      labels_same = labels_same && sc.label.vec() == data.source_labels[i].vec();
      source.push_back(std::move(sc));
    }
    for (std::size_t i = 0; i < ds.target_count(); ++i) {
      Scene sc;
      sc.image = ds.target_image(i);
      sc.label = ds.target_label_for_evaluation(i);
      sc.present.assign(ds.classes(), 0);
      target.push_back(std::move(sc));
    }
    const DomainDataset transferred(std::move(source), std::move(target), ds.classes(), ds.source_params(),
                                    ds.target_params(), ds.seed());
    const ShiftSeverity before = shift_severity(ds), after = shift_severity(transferred);
    labels_same = labels_same && after.layout_gap == before.layout_gap;
    const bool hit = after.appearance_gap < before.appearance_gap && labels_same && shapes_same;
    hits += hit;
    detail("seed %d: appearance gap %.4f -> %.4f, layout gap %.4f -> %.4f, labels %s", seed,
           before.appearance_gap, after.appearance_gap, before.layout_gap, after.layout_gap,
           labels_same && shapes_same ? "unchanged" : "CHANGED");
  }
  verdict(10, hits >= kQuorum,
          "TGSTN: gap shrinks with labels unchanged in " + std::to_string(hits) + "/5 seeds, " +
              fmt("%.0f s", seconds_since(t0)));
}

// --- 6, 7, 8: multi-seed ablation -----------------------------------------------------------

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

void criteria_sweep() {
  const auto t0 = Clock::now();
  std::vector<double> na, at, ase, full;
  int stab_hits = 0, neg_hits = 0;
  int o1 = 0, o2 = 0, o3 = 0;
  for (int seed = 1; seed <= kSeeds; ++seed) {
    const DomainDataset ds = generate_from_config(default_dataset_config(), static_cast<std::uint64_t>(seed));
    const TrainConfig cfg = desk_config(static_cast<std::uint64_t>(seed), ds.classes());
    const StyleTransform style = oracle_style(ds.source_params().appearance, ds.target_params().appearance);

    const AblationResult r_na = run_ablation(AblationMode::kNoAdapt, cfg, ds, nullptr);
    const AblationResult r_at = run_ablation(AblationMode::kAT, cfg, ds, nullptr);
    MetricReport stage1;
    const AblationResult r_full = run_ablation(AblationMode::kST, cfg, ds, &style,
                                               [&](const ModelBundle&, const MetricReport& r) { stage1 = r; });

    na.push_back(r_na.report.miou);
    at.push_back(r_at.report.miou);
    ase.push_back(stage1.miou);
    full.push_back(r_full.report.miou);
    o1 += na.back() < at.back();
    o2 += at.back() < ase.back();
    o3 += ase.back() <= full.back();

    const double s_at = r_at.stability.value_or(NAN), s_full = r_full.stability.value_or(NAN);
    stab_hits += s_full < s_at;
    const std::size_t neg_at = transfer_gain(r_at.report, r_na.report).negative.size();
    const std::size_t neg_full = transfer_gain(r_full.report, r_na.report).negative.size();
    neg_hits += neg_full <= neg_at;

    detail("seed %d: mIoU noadapt %.4f  at %.4f  at+se+aug %.4f  full %.4f", seed, na.back(), at.back(),
           ase.back(), full.back());
    detail("        stability at %.4f  full %.4f; negative-transfer classes at %zu  full %zu", s_at, s_full,
           neg_at, neg_full);
  }
  const double secs = seconds_since(t0);
  const double m_na = median(na), m_at = median(at), m_ase = median(ase), m_full = median(full);
  detail("medians: noadapt %.4f  at %.4f  at+se+aug %.4f  full %.4f", m_na, m_at, m_ase, m_full);
  detail("pairwise counts: %d/5, %d/5, %d/5; %.0f s", o1, o2, o3, secs);
  const bool ordered = m_na < m_at && m_at < m_ase && m_ase <= m_full;
  verdict(6, ordered && o1 >= kQuorum && o2 >= kQuorum && o3 >= kQuorum && secs < kSweepBudgetSeconds,
          "ablation ordering over 5 seeds, " + fmt("%.0f s", secs));
  verdict(7, stab_hits >= kQuorum,
          "stability: full below AT-only in " + std::to_string(stab_hits) + "/5 seeds");
  verdict(8, neg_hits >= kQuorum,
          "negative transfer: full <= AT-only in " + std::to_string(neg_hits) + "/5 seeds");
}

}  // namespace

int main(int argc, char** argv) {
  bool quick = false, strict = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--quick") quick = true;
    else if (a == "--strict") strict = true;
    else {
      std::fprintf(stderr, "usage: acceptance [--quick] [--strict]\n");
      return 2;
    }
  }
  const fs::path work = fs::temp_directory_path() / ("segan_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(work);
  const auto t0 = Clock::now();
  int ran = 0;
  try {
    criterion_gradients();
    criterion_identities();
    criterion_ema();
    criterion_bounds();
    criterion_metrics();
    criterion_determinism(work);
    ran = 6;
    if (!quick) {
      criteria_sweep();
      criterion_tgstn();
      ran = 10;
    }
  } catch (const std::exception& e) {
    std::printf("FAIL  - aborted: %s\n", e.what());
    ++g_failed;
  }
  fs::remove_all(work);
  std::printf("%d/%d criteria passed in %.0f s\n", ran - g_failed, ran, seconds_since(t0));
  write_json_file("acceptance_results.json", {{"results", g_results}, {"failed", g_failed}});
  return strict && g_failed > 0 ? 1 : 0;
}
