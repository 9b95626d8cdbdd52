#include "segan/losses.hpp"

#include <cmath>

namespace segan::loss {
namespace {

double pixels_times_batch(const Graph& g, NodeId x) {
  const Shape& s = g.node(x).shape;
  if (s.size() < 2) throw ShapeError(g.describe(x) + " needs N,C,... layout");
  return static_cast<double>(shape_numel(s) / s[1]);
}

void same_shape(const Graph& g, NodeId a, NodeId b, const char* what) {
  if (g.node(a).shape != g.node(b).shape)
    throw ShapeError(std::string(what) + ": " + g.describe(a) + " vs " + g.describe(b));
}

// Sum over all cells of y * log softmax(logits).
NodeId weighted_log_likelihood(Graph& g, NodeId logits, NodeId onehot) {
  same_shape(g, logits, onehot, "cross-entropy");
  return g.reduce_sum(g.mul(onehot, clamped_log(g, g.softmax(logits))));
}

NodeId mean_log_sigmoid(Graph& g, NodeId raw, bool complement) {
  const NodeId z = complement ? g.scale(raw, -1.0) : raw;
  return g.reduce_mean(clamped_log(g, g.sigmoid(z)));
}

}  // namespace

NodeId clamped_log(Graph& g, NodeId probs) {
  return g.log(g.clamp(probs, kProbFloor, 1.0 - kProbFloor));
}

NodeId cross_entropy(Graph& g, NodeId logits, NodeId onehot) {
  const double denom = pixels_times_batch(g, logits);
  return g.scale(weighted_log_likelihood(g, logits, onehot), -1.0 / denom);
}

NodeId seg_loss(Graph& g, NodeId logits_src, std::optional<NodeId> logits_transferred,
                NodeId onehot) {
  if (!logits_transferred) return g.named(cross_entropy(g, logits_src, onehot), "loss_seg");
  const double denom = 2.0 * pixels_times_batch(g, logits_src);
  const NodeId sum = g.add(weighted_log_likelihood(g, logits_src, onehot),
                           weighted_log_likelihood(g, *logits_transferred, onehot));
  return g.named(g.scale(sum, -1.0 / denom), "loss_seg");
}

NodeId consistency_loss(Graph& g, NodeId probs_student, NodeId probs_teacher) {
  same_shape(g, probs_student, probs_teacher, "consistency loss");
  const double denom = pixels_times_batch(g, probs_student);
  const NodeId sq = g.square(g.sub(probs_student, probs_teacher));
  return g.named(g.scale(g.reduce_sum(sq), 1.0 / denom), "loss_con");
}

NodeId adversarial_loss(Graph& g, NodeId d_src, std::optional<NodeId> d_src_transferred,
                        NodeId d_tgt) {
  NodeId total = mean_log_sigmoid(g, d_src, true);
  if (d_src_transferred) total = g.add(total, mean_log_sigmoid(g, *d_src_transferred, true));
  total = g.add(total, mean_log_sigmoid(g, d_tgt, false));
  return g.named(total, "loss_adv");
}

NodeId adversarial_target_term(Graph& g, NodeId d_tgt) {
  return g.named(mean_log_sigmoid(g, d_tgt, false), "loss_adv_target");
}

NodeId self_train_loss(Graph& g, NodeId logits_t, NodeId pseudo_onehot) {
  return g.named(cross_entropy(g, logits_t, pseudo_onehot), "loss_st");
}

NodeId style_loss(Graph& g, NodeId d_real_t, NodeId d_src, NodeId d_transferred) {
  const NodeId real = mean_log_sigmoid(g, d_real_t, false);
  const NodeId fake = g.add(mean_log_sigmoid(g, d_src, true), mean_log_sigmoid(g, d_transferred, true));
  return g.named(g.add(real, fake), "loss_style");
}

NodeId semantic_consistency_loss(Graph& g, NodeId phi_logits, NodeId onehot) {
  return g.named(cross_entropy(g, phi_logits, onehot), "loss_sem");
}

NodeId perceptual_loss(Graph& g, NodeId features_a, NodeId features_b) {
  same_shape(g, features_a, features_b, "perceptual loss");
  const double cells = pixels_times_batch(g, features_a);
  const NodeId sq = g.square(g.sub(features_a, features_b));
  return g.named(g.scale(g.reduce_sum(sq), 1.0 / cells), "loss_per");
}

NodeId segan_objective(Graph& g, const LossWeights& w, NodeId seg, std::optional<NodeId> con,
                       std::optional<NodeId> adv) {
  NodeId total = seg;
  if (con) total = g.add(total, g.scale(*con, w.con));
  if (adv) total = g.add(total, g.scale(*adv, w.adv));
  return g.named(total, "objective");
}

NodeId tgstn_objective(Graph& g, const LossWeights& w, NodeId style, NodeId sem, NodeId per) {
  return g.named(g.add(style, g.add(g.scale(sem, w.sem), g.scale(per, w.per))), "tgstn_objective");
}

// ---------------------------------------------------------------------------

void require_one_hot(const Tensor<double>& onehot, const std::string& what) {
  const Shape& s = onehot.shape();
  if (s.size() < 2) throw ShapeError(what + ": one-hot labels need N,C,... layout");
  const std::size_t n = s[0], c = s[1], inner = shape_numel(s) / (n * c);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < inner; ++p) {
      int ones = 0;
      for (std::size_t k = 0; k < c; ++k) {
        const double v = onehot[(b * c + k) * inner + p];
        if (v == 1.0) ++ones;
        else if (v != 0.0) ones = 2;
      }
      if (ones != 1)
        throw ConfigError(what + ": label at batch " + std::to_string(b) + ", pixel " +
                          std::to_string(p) + " is not one-hot");
    }
}

namespace {

struct Scratch {
  Graph g;
  Feeds<double> feeds;
  NodeId input(const Tensor<double>& t, const char* name) {
    const NodeId id = g.leaf(name, t.shape());
    feeds.emplace(id, t);
    return id;
  }
  double eval(NodeId out) { return forward(g, feeds).at(out)[0]; }
};

}  // namespace

double seg_loss(const Tensor<double>& logits_src, const Tensor<double>* logits_transferred,
                const Tensor<double>& onehot) {
  require_one_hot(onehot, "seg_loss");
  Scratch s;
  const NodeId a = s.input(logits_src, "logits_src");
  std::optional<NodeId> b;
  if (logits_transferred) b = s.input(*logits_transferred, "logits_transferred");
  const NodeId y = s.input(onehot, "onehot");
  return s.eval(seg_loss(s.g, a, b, y));
}

double consistency_loss(const Tensor<double>& probs_student, const Tensor<double>& probs_teacher) {
  Scratch s;
  const NodeId a = s.input(probs_student, "student");
  const NodeId b = s.input(probs_teacher, "teacher");
  return s.eval(consistency_loss(s.g, a, b));
}

double adversarial_loss(const Tensor<double>& d_src, const Tensor<double>* d_src_transferred,
                        const Tensor<double>& d_tgt) {
  Scratch s;
  const NodeId a = s.input(d_src, "d_src");
  std::optional<NodeId> b;
  if (d_src_transferred) b = s.input(*d_src_transferred, "d_src_transferred");
  const NodeId c = s.input(d_tgt, "d_tgt");
  return s.eval(adversarial_loss(s.g, a, b, c));
}

double self_train_loss(const Tensor<double>& logits_t, const Tensor<double>& pseudo_onehot) {
  require_one_hot(pseudo_onehot, "self_train_loss");
  Scratch s;
  const NodeId a = s.input(logits_t, "logits_t");
  const NodeId y = s.input(pseudo_onehot, "pseudo");
  return s.eval(self_train_loss(s.g, a, y));
}

double style_loss(const Tensor<double>& d_real_t, const Tensor<double>& d_src,
                  const Tensor<double>& d_transferred) {
  Scratch s;
  const NodeId a = s.input(d_real_t, "d_real_t");
  const NodeId b = s.input(d_src, "d_src");
  const NodeId c = s.input(d_transferred, "d_transferred");
  return s.eval(style_loss(s.g, a, b, c));
}

double semantic_consistency_loss(const Tensor<double>& phi_logits, const Tensor<double>& onehot) {
  require_one_hot(onehot, "semantic_consistency_loss");
  Scratch s;
  const NodeId a = s.input(phi_logits, "phi_logits");
  const NodeId y = s.input(onehot, "onehot");
  return s.eval(semantic_consistency_loss(s.g, a, y));
}

double perceptual_loss(const Tensor<double>& features_a, const Tensor<double>& features_b) {
  Scratch s;
  const NodeId a = s.input(features_a, "features_a");
  const NodeId b = s.input(features_b, "features_b");
  return s.eval(perceptual_loss(s.g, a, b));
}

double segan_objective(const LossWeights& w, double seg, double con, double adv) {
  return seg + w.con * con + w.adv * adv;
}

double tgstn_objective(const LossWeights& w, double style, double sem, double per) {
  return style + w.sem * sem + w.per * per;
}

}  // namespace segan::loss
