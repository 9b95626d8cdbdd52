#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "segan/graph.hpp"

namespace segan::loss {

// Probabilities are clamped to [kProbFloor, 1 - kProbFloor] before every log.
inline constexpr double kProbFloor = 1e-7;

struct LossWeights {
  double con = 3.0;
  double adv = 0.001;
  double sem = 10.0;
  double per = 1.0;
};

// --- graph builders ---------------------------------------------------------
// Logit and probability maps are [N,C,H,W]; one-hot labels share that shape.
// Discriminator inputs are raw score maps; a sigmoid is applied before the log.

NodeId clamped_log(Graph& g, NodeId probs);
// -(1/NK) sum y log softmax(logits), K pixels per image.
NodeId cross_entropy(Graph& g, NodeId logits, NodeId onehot);
// Source segmentation loss; the optional transferred term shares the 1/2K factor.
NodeId seg_loss(Graph& g, NodeId logits_src, std::optional<NodeId> logits_transferred,
                NodeId onehot);
NodeId consistency_loss(Graph& g, NodeId probs_student, NodeId probs_teacher);
NodeId adversarial_loss(Graph& g, NodeId d_src, std::optional<NodeId> d_src_transferred,
                        NodeId d_tgt);
// Target-term-only variant of the adversarial loss used by the adv_target_only flag.
NodeId adversarial_target_term(Graph& g, NodeId d_tgt);
NodeId self_train_loss(Graph& g, NodeId logits_t, NodeId pseudo_onehot);
NodeId style_loss(Graph& g, NodeId d_real_t, NodeId d_src, NodeId d_transferred);
NodeId semantic_consistency_loss(Graph& g, NodeId phi_logits, NodeId onehot);
NodeId perceptual_loss(Graph& g, NodeId features_a, NodeId features_b);
NodeId segan_objective(Graph& g, const LossWeights& w, NodeId seg, std::optional<NodeId> con,
                       std::optional<NodeId> adv);
NodeId tgstn_objective(Graph& g, const LossWeights& w, NodeId style, NodeId sem, NodeId per);

// --- value API --------------------------------------------------------------
// Same losses evaluated directly on tensors in double precision. One-hot inputs
// are validated.

void require_one_hot(const Tensor<double>& onehot, const std::string& what);

double seg_loss(const Tensor<double>& logits_src, const Tensor<double>* logits_transferred,
                const Tensor<double>& onehot);
double consistency_loss(const Tensor<double>& probs_student, const Tensor<double>& probs_teacher);
double adversarial_loss(const Tensor<double>& d_src, const Tensor<double>* d_src_transferred,
                        const Tensor<double>& d_tgt);
double self_train_loss(const Tensor<double>& logits_t, const Tensor<double>& pseudo_onehot);
double style_loss(const Tensor<double>& d_real_t, const Tensor<double>& d_src,
                  const Tensor<double>& d_transferred);
double semantic_consistency_loss(const Tensor<double>& phi_logits, const Tensor<double>& onehot);
double perceptual_loss(const Tensor<double>& features_a, const Tensor<double>& features_b);
double segan_objective(const LossWeights& w, double seg, double con, double adv);
double tgstn_objective(const LossWeights& w, double style, double sem, double per);

// --- integral probability metric --------------------------------------------

struct IPMEstimate {
  double value = 0.0;
  std::size_t witness = 0;  // index of the maximising function
  std::size_t mu_count = 0;
  std::size_t nu_count = 0;
};

// sup over a finite class of (mean_mu f - mean_nu f). For an even class
// (f present implies -f present) the value is non-negative.
template <typename Sample>
IPMEstimate ipm_estimate(const std::vector<std::function<double(const Sample&)>>& f_class,
                         const std::vector<Sample>& mu, const std::vector<Sample>& nu) {
  if (f_class.empty()) throw ConfigError("ipm_estimate: empty function class");
  if (mu.empty() || nu.empty()) throw ConfigError("ipm_estimate: empty sample set");
  IPMEstimate est;
  est.mu_count = mu.size();
  est.nu_count = nu.size();
  est.value = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < f_class.size(); ++i) {
    double a = 0.0, b = 0.0;
    for (const auto& x : mu) a += f_class[i](x);
    for (const auto& x : nu) b += f_class[i](x);
    const double gap = a / static_cast<double>(mu.size()) - b / static_cast<double>(nu.size());
    if (gap > est.value) {
      est.value = gap;
      est.witness = i;
    }
  }
  return est;
}

}  // namespace segan::loss
