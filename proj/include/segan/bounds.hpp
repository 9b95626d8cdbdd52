#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "segan/serialize.hpp"
#include "segan/tensor.hpp"

namespace segan {

struct BoundSpec {
  std::vector<double> s;    // spectral-norm bounds per layer
  std::vector<double> b;    // distances to the reference matrices
  std::vector<double> rho;  // Lipschitz constants per layer
  double W = 1.0;           // largest feature-map dimension
  double X_norm = 1.0;      // Frobenius norm of the input batch
  double eps = 1.0;
  double N = 1.0;
  double Delta = 1.0;
  double delta = 0.05;
  double phi = 0.0;

  std::size_t layers() const { return s.size(); }
  void validate() const;
};

// kStatement carries (sum (b/s)^{2/3})^3; kProofFinalLine carries sum b^2/s^2.
enum class CoverVariant { kStatement, kProofFinalLine };

struct CoverResult {
  double log_cover = 0.0;
  double R = 0.0;  // R^2 = log_cover * eps^2
};

CoverResult covering_bound(const BoundSpec& spec, CoverVariant variant = CoverVariant::kStatement);

struct LayerRadii {
  std::vector<double> alpha;
  std::vector<double> radii;
  bool uniform_fallback = false;  // every b_i was zero
};

LayerRadii layer_radii(const BoundSpec& spec, double eps);

// 12R/N (1 + log(N/3R)) for N > 3R, otherwise the Dudley expression at alpha = sqrt(N), i.e. 4.
double rademacher_bound(double R, double N);

// The two Dudley-type objectives minimised over alpha. The first carries sqrt(R)
// in front of the log, whose minimiser is 3 sqrt(R/N); the second integrates
// R/eps exactly, whose minimiser is 3R/sqrt(N) and whose minimum is rademacher_bound.
double dudley_sqrt_objective(double alpha, double R, double N);
double dudley_integral_objective(double alpha, double R, double N);
double dudley_sqrt_minimizer(double R, double N);
double dudley_integral_minimizer(double R, double N);

// 2 * rademacher + 2 Delta sqrt(2 log(1/delta) / N) + phi; the first term is 0 when R = 0.
double generalization_bound(const BoundSpec& spec, double R);

struct BoundReport {
  CoverResult cover;
  LayerRadii radii;
  double rademacher = 0.0;
  double gen_bound = 0.0;
};

BoundReport bound_report(const BoundSpec& spec, CoverVariant variant = CoverVariant::kStatement);

enum class ReferencePolicy { kZero, kInit };

struct MeasureOptions {
  ReferencePolicy policy = ReferencePolicy::kInit;
  int power_iters = 5000;
  double power_tol = 1e-12;
  bool tight_sigmoid = false;  // use 1/4 for the final sigmoid instead of 1
  double eps = 1.0;
  double delta = 0.05;
  double phi = 0.0;
};

// Discriminator layers are read from `prefix` + "l1.w" ... and the reference from
// `reference_prefix` when the policy is kInit. `inputs` is the [N,C,H,W] batch.
BoundSpec measure_discriminator(const Checkpoint& ck, const std::string& prefix,
                                const std::string& reference_prefix, const Tensor<float>& inputs,
                                const MeasureOptions& options);

nlohmann::json to_json(const BoundSpec& s);
nlohmann::json to_json(const BoundReport& r);

}  // namespace segan
