#include "segan/bounds.hpp"

#include <algorithm>
#include <cmath>

#include "segan/error.hpp"
#include "segan/graph.hpp"
#include "segan/networks.hpp"

namespace segan {

void BoundSpec::validate() const {
  const std::size_t L = s.size();
  if (L == 0) throw ConfigError("bound spec: no layers");
  if (b.size() != L || rho.size() != L)
    throw ConfigError("bound spec: s, b and rho must have one entry per layer");
  for (std::size_t i = 0; i < L; ++i) {
    if (!(s[i] > 0.0)) throw ConfigError("bound spec: s[" + std::to_string(i) + "] must be > 0");
    if (!(rho[i] > 0.0)) throw ConfigError("bound spec: rho[" + std::to_string(i) + "] must be > 0");
    if (!(b[i] >= 0.0)) throw ConfigError("bound spec: b[" + std::to_string(i) + "] must be >= 0");
  }
  if (!(W >= 1.0)) throw ConfigError("bound spec: W must be >= 1");
  if (!(X_norm >= 0.0 && Delta >= 0.0 && phi >= 0.0))
    throw ConfigError("bound spec: X_norm, Delta and phi must be >= 0");
  if (!(N >= 1.0)) throw ConfigError("bound spec: N must be >= 1");
  if (!(delta > 0.0 && delta <= 1.0)) throw ConfigError("bound spec: delta must lie in (0,1]");
}

CoverResult covering_bound(const BoundSpec& spec, CoverVariant variant) {
  spec.validate();
  if (!(spec.eps > 0.0)) throw ConfigError("covering_bound: eps must be > 0");
  double prod = 1.0, sum = 0.0;
  for (std::size_t i = 0; i < spec.layers(); ++i) {
    prod *= spec.rho[i] * spec.s[i];
    const double r = spec.b[i] / spec.s[i];
    sum += variant == CoverVariant::kStatement ? std::cbrt(r * r) : r * r;
  }
  const double complexity = variant == CoverVariant::kStatement ? sum * sum * sum : sum;
  CoverResult out;
  out.log_cover = std::log(2.0 * spec.W * spec.W) * spec.X_norm * spec.X_norm /
                  (spec.eps * spec.eps) * prod * prod * complexity;
  out.R = spec.eps * std::sqrt(out.log_cover);
  return out;
}

LayerRadii layer_radii(const BoundSpec& spec, double eps) {
  spec.validate();
  if (!(eps > 0.0)) throw ConfigError("layer_radii: eps must be > 0");
  const std::size_t L = spec.layers();
  LayerRadii out;
  out.alpha.resize(L);
  double total = 0.0;
  for (std::size_t i = 0; i < L; ++i) {
    const double r = spec.b[i] / spec.s[i];
    out.alpha[i] = std::cbrt(r * r);
    total += out.alpha[i];
  }
  if (total == 0.0) {
    out.uniform_fallback = true;
    std::fill(out.alpha.begin(), out.alpha.end(), 1.0 / static_cast<double>(L));
  } else {
    for (auto& a : out.alpha) a /= total;
  }
  out.radii.resize(L);
  double tail = 1.0;  // prod_{j>i} rho_j s_j
  for (std::size_t k = L; k-- > 0;) {
    out.radii[k] = out.alpha[k] * eps / (spec.rho[k] * tail);
    tail *= spec.rho[k] * spec.s[k];
  }
  return out;
}

double rademacher_bound(double R, double N) {
  if (!(R > 0.0)) throw ConfigError("rademacher_bound: R must be > 0");
  if (!(N >= 1.0)) throw ConfigError("rademacher_bound: N must be >= 1");
  if (N > 3.0 * R) return 12.0 * R / N * (1.0 + std::log(N / (3.0 * R)));
  return dudley_integral_objective(std::sqrt(N), R, N);
}

double dudley_sqrt_objective(double alpha, double R, double N) {
  return 4.0 * alpha / std::sqrt(N) + 12.0 / N * std::sqrt(R) * std::log(std::sqrt(N) / alpha);
}

double dudley_integral_objective(double alpha, double R, double N) {
  return 4.0 * alpha / std::sqrt(N) + 12.0 / N * R * std::log(std::sqrt(N) / alpha);
}

double dudley_sqrt_minimizer(double R, double N) { return 3.0 * std::sqrt(R / N); }
double dudley_integral_minimizer(double R, double N) { return 3.0 * R / std::sqrt(N); }

double generalization_bound(const BoundSpec& spec, double R) {
  if (!(spec.delta > 0.0)) throw ConfigError("generalization_bound: delta must be > 0");
  if (!(spec.N >= 1.0)) throw ConfigError("generalization_bound: N must be >= 1");
  if (R < 0.0) throw ConfigError("generalization_bound: R must be >= 0");
  const double complexity = R == 0.0 ? 0.0 : 2.0 * rademacher_bound(R, spec.N);
  return complexity + 2.0 * spec.Delta * std::sqrt(2.0 * std::log(1.0 / spec.delta) / spec.N) +
         spec.phi;
}

BoundReport bound_report(const BoundSpec& spec, CoverVariant variant) {
  BoundReport r;
  r.cover = covering_bound(spec, variant);
  r.radii = layer_radii(spec, spec.eps);
  r.rademacher = r.cover.R > 0.0 ? rademacher_bound(r.cover.R, spec.N) : 0.0;
  r.gen_bound = generalization_bound(spec, r.cover.R);
  return r;
}

BoundSpec measure_discriminator(const Checkpoint& ck, const std::string& prefix,
                                const std::string& reference_prefix, const Tensor<float>& inputs,
                                const MeasureOptions& options) {
  if (inputs.rank() != 4) throw ShapeError("measure_discriminator: inputs must be [N,C,H,W]");
  const ParamSet params = ParamSet::from_checkpoint(ck, prefix);
  if (params.size() % 2 != 0 || params.size() / 2 != 5)
    throw ConfigError("measure_discriminator: expected 5 discriminator layers under '" + prefix +
                      "', found " + std::to_string(params.size() / 2));
  ParamSet reference;
  if (options.policy == ReferencePolicy::kInit) {
    reference = ParamSet::from_checkpoint(ck, reference_prefix);
    if (!reference.congruent(params))
      throw ConfigError("measure_discriminator: reference weights do not match the discriminator");
  }
  DiscSpec dspec;
  if (ck.manifest.contains("disc")) dspec = disc_spec_from_json(ck.manifest.at("disc"));

  BoundSpec spec;
  std::size_t h = inputs.dim(2), w = inputs.dim(3);
  double widest = static_cast<double>(inputs.dim(1) * h * w);
  for (std::size_t l = 0; l < 5; ++l) {
    const Tensor<float>& wt = params.at("l" + std::to_string(l + 1) + ".w");
    if (wt.dim(1) != (l == 0 ? inputs.dim(1) : params.at("l" + std::to_string(l) + ".w").dim(0)))
      throw ShapeError("measure_discriminator: layer " + std::to_string(l + 1) +
                       " does not accept the previous layer's channels");
    const LinearOperator op = conv_operator(wt.cast<double>(), dspec.stride, dspec.pad, h, w);
    const std::uint64_t seed = 17 + l;
    spec.s.push_back(spectral_norm(op, options.power_iters, options.power_tol, seed).value);
    if (options.policy == ReferencePolicy::kZero) {
      spec.b.push_back(spec.s.back());
    } else {
      Tensor<double> diff = wt.cast<double>();
      const Tensor<float>& ref = reference.at("l" + std::to_string(l + 1) + ".w");
      for (std::size_t i = 0; i < diff.numel(); ++i) diff[i] -= ref[i];
      const LinearOperator dop = conv_operator(std::move(diff), dspec.stride, dspec.pad, h, w);
      spec.b.push_back(spectral_norm(dop, options.power_iters, options.power_tol, seed).value);
    }
    const bool last = l == 4;
    spec.rho.push_back(last ? (options.tight_sigmoid ? 0.25 : 1.0)
                            : std::max(1.0, dspec.slope));
    h = conv_out_size(h, dspec.kernel, dspec.stride, dspec.pad);
    w = conv_out_size(w, dspec.kernel, dspec.stride, dspec.pad);
    widest = std::max(widest, static_cast<double>(wt.dim(0) * h * w));
  }
  // A layer whose weights are exactly zero has no operator norm; keep s positive.
  for (auto& s : spec.s) s = std::max(s, 1e-12);
  spec.W = widest;
  double sq = 0.0;
  for (float v : inputs.data()) sq += static_cast<double>(v) * v;
  spec.X_norm = std::sqrt(sq);
  spec.N = static_cast<double>(inputs.dim(0));
  spec.Delta = 1.0;
  spec.eps = options.eps;
  spec.delta = options.delta;
  spec.phi = options.phi;
  return spec;
}

nlohmann::json to_json(const BoundSpec& s) {
  return {{"L", s.layers()}, {"s", s.s},         {"b", s.b},         {"rho", s.rho},
          {"W", s.W},        {"X_norm", s.X_norm}, {"eps", s.eps},   {"N", s.N},
          {"Delta", s.Delta}, {"delta", s.delta}, {"phi", s.phi}};
}

nlohmann::json to_json(const BoundReport& r) {
  return {{"log_cover", r.cover.log_cover},
          {"R", r.cover.R},
          {"alpha", r.radii.alpha},
          {"radii", r.radii.radii},
          {"uniform_radii_fallback", r.radii.uniform_fallback},
          {"rademacher", r.rademacher},
          {"gen_bound", r.gen_bound}};
}

}  // namespace segan
