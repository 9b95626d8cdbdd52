#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "segan/graph.hpp"
#include "segan/losses.hpp"

using namespace segan;

namespace {

constexpr int kSeeds = 20;
constexpr double kTol = 1e-4;

Tensor64 randn(const Shape& s, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Tensor64 t(s);
  for (auto& v : t.vec()) v = nd(rng);
  return t;
}

// Values bounded away from zero, for kinked operators.
Tensor64 away_from_zero(const Shape& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.1, 2.0);
  std::bernoulli_distribution sign(0.5);
  Tensor64 t(s);
  for (auto& v : t.vec()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

// Largest coordinate error relative to the largest gradient magnitude of the tensor.
double rel_err(const Tensor64& analytic, const Tensor64& numeric) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.numel(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / std::max(scale, 1e-12);
}

// Worst relative error between backward and central differences over every
// requires_grad leaf.
double max_grad_error(const Graph& g, const Feeds<double>& feeds, NodeId loss, double h) {
  auto grads = backward<double>(g, feeds, loss);
  double worst = 0.0;
  for (const auto& [leaf, grad] : grads)
    worst = std::max(worst, rel_err(grad, finite_diff_grad(g, feeds, loss, leaf, h)));
  return worst;
}

// loss = sum(op(x) * r) for a fixed random r, so every output coordinate matters.
struct Probe {
  Graph g;
  Feeds<double> feeds;
  std::mt19937_64 rng;
  explicit Probe(int seed) : rng(static_cast<std::uint64_t>(seed) * 7919 + 1) {}

  NodeId param(const Shape& s, Tensor64 v) {
    NodeId id = g.leaf("p" + std::to_string(g.size()), s, true);
    feeds[id] = std::move(v);
    return id;
  }
  NodeId param(const Shape& s, double scale = 1.0) { return param(s, randn(s, rng, scale)); }
  NodeId constant(const Shape& s, Tensor64 v) {
    NodeId id = g.leaf("c" + std::to_string(g.size()), s, false);
    feeds[id] = std::move(v);
    return id;
  }
  NodeId project(NodeId out) {
    const Shape s = g.node(out).shape;
    return g.reduce_sum(g.mul(out, constant(s, randn(s, rng))));
  }
};

void check_op(const char* name, const std::function<NodeId(Probe&)>& build, double h = 1e-4) {
  double worst = 0.0;
  for (int seed = 0; seed < kSeeds; ++seed) {
    Probe p(seed);
    NodeId loss = build(p);
    worst = std::max(worst, max_grad_error(p.g, p.feeds, loss, h));
  }
  INFO(name << " worst relative error " << worst);
  CHECK(worst < kTol);
}

Tensor64 one_hot_random(std::size_t n, std::size_t c, std::size_t h, std::size_t w,
                        std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, c - 1);
  Tensor64 t({n, c, h, w}, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) t.at(b, pick(rng), i, j) = 1.0;
  return t;
}

}  // namespace

TEST_CASE("finite differences of x^3 at 2") {
  Graph g;
  NodeId x = g.leaf("x", {1}, true);
  NodeId y = g.reduce_sum(g.mul(g.square(x), x));
  Tensor64 fd = finite_diff_grad(g, {{x, Tensor64({1}, 2.0)}}, y, x, 1e-4);
  CHECK(std::abs(fd[0] - 3.0 * 2.0 * 2.0) < 1e-6);
}

TEST_CASE("|x| at 0 is flagged non-smooth") {
  Graph g;
  NodeId x = g.leaf("x", {1}, true);
  NodeId y = g.reduce_sum(g.abs(x));
  Feeds<double> at_zero{{x, Tensor64({1}, 0.0)}};
  const Tensor64 analytic = backward<double>(g, at_zero, y).at(x);
  const Tensor64 numeric = finite_diff_grad(g, at_zero, y, x, 1e-4);
  CHECK(numeric[0] == doctest::Approx(0.0));
  CHECK(rel_err(analytic, numeric) > kTol);
  Feeds<double> away{{x, Tensor64({1}, 0.5)}};
  CHECK(max_grad_error(g, away, y, 1e-4) < kTol);
}

TEST_CASE("elementwise operators") {
  const Shape s{2, 3, 2, 2};
  check_op("add", [&](Probe& p) { return p.project(p.g.add(p.param(s), p.param(s))); });
  check_op("sub", [&](Probe& p) { return p.project(p.g.sub(p.param(s), p.param(s))); });
  check_op("mul", [&](Probe& p) { return p.project(p.g.mul(p.param(s), p.param(s))); });
  check_op("scale", [&](Probe& p) { return p.project(p.g.scale(p.param(s), -1.7)); });
  check_op("add_scalar", [&](Probe& p) { return p.project(p.g.add_scalar(p.param(s), 0.3)); });
  check_op("tanh", [&](Probe& p) { return p.project(p.g.tanh(p.param(s))); });
  check_op("sigmoid", [&](Probe& p) { return p.project(p.g.sigmoid(p.param(s, 3.0))); });
  check_op("square", [&](Probe& p) { return p.project(p.g.square(p.param(s))); });
  check_op("relu", [&](Probe& p) {
    return p.project(p.g.relu(p.param(s, away_from_zero(s, p.rng))));
  });
  check_op("leaky_relu", [&](Probe& p) {
    return p.project(p.g.leaky_relu(p.param(s, away_from_zero(s, p.rng)), 0.2));
  });
  check_op("abs", [&](Probe& p) { return p.project(p.g.abs(p.param(s, away_from_zero(s, p.rng)))); });
  check_op("log", [&](Probe& p) {
    Tensor64 v(s);
    std::uniform_real_distribution<double> u(0.2, 2.0);
    for (auto& x : v.vec()) x = u(p.rng);
    return p.project(p.g.log(p.param(s, std::move(v))));
  });
  check_op("clamp", [&](Probe& p) {
    // Keep samples off the clamp boundaries at +-0.5.
    Tensor64 v(s);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& x : v.vec()) {
      do x = u(p.rng);
      while (std::abs(std::abs(x) - 0.5) < 0.05);
    }
    return p.project(p.g.clamp(p.param(s, std::move(v)), -0.5, 0.5));
  });
}

TEST_CASE("structural operators") {
  check_op("matmul", [](Probe& p) { return p.project(p.g.matmul(p.param({3, 4}), p.param({4, 2}))); });
  check_op("softmax", [](Probe& p) { return p.project(p.g.softmax(p.param({2, 4, 3, 2}, 2.0))); });
  check_op("upsample", [](Probe& p) { return p.project(p.g.upsample(p.param({1, 2, 3, 2}), 2)); });
  check_op("reduce_mean", [](Probe& p) { return p.g.scale(p.g.reduce_mean(p.param({2, 5})), 3.0); });
  check_op("reduce_sum", [](Probe& p) { return p.g.reduce_sum(p.g.square(p.param({2, 5}))); });
  check_op("concat axis 0", [](Probe& p) {
    return p.project(p.g.concat({p.param({1, 2, 2, 2}), p.param({2, 2, 2, 2})}, 0));
  });
  check_op("concat axis 1", [](Probe& p) {
    return p.project(p.g.concat({p.param({2, 1, 2, 2}), p.param({2, 3, 2, 2})}, 1));
  });
  check_op("slice", [](Probe& p) { return p.project(p.g.slice(p.param({4, 2, 2, 2}), 1, 3)); });
  check_op("gather", [](Probe& p) {
    Tensor64 idx({2, 3, 3});
    std::uniform_int_distribution<int> pick(0, 3);
    for (auto& v : idx.vec()) v = pick(p.rng);
    return p.project(p.g.gather(p.param({2, 4, 3, 3}), p.constant({2, 3, 3}, idx)));
  });
}

TEST_CASE("conv2d for every stride and padding used") {
  for (std::size_t stride : {1u, 2u})
    for (std::size_t pad : {0u, 1u})
      for (std::size_t k : {1u, 3u, 4u}) {
        INFO("stride " << stride << " pad " << pad << " kernel " << k);
        check_op("conv2d", [&](Probe& p) {
          NodeId x = p.param({2, 3, 8, 8});
          NodeId w = p.param({4, 3, k, k}, 0.5);
          NodeId b = p.param({4});
          return p.project(p.g.conv2d(x, w, b, stride, pad));
        });
      }
}

TEST_CASE("random 3-layer conv net against central differences") {
  double worst = 0.0;
  int redrawn = 0;
  for (int seed = 0; seed < kSeeds; ++seed) {
    for (int attempt = 0;; ++attempt) {
      Probe p(seed * 1000 + attempt);
      NodeId x = p.param({1, 2, 6, 6});
      NodeId a1 = p.g.conv2d(x, p.param({4, 2, 3, 3}, 0.5), p.param({4}, 0.1), 1, 1);
      NodeId a2 = p.g.conv2d(p.g.leaky_relu(a1, 0.2), p.param({3, 4, 4, 4}, 0.3),
                             p.param({3}, 0.1), 2, 1);
      NodeId logits =
          p.g.conv2d(p.g.leaky_relu(a2, 0.2), p.param({4, 3, 1, 1}, 0.5), p.param({4}, 0.1), 1, 0);
      NodeId y = p.constant({1, 4, 3, 3}, one_hot_random(1, 4, 3, 3, p.rng));
      NodeId loss = loss::cross_entropy(p.g, logits, y);

      // Redraw samples whose pre-activations sit near the leaky-relu kink.
      auto values = forward<double>(p.g, p.feeds);
      double margin = 1e9;
      for (NodeId pre : {a1, a2})
        for (double v : values.at(pre).vec()) margin = std::min(margin, std::abs(v));
      if (margin < 0.005) {
        ++redrawn;
        continue;
      }
      worst = std::max(worst, max_grad_error(p.g, p.feeds, loss, 1e-3));
      break;
    }
  }
  INFO("worst relative error " << worst << ", redrawn " << redrawn);
  CHECK(worst < kTol);
}

TEST_CASE("every loss against central differences") {
  const Shape s{2, 4, 3, 3};
  const Shape ds{2, 1, 2, 2};
  auto onehot = [&](Probe& p) { return p.constant(s, one_hot_random(2, 4, 3, 3, p.rng)); };
  auto probs = [&](Probe& p) { return p.g.softmax(p.param(s, 1.5)); };

  check_op("seg_loss single", [&](Probe& p) {
    return loss::seg_loss(p.g, p.param(s, 1.5), std::nullopt, onehot(p));
  });
  check_op("seg_loss with transferred", [&](Probe& p) {
    return loss::seg_loss(p.g, p.param(s, 1.5), p.param(s, 1.5), onehot(p));
  });
  check_op("consistency_loss", [&](Probe& p) {
    return loss::consistency_loss(p.g, probs(p), probs(p));
  });
  check_op("adversarial_loss", [&](Probe& p) {
    return loss::adversarial_loss(p.g, p.param(ds, 2.0), std::nullopt, p.param(ds, 2.0));
  });
  check_op("adversarial_loss with transferred", [&](Probe& p) {
    return loss::adversarial_loss(p.g, p.param(ds, 2.0), p.param(ds, 2.0), p.param(ds, 2.0));
  });
  check_op("adversarial_target_term", [&](Probe& p) {
    return loss::adversarial_target_term(p.g, p.param(ds, 2.0));
  });
  check_op("self_train_loss", [&](Probe& p) {
    return loss::self_train_loss(p.g, p.param(s, 1.5), onehot(p));
  });
  check_op("style_loss", [&](Probe& p) {
    return loss::style_loss(p.g, p.param(ds, 2.0), p.param(ds, 2.0), p.param(ds, 2.0));
  });
  check_op("semantic_consistency_loss", [&](Probe& p) {
    return loss::semantic_consistency_loss(p.g, p.param(s, 1.5), onehot(p));
  });
  check_op("perceptual_loss", [&](Probe& p) {
    return loss::perceptual_loss(p.g, p.param({2, 5, 3, 3}), p.param({2, 5, 3, 3}));
  });
  check_op("segan_objective", [&](Probe& p) {
    const NodeId y = onehot(p);
    const NodeId seg = loss::seg_loss(p.g, p.param(s, 1.5), std::nullopt, y);
    const NodeId con = loss::consistency_loss(p.g, probs(p), probs(p));
    const NodeId adv = loss::adversarial_loss(p.g, p.param(ds), std::nullopt, p.param(ds));
    return loss::segan_objective(p.g, loss::LossWeights{}, seg, con, adv);
  });
  check_op("tgstn_objective", [&](Probe& p) {
    const NodeId style = loss::style_loss(p.g, p.param(ds), p.param(ds), p.param(ds));
    const NodeId sem = loss::semantic_consistency_loss(p.g, p.param(s), onehot(p));
    const NodeId per = loss::perceptual_loss(p.g, p.param({2, 5, 3, 3}), p.param({2, 5, 3, 3}));
    return loss::tgstn_objective(p.g, loss::LossWeights{}, style, sem, per);
  });
}
