#pragma once

// Central finite-difference gradient checks, run in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fusionprobe/autodiff.hpp"
#include "fusionprobe/clip.hpp"
#include "fusionprobe/model.hpp"
#include "fusionprobe/params.hpp"

namespace fprobe {

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  /// Location of the worst entry, e.g. "head.block0.wq[17]".
  std::string worst;

  bool passed(double tol) const { return max_relative_error < tol; }
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
/// gradient is ~0 from dividing rounding noise by ~0.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {

inline void record_error(GradCheckResult& r, double analytic, double numeric, const std::string& where) {
  require(std::isfinite(analytic) && std::isfinite(numeric), ErrorCode::kNonFinite,
          "non-finite gradient at " + where);
  const double rel = relative_error(analytic, numeric);
  r.max_abs_error = std::max(r.max_abs_error, std::abs(analytic - numeric));
  if (rel > r.max_relative_error || r.checked == 0) {
    r.max_relative_error = rel;
    r.worst = where;
  }
  ++r.checked;
}

}  // namespace detail

using ScalarFn = std::function<Var<double>(Graph<double>&, Var<double>)>;

/// Compares d f / d x from backward() with central differences of step `eps`.
/// `f` must return a scalar.
inline GradCheckResult grad_check(const ScalarFn& f, const Tensor<double>& x, double eps = 1e-4) {
  Tensor<double> analytic;
  {
    Graph<double> g;
    auto xv = g.leaf(x, true);
    g.backward(f(g, xv));
    analytic = g.grad(xv);
  }
  auto eval = [&](const Tensor<double>& at) {
    Graph<double> g;
    return f(g, g.leaf(at, false)).value().item();
  };
  GradCheckResult r;
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = eval(probe);
    probe[i] = orig - eps;
    const double down = eval(probe);
    probe[i] = orig;
    detail::record_error(r, analytic[i], (up - down) / (2 * eps), "x[" + std::to_string(i) + "]");
  }
  return r;
}

using ParamLossFn = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

/// Gradient check of a scalar loss with respect to every entry of every
/// parameter in `store`.
inline GradCheckResult grad_check_parameters(ParameterStore<double>& store, const ParamLossFn& loss, double eps = 1e-4) {
  std::vector<Tensor<double>> analytic;
  {
    Graph<double> g;
    auto p = store.bind(g, true);
    g.backward(loss(g, p));
    for (const auto& v : p) analytic.push_back(g.grad(v));
  }
  auto eval = [&] {
    Graph<double> g;
    return loss(g, store.bind(g, false)).value().item();
  };
  GradCheckResult r;
  for (std::size_t k = 0; k < store.size(); ++k) {
    auto& value = store[k].value;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double orig = value[i];
      value[i] = orig + eps;
      const double up = eval();
      value[i] = orig - eps;
      const double down = eval();
      value[i] = orig;
      detail::record_error(r, analytic[k][i], (up - down) / (2 * eps),
                           store[k].name + "[" + std::to_string(i) + "]");
    }
  }
  return r;
}

/// Fills every parameter with N(0, stddev^2) values. Gradient checks at the
/// zero-initialised output projections would leave most gradients at zero.
inline void randomize_parameters(ParameterStore<double>& store, std::uint64_t seed, double stddev = 0.5) {
  std::mt19937_64 rng(seed);
  for (auto& p : store) p.value = normal_tensor<double>(p.value.shape(), stddev, rng);
}

/// Full model (fusion head + probe + cross-entropy) gradient check on one clip.
inline GradCheckResult grad_check_model(Model<double>& model, const TokenClip& clip, double eps = 1e-4) {
  return grad_check_parameters(model.params(), [&](Graph<double>&, const std::vector<Var<double>>& p) {
    return cross_entropy(model.forward(p, clip).logits, clip.class_id);
  }, eps);
}

struct GradSuiteEntry {
  FusionKind kind;
  std::uint64_t seed;
  GradCheckResult result;
};

struct GradSuiteOptions {
  std::size_t frames = 4;
  std::size_t tokens = 5;
  std::size_t dim = 8;
  std::size_t classes = 3;
  std::size_t num_heads = 2;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  double eps = 1e-4;
};

/// Random clip [T, N, D] with a CLS token at index 0.
inline TokenClip random_clip(std::size_t frames, std::size_t tokens, std::size_t dim, std::size_t classes,
                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TokenClip clip;
  clip.tokens = normal_tensor<float>({frames, tokens, dim}, 1.0, rng);
  clip.cls_index = 0;
  clip.class_id = std::uniform_int_distribution<std::size_t>(0, classes - 1)(rng);
  clip.video_id = "random" + std::to_string(seed);
  return clip;
}

/// Every fusion head composed with the probe and cross-entropy, checked at
/// randomised parameters for each seed.
inline std::vector<GradSuiteEntry> gradient_suite(const GradSuiteOptions& opts = {}) {
  std::vector<GradSuiteEntry> out;
  for (FusionKind kind : kAllFusionKinds) {
    for (std::uint64_t seed : opts.seeds) {
      ModelConfig mc;
      mc.head.kind = kind;
      mc.head.model_dim = opts.dim;
      mc.head.num_heads = opts.num_heads;
      mc.head.max_frames = opts.frames;
      mc.head.seed = seed;
      for (std::size_t c = 0; c < opts.classes; ++c) mc.classes.push_back("c" + std::to_string(c));
      Model<double> model(mc);
      randomize_parameters(model.params(), seed + 1000);
      const auto clip = random_clip(opts.frames, opts.tokens, opts.dim, opts.classes, seed + 2000);
      out.push_back({kind, seed, grad_check_model(model, clip, opts.eps)});
    }
  }
  return out;
}

}  // namespace fprobe
