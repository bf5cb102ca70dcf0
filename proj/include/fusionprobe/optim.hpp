#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "fusionprobe/error.hpp"
#include "fusionprobe/params.hpp"

namespace fprobe {

/// lr(step) = eta_min + (lr0 - eta_min) * (1 + cos(pi * step / total)) / 2
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr0, double eta_min = 0.0) {
  require(total_steps > 0, ErrorCode::kInvalidArgument, "cosine schedule needs total_steps > 0");
  require(step <= total_steps, ErrorCode::kInvalidArgument,
          "step " + std::to_string(step) + " beyond schedule length " + std::to_string(total_steps));
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamWConfig {
  double weight_decay = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// AdamW with decoupled weight decay and bias-corrected moments. Moments are
/// kept in double regardless of the parameter precision.
template <typename Scalar>
class AdamW {
 public:
  AdamW(const ParameterStore<Scalar>& store, AdamWConfig cfg) : cfg_(cfg) {
    for (const auto& p : store) {
      m_.emplace_back(p.value.size(), 0.0);
      v_.emplace_back(p.value.size(), 0.0);
    }
  }

  std::size_t step_count() const noexcept { return t_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

  void step(ParameterStore<Scalar>& store, const std::vector<Tensor<Scalar>>& grads, double lr) {
    require(grads.size() == store.size() && m_.size() == store.size(), ErrorCode::kDimension,
            "gradient list does not match parameter store");
    for (std::size_t k = 0; k < store.size(); ++k) {
      require(grads[k].shape() == store[k].value.shape(), ErrorCode::kDimension,
              "gradient shape mismatch for " + store[k].name);
      if (!grads[k].all_finite()) throw Error(ErrorCode::kNonFinite, "non-finite gradient for " + store[k].name);
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < store.size(); ++k) {
      auto& param = store[k];
      auto w = param.value.data();
      auto g = grads[k].data();
      auto& m = m_[k];
      auto& v = v_[k];
      const double decay = param.decay ? cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        double wi = static_cast<double>(w[i]);
        wi -= lr * decay * wi;
        const double gi = static_cast<double>(g[i]);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double m_hat = m[i] / c1;
        const double v_hat = v[i] / c2;
        wi -= lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
        w[i] = static_cast<Scalar>(wi);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace fprobe
