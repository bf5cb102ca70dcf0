#pragma once

#include <random>
#include <string>
#include <vector>

#include "fusionprobe/autodiff.hpp"
#include "fusionprobe/params.hpp"

namespace fprobe {

struct ProbeConfig {
  std::size_t input_dim = 0;
  std::size_t class_count = 0;
  /// Inserts a hidden D->D linear layer + ReLU before the classifier.
  bool relu_variant = false;
};

/// Linear classifier over a fused feature. Weights are stored [out, in].
template <typename Scalar>
class Probe {
 public:
  using V = Var<Scalar>;

  Probe(const ProbeConfig& cfg, ParameterStore<Scalar>& store, std::mt19937_64& rng) : cfg_(cfg) {
    require(cfg_.input_dim > 0 && cfg_.class_count > 0, ErrorCode::kInvalidArgument,
            "probe needs positive input dim and class count");
    const std::size_t D = cfg_.input_dim, C = cfg_.class_count;
    if (cfg_.relu_variant) {
      hidden_w_ = store.add("probe.hidden.w", fan_in_uniform<Scalar>({D, D}, D, rng), true);
      hidden_b_ = store.add("probe.hidden.b", Tensor<Scalar>({D}), false);
    }
    w_ = store.add("probe.w", fan_in_uniform<Scalar>({C, D}, D, rng), true);
    b_ = store.add("probe.b", Tensor<Scalar>({C}), false);
  }

  const ProbeConfig& config() const { return cfg_; }

  /// Feature [D] -> logits [C].
  V logits(const std::vector<V>& p, V feature) const {
    require(feature.value().size() == cfg_.input_dim, ErrorCode::kDimension,
            [&] { return "probe expects a feature of size " + std::to_string(cfg_.input_dim) + ", got " +
                shape_string(feature.shape()); });
    V x = reshape(feature, {1, cfg_.input_dim});
    if (cfg_.relu_variant) x = relu(add(matmul(x, permute(p[hidden_w_], {1, 0})), p[hidden_b_]));
    V z = add(matmul(x, permute(p[w_], {1, 0})), p[b_]);
    return reshape(z, {cfg_.class_count});
  }

 private:
  ProbeConfig cfg_;
  std::size_t hidden_w_ = 0, hidden_b_ = 0, w_ = 0, b_ = 0;
};

}  // namespace fprobe
