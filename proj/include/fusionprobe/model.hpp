#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fusionprobe/clip.hpp"
#include "fusionprobe/fusion.hpp"
#include "fusionprobe/params.hpp"
#include "fusionprobe/probe.hpp"

namespace fprobe {

struct ModelConfig {
  FusionHeadConfig head;
  std::vector<std::string> classes;
  /// Clip-level embeddings skip fusion; the probe sees the clip descriptor.
  bool clip_level = false;

  std::size_t class_count() const { return classes.size(); }
  std::size_t feature_dim() const { return clip_level ? head.model_dim : head.output_dim(); }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"head", to_json(c.head)}, {"classes", c.classes}, {"clip_level", c.clip_level}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.head = head_config_from_json(j.at("head"));
    c.classes = j.at("classes").get<std::vector<std::string>>();
    c.clip_level = j.value("clip_level", false);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kBadFormat, std::string("model config: ") + e.what());
  }
  return c;
}

/// Fusion head + probe sharing one parameter store (head parameters first).
/// Construction is deterministic in `config.head.seed`.
template <typename Scalar>
class Model {
 public:
  using V = Var<Scalar>;

  struct Forward {
    V feature;
    V logits;
  };

  explicit Model(ModelConfig config) : config_(std::move(config)) {
    require(config_.class_count() >= 1, ErrorCode::kInvalidArgument, "model needs at least one class");
    std::mt19937_64 rng(config_.head.seed);
    if (!config_.clip_level) head_.emplace(config_.head, store_, rng);
    probe_.emplace(ProbeConfig{config_.feature_dim(), config_.class_count(), uses_relu_probe(config_.head.kind)},
                   store_, rng);
  }

  const ModelConfig& config() const { return config_; }
  ParameterStore<Scalar>& params() { return store_; }
  const ParameterStore<Scalar>& params() const { return store_; }
  const FusionHead<Scalar>& head() const { return *head_; }
  const Probe<Scalar>& probe() const { return *probe_; }

  /// Fuses one clip into a feature vector. Clip-level input bypasses the head
  /// and returns the clip's single descriptor.
  V fuse(const std::vector<V>& p, const TokenClip& clip, FusionTrace<Scalar>* trace = nullptr,
         std::optional<V> tokens = std::nullopt) const {
    Graph<Scalar>& g = *p.front().graph;
    V x = tokens ? *tokens : g.constant(clip.tokens.template cast<Scalar>());
    if (config_.clip_level || clip.clip_level) {
      require(x.dim(0) == 1, ErrorCode::kDimension, "clip-level input must have T == 1");
      return reshape(FusionHead<Scalar>::descriptor(x, clip.cls_index), {x.dim(2)});
    }
    return head_->forward(p, x, clip.cls_index, trace);
  }

  Forward forward(const std::vector<V>& p, const TokenClip& clip, FusionTrace<Scalar>* trace = nullptr,
                  std::optional<V> tokens = std::nullopt) const {
    V feature = fuse(p, clip, trace, tokens);
    return {feature, probe_->logits(p, feature)};
  }

  Tensor<Scalar> logits(const TokenClip& clip) const {
    Graph<Scalar> g;
    auto p = store_.bind(g, false);
    return forward(p, clip).logits.value();
  }

  Tensor<Scalar> feature(const TokenClip& clip) const {
    Graph<Scalar> g;
    auto p = store_.bind(g, false);
    return fuse(p, clip).value();
  }

  struct LossAndGrad {
    Scalar loss;
    Tensor<Scalar> logits;
    std::vector<Tensor<Scalar>> grads;
  };

  /// Cross-entropy of one clip against its label plus the gradient for
  /// every parameter (store order).
  LossAndGrad loss_and_grad(const TokenClip& clip) const {
    Graph<Scalar> g;
    auto p = store_.bind(g, true);
    auto out = forward(p, clip);
    V loss = cross_entropy(out.logits, clip.class_id);
    g.backward(loss);
    LossAndGrad r{loss.value().item(), out.logits.value(), {}};
    r.grads.reserve(p.size());
    for (const auto& v : p) r.grads.push_back(g.grad(v));
    return r;
  }

  Scalar loss(const TokenClip& clip) const {
    Graph<Scalar> g;
    auto p = store_.bind(g, false);
    return cross_entropy(forward(p, clip).logits, clip.class_id).value().item();
  }

  /// Same architecture and parameter values in another precision.
  template <typename Other>
  Model<Other> cast() const {
    Model<Other> out(config_);
    out.params() = store_.template cast<Other>();
    return out;
  }

  /// Overwrites parameters by name; every parameter must be present with a matching shape.
  void load_params(const ParameterStore<Scalar>& source) {
    for (auto& p : store_) {
      const auto& src = source.value(p.name);
      require(src.shape() == p.value.shape(), ErrorCode::kBadFormat,
              [&] { return "parameter " + p.name + " has shape " + shape_string(src.shape()) + ", expected " +
                  shape_string(p.value.shape()); });
      p.value = src;
    }
  }

 private:
  ModelConfig config_;
  ParameterStore<Scalar> store_;
  std::optional<FusionHead<Scalar>> head_;
  std::optional<Probe<Scalar>> probe_;
};

}  // namespace fprobe
