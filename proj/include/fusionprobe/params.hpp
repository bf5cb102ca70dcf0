#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "fusionprobe/autodiff.hpp"
#include "fusionprobe/error.hpp"
#include "fusionprobe/tensor.hpp"

namespace fprobe {

template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  /// Whether AdamW's decoupled weight decay applies (false for biases, norm
  /// gains and position embeddings).
  bool decay = true;
};

/// Ordered, named collection of trainable tensors. Order is registration
/// order and is what checkpoints, optimizers and gradient vectors follow.
template <typename Scalar>
class ParameterStore {
 public:
  std::size_t add(std::string name, Tensor<Scalar> value, bool decay) {
    for (const auto& p : params_)
      require(p.name != name, ErrorCode::kInvalidArgument, [&] { return "duplicate parameter " + name; });
    params_.push_back({std::move(name), std::move(value), decay});
    return params_.size() - 1;
  }

  std::size_t size() const noexcept { return params_.size(); }
  Parameter<Scalar>& operator[](std::size_t i) { return params_.at(i); }
  const Parameter<Scalar>& operator[](std::size_t i) const { return params_.at(i); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return i;
    throw Error(ErrorCode::kInvalidArgument, "no parameter named " + name);
  }

  Tensor<Scalar>& value(const std::string& name) { return params_[index_of(name)].value; }
  const Tensor<Scalar>& value(const std::string& name) const { return params_[index_of(name)].value; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// Places every parameter on `graph` as a leaf, in registration order.
  std::vector<Var<Scalar>> bind(Graph<Scalar>& graph, bool requires_grad) const {
    std::vector<Var<Scalar>> vars;
    vars.reserve(params_.size());
    for (const auto& p : params_) vars.push_back(graph.leaf(p.value, requires_grad));
    return vars;
  }

  template <typename Other>
  ParameterStore<Other> cast() const {
    ParameterStore<Other> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<Other>(), p.decay);
    return out;
  }

  friend bool operator==(const ParameterStore& a, const ParameterStore& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i)
      if (a.params_[i].name != b.params_[i].name || !(a.params_[i].value == b.params_[i].value)) return false;
    return true;
  }

 private:
  std::vector<Parameter<Scalar>> params_;
};

/// Uniform(-bound, bound) entries.
template <typename Scalar>
Tensor<Scalar> uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  Tensor<Scalar> t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar>
Tensor<Scalar> normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor<Scalar> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = static_cast<Scalar>(dist(rng));
  return t;
}

/// Kaiming-style fan-in scaled uniform init, bound 1/sqrt(fan_in).
template <typename Scalar>
Tensor<Scalar> fan_in_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  return uniform_tensor<Scalar>(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

}  // namespace fprobe
