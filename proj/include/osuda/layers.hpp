#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "osuda/ops.hpp"

namespace osuda {

template <typename Scalar>
struct NamedParameter {
  std::string name;
  Var<Scalar> var;
};

template <typename Scalar>
using ParameterList = std::vector<NamedParameter<Scalar>>;

// Non-trainable state that still belongs to a model (batch-norm statistics).
template <typename Scalar>
struct NamedBuffer {
  std::string name;
  Tensor<Scalar>* tensor;
};

template <typename Scalar>
using BufferList = std::vector<NamedBuffer<Scalar>>;

using Rng = std::mt19937_64;

// Normal(0, stddev) tensor. Draws happen in double so float and double models
// built from the same seed hold the same values up to rounding.
template <typename Scalar>
Tensor<Scalar> normal_tensor(const Shape& shape, double stddev, Rng& rng) {
  Tensor<Scalar> t(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  for (Index i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar>
struct Conv2dLayer {
  Var<Scalar> weight;
  Var<Scalar> bias;  // may be undefined
  Conv2dOptions options;

  // Fan-in initialization, weight std = gain / sqrt(fan_in), zero bias. The
  // default gain is the Kaiming value for ReLU.
  static Conv2dLayer create(Index in_channels, Index out_channels, Index kernel, Conv2dOptions options, Rng& rng,
                            bool trainable = true, bool with_bias = true, double gain = std::sqrt(2.0)) {
    Conv2dLayer layer;
    const double fan_in = static_cast<double>(in_channels * kernel * kernel);
    layer.weight = Var<Scalar>(
        normal_tensor<Scalar>(Shape{out_channels, in_channels, kernel, kernel}, gain / std::sqrt(fan_in), rng),
        trainable);
    if (with_bias) layer.bias = Var<Scalar>(Tensor<Scalar>(Shape{1, out_channels, 1, 1}), trainable);
    layer.options = options;
    return layer;
  }

  // Same-size padding for odd kernels (and the k4/s2 halving convolutions).
  static Conv2dOptions same(Index kernel, Index stride = 1, Padding padding = Padding::Zero) {
    return Conv2dOptions{stride, (kernel - 1) / 2, padding};
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const { return conv2d(x, weight, bias, options); }

  Index out_channels() const { return weight.shape().n; }

  void collect(const std::string& prefix, ParameterList<Scalar>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

template <typename Scalar>
struct LinearLayer {
  Var<Scalar> weight;
  Var<Scalar> bias;

  static LinearLayer create(Index in_features, Index out_features, Rng& rng) {
    LinearLayer layer;
    layer.weight = Var<Scalar>(
        normal_tensor<Scalar>(Shape{out_features, in_features, 1, 1}, std::sqrt(1.0 / in_features), rng), true);
    layer.bias = Var<Scalar>(Tensor<Scalar>(Shape{1, out_features, 1, 1}), true);
    return layer;
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, ParameterList<Scalar>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename Scalar>
struct BatchNormLayer {
  Var<Scalar> gamma;
  Var<Scalar> beta;
  // Heap-held so that layer copies inside containers keep stable addresses.
  std::shared_ptr<BatchNormStats<Scalar>> stats;

  static BatchNormLayer create(Index channels) {
    BatchNormLayer layer;
    layer.gamma = Var<Scalar>(Tensor<Scalar>(Shape{1, channels, 1, 1}, Scalar(1)), true);
    layer.beta = Var<Scalar>(Tensor<Scalar>(Shape{1, channels, 1, 1}), true);
    layer.stats = std::make_shared<BatchNormStats<Scalar>>(
        BatchNormStats<Scalar>{Tensor<Scalar>(Shape{1, channels, 1, 1}), Tensor<Scalar>(Shape{1, channels, 1, 1}, Scalar(1))});
    return layer;
  }

  Var<Scalar> operator()(const Var<Scalar>& x, bool training) const {
    return batch_norm(x, gamma, beta, *stats, training);
  }

  void collect(const std::string& prefix, ParameterList<Scalar>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
  void collect_buffers(const std::string& prefix, BufferList<Scalar>& out) const {
    out.push_back({prefix + ".running_mean", &stats->mean});
    out.push_back({prefix + ".running_var", &stats->var});
  }
};

// Deep copy of a parameter list's values into fresh, detached tensors.
template <typename Scalar>
std::vector<Tensor<Scalar>> snapshot_values(const ParameterList<Scalar>& params) {
  std::vector<Tensor<Scalar>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.var.value());
  return out;
}

template <typename Scalar>
void zero_grads(const ParameterList<Scalar>& params) {
  for (const auto& p : params) {
    Var<Scalar> v = p.var;
    v.zero_grad();
  }
}

template <typename Scalar>
double grad_norm(const ParameterList<Scalar>& params) {
  double sq = 0;
  for (const auto& p : params) {
    if (p.var.has_grad()) sq += p.var.grad().array().template cast<double>().square().sum();
  }
  return std::sqrt(sq);
}

template <typename Scalar>
Index parameter_count(const ParameterList<Scalar>& params) {
  Index n = 0;
  for (const auto& p : params) n += p.var.value().numel();
  return n;
}

// Replaces parameter values by name-matched tensors. Shapes must agree.
template <typename Scalar>
void assign_values(const ParameterList<Scalar>& params, const std::vector<Tensor<Scalar>>& values) {
  if (params.size() != values.size()) throw ShapeError("assign_values: count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var<Scalar> v = params[i].var;
    if (!(v.shape() == values[i].shape())) throw ShapeError("assign_values: shape mismatch for " + params[i].name);
    v.mutable_value() = values[i];
  }
}

}  // namespace osuda
