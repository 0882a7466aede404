#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "osuda/layers.hpp"

namespace osuda {

// SGD with heavy-ball momentum: buf = m * buf + g; p -= lr * buf.
template <typename Scalar>
class Sgd {
 public:
  Sgd() = default;
  Sgd(ParameterList<Scalar> params, double lr, double momentum = 0.9, double weight_decay = 0.0)
      : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) buffers_.emplace_back(p.var.shape());
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Var<Scalar> p = params_[i].var;
      if (!p.has_grad()) continue;
      auto g = p.grad().array();
      if (weight_decay_ != 0.0) g += static_cast<Scalar>(weight_decay_) * p.value().array();
      buffers_[i].array() = static_cast<Scalar>(momentum_) * buffers_[i].array() + g;
      p.mutable_value().array() -= static_cast<Scalar>(lr_) * buffers_[i].array();
    }
  }

  void zero_grad() { zero_grads(params_); }
  double lr() const { return lr_; }

  // Named state tensors for checkpointing.
  std::vector<NamedBuffer<Scalar>> state() {
    std::vector<NamedBuffer<Scalar>> out;
    for (std::size_t i = 0; i < params_.size(); ++i) out.push_back({"momentum." + params_[i].name, &buffers_[i]});
    return out;
  }

 private:
  ParameterList<Scalar> params_;
  std::vector<Tensor<Scalar>> buffers_;
  double lr_ = 1e-4;
  double momentum_ = 0.9;
  double weight_decay_ = 0.0;
};

// Adam with decoupled weight decay.
template <typename Scalar>
class AdamW {
 public:
  AdamW() = default;
  AdamW(ParameterList<Scalar> params, double lr, double weight_decay = 0.01, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.var.shape());
      v_.emplace_back(p.var.shape());
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const auto b1 = static_cast<Scalar>(beta1_);
    const auto b2 = static_cast<Scalar>(beta2_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Var<Scalar> p = params_[i].var;
      if (!p.has_grad()) continue;
      const auto& g = p.grad().array();
      auto& value = p.mutable_value().array();
      value *= static_cast<Scalar>(1.0 - lr_ * weight_decay_);
      m_[i].array() = b1 * m_[i].array() + (Scalar(1) - b1) * g;
      v_[i].array() = b2 * v_[i].array() + (Scalar(1) - b2) * g.square();
      const auto m_hat = m_[i].array() / static_cast<Scalar>(c1);
      const auto v_hat = v_[i].array() / static_cast<Scalar>(c2);
      value -= static_cast<Scalar>(lr_) * m_hat / (v_hat.sqrt() + static_cast<Scalar>(eps_));
    }
  }

  void zero_grad() { zero_grads(params_); }
  double lr() const { return lr_; }
  long long steps() const { return t_; }
  void set_steps(long long t) { t_ = t; }

  std::vector<NamedBuffer<Scalar>> state() {
    std::vector<NamedBuffer<Scalar>> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.push_back({"m." + params_[i].name, &m_[i]});
      out.push_back({"v." + params_[i].name, &v_[i]});
    }
    return out;
  }

 private:
  ParameterList<Scalar> params_;
  std::vector<Tensor<Scalar>> m_, v_;
  double lr_ = 1e-3;
  double weight_decay_ = 0.01;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  long long t_ = 0;
};

}  // namespace osuda
