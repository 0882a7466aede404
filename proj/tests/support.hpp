#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "osuda/ops.hpp"

namespace osuda::testing {

inline Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(shape);
  for (Index i = 0; i < t.numel(); ++i) t.data()[i] = dist(rng);
  return t;
}

// Relative error ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12)
// between the backpropagated gradient of f at x and central differences.
inline double gradient_error(const std::function<Var<double>(const Var<double>&)>& f, const Tensor<double>& x,
                             double h = 1e-6) {
  Var<double> v(x, true);
  Var<double> out = f(v);
  backward(out);
  const Tensor<double> analytic = v.has_grad() ? v.grad() : Tensor<double>(x.shape());
  Tensor<double> numeric(x.shape());
  for (Index i = 0; i < x.numel(); ++i) {
    Tensor<double> plus = x, minus = x;
    plus.data()[i] += h;
    minus.data()[i] -= h;
    NoGradGuard guard;
    numeric.data()[i] = (f(Var<double>(plus)).item() - f(Var<double>(minus)).item()) / (2 * h);
  }
  const double diff = (analytic.array() - numeric.array()).matrix().norm();
  const double scale = analytic.array().matrix().norm() + numeric.array().matrix().norm();
  return diff / std::max(scale, 1e-12);
}

// Same relative error for the gradient of loss() with respect to a parameter
// tensor, restricted to n_probe randomly chosen coordinates.
inline double parameter_gradient_error(Var<double> param, const std::function<Var<double>()>& loss, int n_probe,
                                       std::mt19937_64& rng, double h = 1e-6) {
  param.zero_grad();
  backward(loss());
  const Tensor<double> grad = param.has_grad() ? param.grad() : Tensor<double>(param.shape());
  param.zero_grad();
  std::uniform_int_distribution<Index> pick(0, param.value().numel() - 1);
  double diff = 0, a_norm = 0, n_norm = 0;
  NoGradGuard guard;
  for (int k = 0; k < n_probe; ++k) {
    const Index i = pick(rng);
    const double original = param.value().data()[i];
    param.mutable_value().data()[i] = original + h;
    const double plus = loss().item();
    param.mutable_value().data()[i] = original - h;
    const double minus = loss().item();
    param.mutable_value().data()[i] = original;
    const double numeric = (plus - minus) / (2 * h);
    diff += (grad.data()[i] - numeric) * (grad.data()[i] - numeric);
    a_norm += grad.data()[i] * grad.data()[i];
    n_norm += numeric * numeric;
  }
  return std::sqrt(diff) / std::max(std::sqrt(a_norm) + std::sqrt(n_norm), 1e-6);
}

// Scalar probe of a tensor-valued op: mean squared distance to a fixed
// tensor of the same shape.
inline Var<double> probe(const Var<double>& out, const Tensor<double>& reference) {
  return squared_error(out, Var<double>(reference), Reduction::ElementMean);
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("osuda-" + tag + "-" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace osuda::testing
