#pragma once

// Brute-force reference implementations written as plain index loops over
// element accessors. They share no code with the library kernels.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "osuda/tensor.hpp"

namespace osuda::oracle {

inline double at(const Tensor<double>& t, Index n, Index c, Index y, Index x) {
  const Shape s = t.shape();
  return t.data()[((n * s.c + c) * s.h + y) * s.w + x];
}

// [N * C * C] Gram entries, sum_{h,w} F[j,h,w] F[k,h,w] / (C H W).
inline std::vector<double> gram(const Tensor<double>& f) {
  const Shape s = f.shape();
  std::vector<double> g;
  for (Index n = 0; n < s.n; ++n) {
    for (Index j = 0; j < s.c; ++j) {
      for (Index k = 0; k < s.c; ++k) {
        double sum = 0;
        for (Index y = 0; y < s.h; ++y) {
          for (Index x = 0; x < s.w; ++x) sum += at(f, n, j, y, x) * at(f, n, k, y, x);
        }
        g.push_back(sum / static_cast<double>(s.c * s.h * s.w));
      }
    }
  }
  return g;
}

// Batch-mean squared Frobenius distance of Gram matrices; b may have batch 1.
inline double style_loss(const Tensor<double>& a, const Tensor<double>& b) {
  const auto ga = gram(a);
  const auto gb = gram(b);
  const Index n = a.shape().n;
  const Index cc = a.shape().c * a.shape().c;
  double total = 0;
  for (Index i = 0; i < n; ++i) {
    const Index j = b.shape().n == 1 ? 0 : i;
    for (Index e = 0; e < cc; ++e) {
      const double d = ga[static_cast<std::size_t>(i * cc + e)] - gb[static_cast<std::size_t>(j * cc + e)];
      total += d * d;
    }
  }
  return total / static_cast<double>(n);
}

// Batch-mean of ||a - b||^2 / (C H W).
inline double content_loss(const Tensor<double>& a, const Tensor<double>& b) {
  const Shape s = a.shape();
  double total = 0;
  for (Index n = 0; n < s.n; ++n) {
    double sample = 0;
    for (Index c = 0; c < s.c; ++c) {
      for (Index y = 0; y < s.h; ++y) {
        for (Index x = 0; x < s.w; ++x) {
          const double d = at(a, n, c, y, x) - at(b, b.shape().n == 1 ? 0 : n, c, y, x);
          sample += d * d;
        }
      }
    }
    total += sample / static_cast<double>(s.c * s.h * s.w);
  }
  return total / static_cast<double>(s.n);
}

// Non-overlapping k x k mean pooling, truncating the remainder.
inline Tensor<double> avg_pool(const Tensor<double>& t, Index k) {
  const Shape s = t.shape();
  Tensor<double> out(Shape{s.n, s.c, s.h / k, s.w / k});
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      for (Index oy = 0; oy < s.h / k; ++oy) {
        for (Index ox = 0; ox < s.w / k; ++ox) {
          double sum = 0;
          for (Index dy = 0; dy < k; ++dy) {
            for (Index dx = 0; dx < k; ++dx) sum += at(t, n, c, oy * k + dy, ox * k + dx);
          }
          out.data()[((n * s.c + c) * (s.h / k) + oy) * (s.w / k) + ox] = sum / static_cast<double>(k * k);
        }
      }
    }
  }
  return out;
}

inline double avgpool_loss(const Tensor<double>& a, const Tensor<double>& b, Index k) {
  return content_loss(avg_pool(a, k), avg_pool(b, k));
}

// Batch-mean of -log softmax(z)[y], computed directly from exponentials in
// long double.
inline double cross_entropy(const Tensor<double>& logits, const std::vector<int>& labels) {
  const Shape s = logits.shape();
  const Index k = s.c * s.h * s.w;
  long double total = 0;
  for (Index n = 0; n < s.n; ++n) {
    long double denom = 0;
    for (Index j = 0; j < k; ++j) denom += std::exp(static_cast<long double>(logits.data()[n * k + j]));
    total -= std::log(std::exp(static_cast<long double>(logits.data()[n * k + labels[static_cast<std::size_t>(n)]])) /
                      denom);
  }
  return static_cast<double>(total / static_cast<long double>(s.n));
}

// Per-class accuracy in percent from a K x K confusion matrix.
inline std::vector<double> per_class_accuracy(const std::vector<int>& labels, const std::vector<int>& preds, int k) {
  std::vector<std::vector<int>> confusion(static_cast<std::size_t>(k), std::vector<int>(static_cast<std::size_t>(k), 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(preds[i])];
  }
  std::vector<double> acc;
  for (int c = 0; c < k; ++c) {
    int row = 0;
    for (int v : confusion[static_cast<std::size_t>(c)]) row += v;
    acc.push_back(100.0 * confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)] / row);
  }
  return acc;
}

}  // namespace osuda::oracle
