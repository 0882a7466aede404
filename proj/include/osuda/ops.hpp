#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "osuda/autograd.hpp"

// Differentiable tensor operations. Every function takes and returns Var
// handles; see autograd.hpp for how graphs are recorded.

namespace osuda {

enum class Padding { Zero, Reflect };

struct Conv2dOptions {
  Index stride = 1;
  Index pad = 0;
  Padding padding = Padding::Zero;
};

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b)) throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
}

// b may have batch 1 and is then repeated over a's batch.
inline void require_broadcastable(const Shape& a, const Shape& b, const char* what) {
  if (a.c != b.c || a.h != b.h || a.w != b.w || (b.n != a.n && b.n != 1)) {
    throw ShapeError(std::string(what) + ": cannot broadcast " + b.str() + " onto " + a.str());
  }
}

inline Index reflect_index(Index i, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i >= n ? period - i : i;
}

// Input coordinate read by output position o and kernel tap k, or -1 for a
// zero-padded position. Layout [o * kernel + k].
inline std::vector<Index> tap_table(Index in, Index out, Index kernel, Index stride, Index pad, Padding padding) {
  std::vector<Index> table(static_cast<std::size_t>(out * kernel));
  for (Index o = 0; o < out; ++o) {
    for (Index k = 0; k < kernel; ++k) {
      Index i = o * stride - pad + k;
      if (i < 0 || i >= in) i = padding == Padding::Zero ? -1 : reflect_index(i, in);
      table[static_cast<std::size_t>(o * kernel + k)] = i;
    }
  }
  return table;
}

struct ConvGeometry {
  Index channels, height, width, kernel, out_h, out_w;
  std::vector<Index> ytab, xtab;

  Index rows() const { return channels * kernel * kernel; }
  Index cols() const { return out_h * out_w; }
};

template <typename Scalar>
void im2col(const Scalar* in, const ConvGeometry& g, RowMatrix<Scalar>& cols) {
  const Index k = g.kernel;
  for (Index c = 0; c < g.channels; ++c) {
    const Scalar* plane = in + c * g.height * g.width;
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        Scalar* row = cols.data() + ((c * k + ky) * k + kx) * g.cols();
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = g.ytab[static_cast<std::size_t>(oy * k + ky)];
          Scalar* dst = row + oy * g.out_w;
          if (iy < 0) {
            std::fill(dst, dst + g.out_w, Scalar(0));
            continue;
          }
          const Scalar* src = plane + iy * g.width;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = g.xtab[static_cast<std::size_t>(ox * k + kx)];
            dst[ox] = ix < 0 ? Scalar(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const RowMatrix<Scalar>& cols, const ConvGeometry& g, Scalar* out) {
  const Index k = g.kernel;
  for (Index c = 0; c < g.channels; ++c) {
    Scalar* plane = out + c * g.height * g.width;
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        const Scalar* row = cols.data() + ((c * k + ky) * k + kx) * g.cols();
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = g.ytab[static_cast<std::size_t>(oy * k + ky)];
          if (iy < 0) continue;
          const Scalar* src = row + oy * g.out_w;
          Scalar* dst = plane + iy * g.width;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = g.xtab[static_cast<std::size_t>(ox * k + kx)];
            if (ix >= 0) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

struct LerpTable {
  std::vector<Index> lo, hi;
  std::vector<double> t;
};

// Half-pixel-centred bilinear sampling positions (align_corners = false).
inline LerpTable lerp_table(Index in, Index out) {
  LerpTable table;
  table.lo.resize(static_cast<std::size_t>(out));
  table.hi.resize(static_cast<std::size_t>(out));
  table.t.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    Index lo = static_cast<Index>(src);
    if (lo > in - 1) lo = in - 1;
    const Index hi = std::min(lo + 1, in - 1);
    const auto u = static_cast<std::size_t>(o);
    table.lo[u] = lo;
    table.hi[u] = hi;
    table.t[u] = src - static_cast<double>(lo);
  }
  return table;
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<Scalar> out(a.shape());
  out.array() = a.value().array() + b.value().array();
  return make_result<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    self.inputs[0]->accumulate(self.grad);
    self.inputs[1]->accumulate(self.grad);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<Scalar> out(a.shape());
  out.array() = a.value().array() - b.value().array();
  return make_result<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    self.inputs[0]->accumulate(self.grad);
    if (self.inputs[1]->requires_grad) {
      Tensor<Scalar> neg(self.grad.shape());
      neg.array() = -self.grad.array();
      self.inputs[1]->accumulate(neg);
    }
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  Tensor<Scalar> out(a.shape());
  out.array() = a.value().array() * factor;
  return make_result<Scalar>(std::move(out), {a}, [factor](Node<Scalar>& self) {
    Tensor<Scalar> g(self.grad.shape());
    g.array() = self.grad.array() * factor;
    self.inputs[0]->accumulate(g);
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  out.array() = x.value().array().max(Scalar(0));
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) {
    Tensor<Scalar> g(self.grad.shape());
    g.array() = (self.value.array() > Scalar(0)).select(self.grad.array(), Scalar(0));
    self.inputs[0]->accumulate(g);
  });
}

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& x, Scalar slope) {
  Tensor<Scalar> out(x.shape());
  const auto& in = x.value().array();
  out.array() = (in > Scalar(0)).select(in, in * slope);
  return make_result<Scalar>(std::move(out), {x}, [slope](Node<Scalar>& self) {
    const auto& in = self.inputs[0]->value.array();
    Tensor<Scalar> g(self.grad.shape());
    g.array() = (in > Scalar(0)).select(self.grad.array(), self.grad.array() * slope);
    self.inputs[0]->accumulate(g);
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  out.array() = Scalar(1) / (Scalar(1) + (-x.value().array()).exp());
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) {
    const auto& y = self.value.array();
    Tensor<Scalar> g(self.grad.shape());
    g.array() = self.grad.array() * y * (Scalar(1) - y);
    self.inputs[0]->accumulate(g);
  });
}

// y = x * scale[c] + shift[c], with constant per-channel coefficients.
template <typename Scalar>
Var<Scalar> channel_affine(const Var<Scalar>& x, const std::vector<Scalar>& scales,
                           const std::vector<Scalar>& shifts) {
  const Shape s = x.shape();
  if (static_cast<Index>(scales.size()) != s.c || static_cast<Index>(shifts.size()) != s.c) {
    throw ShapeError("channel_affine: coefficient count does not match channels of " + s.str());
  }
  Tensor<Scalar> out(s);
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      const Index off = (n * s.c + c) * s.plane();
      out.array().segment(off, s.plane()) =
          x.value().array().segment(off, s.plane()) * scales[static_cast<std::size_t>(c)] +
          shifts[static_cast<std::size_t>(c)];
    }
  }
  return make_result<Scalar>(std::move(out), {x}, [scales, s](Node<Scalar>& self) {
    Tensor<Scalar> g(s);
    for (Index n = 0; n < s.n; ++n) {
      for (Index c = 0; c < s.c; ++c) {
        const Index off = (n * s.c + c) * s.plane();
        g.array().segment(off, s.plane()) =
            self.grad.array().segment(off, s.plane()) * scales[static_cast<std::size_t>(c)];
      }
    }
    self.inputs[0]->accumulate(g);
  });
}

// 2-D convolution. weight is [C_out, C_in, k, k]; bias (optional) is
// [1, C_out, 1, 1]. Padding is symmetric by opt.pad on both axes.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                   const Conv2dOptions& opt) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.h != ws.w) throw ShapeError("conv2d: square kernels only, got " + ws.str());
  if (ws.c != xs.c) throw ShapeError("conv2d: input channels " + xs.str() + " do not match weight " + ws.str());
  if (bias.defined() && (bias.shape().c != ws.n || bias.shape().numel() != ws.n)) {
    throw ShapeError("conv2d: bias shape " + bias.shape().str());
  }
  const Index k = ws.h;
  const Index out_h = (xs.h + 2 * opt.pad - k) / opt.stride + 1;
  const Index out_w = (xs.w + 2 * opt.pad - k) / opt.stride + 1;
  if (out_h <= 0 || out_w <= 0 || xs.h + 2 * opt.pad < k || xs.w + 2 * opt.pad < k) {
    throw ShapeError("conv2d: input " + xs.str() + " too small for kernel " + std::to_string(k));
  }

  auto geometry = std::make_shared<detail::ConvGeometry>();
  *geometry = detail::ConvGeometry{xs.c, xs.h, xs.w, k, out_h, out_w,
                                   detail::tap_table(xs.h, out_h, k, opt.stride, opt.pad, opt.padding),
                                   detail::tap_table(xs.w, out_w, k, opt.stride, opt.pad, opt.padding)};
  const bool direct = k == 1 && opt.stride == 1 && opt.pad == 0;
  const Index cout = ws.n;

  Tensor<Scalar> out(Shape{xs.n, cout, out_h, out_w});
  typename Tensor<Scalar>::ConstMatrixMap wmat(weight.value().data(), cout, geometry->rows());
  RowMatrix<Scalar> cols;
  if (!direct) cols.resize(geometry->rows(), geometry->cols());
  for (Index n = 0; n < xs.n; ++n) {
    typename Tensor<Scalar>::MatrixMap omat(out.sample_data(n), cout, geometry->cols());
    if (direct) {
      omat.noalias() = wmat * x.value().sample_matrix(n);
    } else {
      detail::im2col(x.value().sample_data(n), *geometry, cols);
      omat.noalias() = wmat * cols;
    }
    if (bias.defined()) {
      omat.colwise() += Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bias.value().data(), cout);
    }
  }

  const bool has_bias = bias.defined();
  return make_result<Scalar>(std::move(out), {x, weight, bias}, [geometry, direct, has_bias, cout](Node<Scalar>& self) {
    Node<Scalar>& xin = *self.inputs[0];
    Node<Scalar>& win = *self.inputs[1];
    const bool need_dx = xin.requires_grad;
    const bool need_dw = win.requires_grad;
    const bool need_db = has_bias && self.inputs[2]->requires_grad;
    const auto& g = *geometry;
    const Index batch = xin.value.n();

    typename Tensor<Scalar>::ConstMatrixMap wmat(win.value.data(), cout, g.rows());
    Tensor<Scalar> dx = need_dx ? Tensor<Scalar>(xin.value.shape()) : Tensor<Scalar>();
    Tensor<Scalar> dw = need_dw ? Tensor<Scalar>(win.value.shape()) : Tensor<Scalar>();
    Tensor<Scalar> db = need_db ? Tensor<Scalar>(Shape{1, cout, 1, 1}) : Tensor<Scalar>();
    RowMatrix<Scalar> cols;
    RowMatrix<Scalar> dcols;
    if (!direct && need_dw) cols.resize(g.rows(), g.cols());
    for (Index n = 0; n < batch; ++n) {
      typename Tensor<Scalar>::ConstMatrixMap gmat(self.grad.sample_data(n), cout, g.cols());
      if (need_dw) {
        typename Tensor<Scalar>::MatrixMap dwmat(dw.data(), cout, g.rows());
        if (direct) {
          dwmat.noalias() += gmat * xin.value.sample_matrix(n).transpose();
        } else {
          detail::im2col(xin.value.sample_data(n), g, cols);
          dwmat.noalias() += gmat * cols.transpose();
        }
      }
      if (need_db) {
        Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(db.data(), cout) += gmat.rowwise().sum();
      }
      if (need_dx) {
        if (direct) {
          dx.sample_matrix(n).noalias() = wmat.transpose() * gmat;
        } else {
          dcols.noalias() = wmat.transpose() * gmat;
          detail::col2im(dcols, g, dx.sample_data(n));
        }
      }
    }
    if (need_dx) xin.accumulate(dx);
    if (need_dw) win.accumulate(dw);
    if (need_db) self.inputs[2]->accumulate(db);
  });
}

// Fully connected layer on the flattened sample. weight is [K, D, 1, 1] with
// D = C*H*W of x; bias is [1, K, 1, 1]. Output is [N, K, 1, 1].
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  const Shape xs = x.shape();
  const Index k = weight.shape().n;
  const Index d = weight.shape().sample_size();
  if (xs.sample_size() != d) throw ShapeError("linear: input " + xs.str() + " vs weight " + weight.shape().str());
  Tensor<Scalar> out(Shape{xs.n, k, 1, 1});
  typename Tensor<Scalar>::ConstMatrixMap wmat(weight.value().data(), k, d);
  out.batch_matrix().noalias() = x.value().batch_matrix() * wmat.transpose();
  out.batch_matrix().rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.value().data(), k);
  return make_result<Scalar>(std::move(out), {x, weight, bias}, [k, d](Node<Scalar>& self) {
    Node<Scalar>& xin = *self.inputs[0];
    Node<Scalar>& win = *self.inputs[1];
    Node<Scalar>& bin = *self.inputs[2];
    const auto gmat = self.grad.batch_matrix();
    if (xin.requires_grad) {
      Tensor<Scalar> dx(xin.value.shape());
      dx.batch_matrix().noalias() = gmat * typename Tensor<Scalar>::ConstMatrixMap(win.value.data(), k, d);
      xin.accumulate(dx);
    }
    if (win.requires_grad) {
      Tensor<Scalar> dw(win.value.shape());
      typename Tensor<Scalar>::MatrixMap(dw.data(), k, d).noalias() = gmat.transpose() * xin.value.batch_matrix();
      win.accumulate(dw);
    }
    if (bin.requires_grad) {
      Tensor<Scalar> db(bin.value.shape());
      Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(db.data(), k) = gmat.colwise().sum();
      bin.accumulate(db);
    }
  });
}

// Max pooling; padded positions never win.
template <typename Scalar>
Var<Scalar> max_pool2d(const Var<Scalar>& x, Index kernel, Index stride, Index pad = 0) {
  const Shape s = x.shape();
  if (kernel > s.h + 2 * pad || kernel > s.w + 2 * pad) {
    throw ShapeError("max_pool2d: kernel larger than input " + s.str());
  }
  const Index oh = (s.h + 2 * pad - kernel) / stride + 1;
  const Index ow = (s.w + 2 * pad - kernel) / stride + 1;
  Tensor<Scalar> out(Shape{s.n, s.c, oh, ow});
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(out.numel()));
  const Scalar* in = x.value().data();
  Index o = 0;
  for (Index nc = 0; nc < s.n * s.c; ++nc) {
    const Index base = nc * s.plane();
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox, ++o) {
        Index best = -1;
        for (Index ky = 0; ky < kernel; ++ky) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= s.h) continue;
          for (Index kx = 0; kx < kernel; ++kx) {
            const Index ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= s.w) continue;
            const Index idx = base + iy * s.w + ix;
            if (best < 0 || in[idx] > in[best]) best = idx;
          }
        }
        (*argmax)[static_cast<std::size_t>(o)] = best;
        out.data()[o] = in[best];
      }
    }
  }
  return make_result<Scalar>(std::move(out), {x}, [argmax](Node<Scalar>& self) {
    Tensor<Scalar> g(self.inputs[0]->value.shape());
    for (Index i = 0; i < self.grad.numel(); ++i) g.data()[(*argmax)[static_cast<std::size_t>(i)]] += self.grad.data()[i];
    self.inputs[0]->accumulate(g);
  });
}

// Non-overlapping average pooling (stride = kernel); trailing rows/columns
// that do not fill a whole window are dropped.
template <typename Scalar>
Var<Scalar> avg_pool2d(const Var<Scalar>& x, Index kernel) {
  const Shape s = x.shape();
  if (kernel < 1 || kernel > s.h || kernel > s.w) {
    throw ValidationError("avg_pool2d: kernel " + std::to_string(kernel) + " exceeds feature map " + s.str());
  }
  const Index oh = s.h / kernel;
  const Index ow = s.w / kernel;
  const Scalar inv = Scalar(1) / static_cast<Scalar>(kernel * kernel);
  Tensor<Scalar> out(Shape{s.n, s.c, oh, ow});
  const Scalar* in = x.value().data();
  Index o = 0;
  for (Index nc = 0; nc < s.n * s.c; ++nc) {
    const Index base = nc * s.plane();
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox, ++o) {
        Scalar acc = 0;
        for (Index ky = 0; ky < kernel; ++ky) {
          for (Index kx = 0; kx < kernel; ++kx) acc += in[base + (oy * kernel + ky) * s.w + ox * kernel + kx];
        }
        out.data()[o] = acc * inv;
      }
    }
  }
  return make_result<Scalar>(std::move(out), {x}, [s, kernel, oh, ow, inv](Node<Scalar>& self) {
    Tensor<Scalar> g(s);
    Index o = 0;
    for (Index nc = 0; nc < s.n * s.c; ++nc) {
      const Index base = nc * s.plane();
      for (Index oy = 0; oy < oh; ++oy) {
        for (Index ox = 0; ox < ow; ++ox, ++o) {
          const Scalar v = self.grad.data()[o] * inv;
          for (Index ky = 0; ky < kernel; ++ky) {
            for (Index kx = 0; kx < kernel; ++kx) g.data()[base + (oy * kernel + ky) * s.w + ox * kernel + kx] += v;
          }
        }
      }
    }
    self.inputs[0]->accumulate(g);
  });
}

template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
  const Shape s = x.shape();
  Tensor<Scalar> out(Shape{s.n, s.c, 1, 1});
  const Scalar inv = Scalar(1) / static_cast<Scalar>(s.plane());
  typename Tensor<Scalar>::ConstMatrixMap in(x.value().data(), s.n * s.c, s.plane());
  Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(out.data(), s.n * s.c) = in.rowwise().sum() * inv;
  return make_result<Scalar>(std::move(out), {x}, [s, inv](Node<Scalar>& self) {
    Tensor<Scalar> g(s);
    typename Tensor<Scalar>::MatrixMap gm(g.data(), s.n * s.c, s.plane());
    Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> go(self.grad.data(), s.n * s.c);
    gm.colwise() = go * inv;
    self.inputs[0]->accumulate(g);
  });
}

namespace detail {

// Raw bilinear resize; also used by image preprocessing. Interpolates as
// a + t * (b - a) so constant regions are reproduced exactly.
template <typename Scalar>
Tensor<Scalar> resize_bilinear_forward(const Tensor<Scalar>& x, Index out_h, Index out_w, const LerpTable& ty,
                                       const LerpTable& tx) {
  const Shape s = x.shape();
  Tensor<Scalar> out(Shape{s.n, s.c, out_h, out_w});
  for (Index nc = 0; nc < s.n * s.c; ++nc) {
    const Scalar* in = x.data() + nc * s.plane();
    Scalar* dst = out.data() + nc * out_h * out_w;
    for (Index oy = 0; oy < out_h; ++oy) {
      const auto uy = static_cast<std::size_t>(oy);
      const Scalar wy = static_cast<Scalar>(ty.t[uy]);
      const Scalar* r0 = in + ty.lo[uy] * s.w;
      const Scalar* r1 = in + ty.hi[uy] * s.w;
      for (Index ox = 0; ox < out_w; ++ox) {
        const auto ux = static_cast<std::size_t>(ox);
        const Scalar wx = static_cast<Scalar>(tx.t[ux]);
        const Scalar top = r0[tx.lo[ux]] + wx * (r0[tx.hi[ux]] - r0[tx.lo[ux]]);
        const Scalar bottom = r1[tx.lo[ux]] + wx * (r1[tx.hi[ux]] - r1[tx.lo[ux]]);
        dst[oy * out_w + ox] = top + wy * (bottom - top);
      }
    }
  }
  return out;
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> resize_bilinear(const Tensor<Scalar>& x, Index out_h, Index out_w) {
  return detail::resize_bilinear_forward(x, out_h, out_w, detail::lerp_table(x.h(), out_h),
                                         detail::lerp_table(x.w(), out_w));
}

template <typename Scalar>
Var<Scalar> resize_bilinear(const Var<Scalar>& x, Index out_h, Index out_w) {
  const Shape s = x.shape();
  if (out_h <= 0 || out_w <= 0) throw ShapeError("resize_bilinear: empty output size");
  auto ty = std::make_shared<detail::LerpTable>(detail::lerp_table(s.h, out_h));
  auto tx = std::make_shared<detail::LerpTable>(detail::lerp_table(s.w, out_w));
  Tensor<Scalar> out = detail::resize_bilinear_forward(x.value(), out_h, out_w, *ty, *tx);
  return make_result<Scalar>(std::move(out), {x}, [s, out_h, out_w, ty, tx](Node<Scalar>& self) {
    Tensor<Scalar> g(s);
    for (Index nc = 0; nc < s.n * s.c; ++nc) {
      Scalar* dst = g.data() + nc * s.plane();
      const Scalar* go = self.grad.data() + nc * out_h * out_w;
      for (Index oy = 0; oy < out_h; ++oy) {
        const auto uy = static_cast<std::size_t>(oy);
        const Scalar wy = static_cast<Scalar>(ty->t[uy]);
        Scalar* r0 = dst + ty->lo[uy] * s.w;
        Scalar* r1 = dst + ty->hi[uy] * s.w;
        for (Index ox = 0; ox < out_w; ++ox) {
          const auto ux = static_cast<std::size_t>(ox);
          const Scalar wx = static_cast<Scalar>(tx->t[ux]);
          const Scalar v = go[oy * out_w + ox];
          const Scalar top = v * (Scalar(1) - wy);
          const Scalar bottom = v * wy;
          r0[tx->lo[ux]] += top * (Scalar(1) - wx);
          r0[tx->hi[ux]] += top * wx;
          r1[tx->lo[ux]] += bottom * (Scalar(1) - wx);
          r1[tx->hi[ux]] += bottom * wx;
        }
      }
    }
    self.inputs[0]->accumulate(g);
  });
}

namespace detail {
// Sums a gradient of batch n down to batch 1 when the input was broadcast.
template <typename Scalar>
Tensor<Scalar> reduce_to(const Tensor<Scalar>& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor<Scalar> out(target);
  for (Index n = 0; n < g.n(); ++n) {
    out.array() += g.array().segment(n * target.sample_size(), target.sample_size());
  }
  return out;
}
}  // namespace detail

// Channel concatenation [a | b]. Either input may have batch 1 and is then
// repeated over the other's batch.
template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa.h != sb.h || sa.w != sb.w || (sa.n != sb.n && sa.n != 1 && sb.n != 1)) {
    throw ShapeError("concat_channels: " + sa.str() + " vs " + sb.str());
  }
  const Index batch = std::max(sa.n, sb.n);
  Tensor<Scalar> out(Shape{batch, sa.c + sb.c, sa.h, sa.w});
  for (Index n = 0; n < batch; ++n) {
    Scalar* dst = out.sample_data(n);
    const Scalar* pa = a.value().sample_data(sa.n == 1 ? 0 : n);
    const Scalar* pb = b.value().sample_data(sb.n == 1 ? 0 : n);
    std::copy(pa, pa + sa.sample_size(), dst);
    std::copy(pb, pb + sb.sample_size(), dst + sa.sample_size());
  }
  return make_result<Scalar>(std::move(out), {a, b}, [sa, sb, batch](Node<Scalar>& self) {
    Shape full_a = sa, full_b = sb;
    full_a.n = full_b.n = batch;
    Tensor<Scalar> ga(full_a), gb(full_b);
    for (Index n = 0; n < batch; ++n) {
      const Scalar* src = self.grad.sample_data(n);
      std::copy(src, src + sa.sample_size(), ga.sample_data(n));
      std::copy(src + sa.sample_size(), src + sa.sample_size() + sb.sample_size(), gb.sample_data(n));
    }
    self.inputs[0]->accumulate(detail::reduce_to(ga, sa));
    self.inputs[1]->accumulate(detail::reduce_to(gb, sb));
  });
}

// lambda * a + (1 - lambda) * b, with b broadcast over a's batch.
template <typename Scalar>
Var<Scalar> mixup(const Var<Scalar>& a, const Var<Scalar>& b, Scalar lambda) {
  detail::require_broadcastable(a.shape(), b.shape(), "mixup");
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  Tensor<Scalar> out(sa);
  for (Index n = 0; n < sa.n; ++n) {
    const Index src = sb.n == 1 ? 0 : n;
    out.array().segment(n * sa.sample_size(), sa.sample_size()) =
        lambda * a.value().array().segment(n * sa.sample_size(), sa.sample_size()) +
        (Scalar(1) - lambda) * b.value().array().segment(src * sb.sample_size(), sb.sample_size());
  }
  return make_result<Scalar>(std::move(out), {a, b}, [sa, sb, lambda](Node<Scalar>& self) {
    if (self.inputs[0]->requires_grad) {
      Tensor<Scalar> ga(sa);
      ga.array() = self.grad.array() * lambda;
      self.inputs[0]->accumulate(ga);
    }
    if (self.inputs[1]->requires_grad) {
      Tensor<Scalar> gb(sa);
      gb.array() = self.grad.array() * (Scalar(1) - lambda);
      self.inputs[1]->accumulate(detail::reduce_to(gb, sb));
    }
  });
}

// Running statistics of a batch-norm layer; updated in training mode.
template <typename Scalar>
struct BatchNormStats {
  Tensor<Scalar> mean;
  Tensor<Scalar> var;
};

// Per-channel batch normalization. In training mode batch statistics are
// used and the running statistics are updated with the given momentum.
template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       BatchNormStats<Scalar>& stats, bool training, Scalar momentum = Scalar(0.1),
                       Scalar eps = Scalar(1e-5)) {
  const Shape s = x.shape();
  const Index m = s.n * s.plane();
  std::vector<Scalar> mean(static_cast<std::size_t>(s.c)), invstd(static_cast<std::size_t>(s.c));
  for (Index c = 0; c < s.c; ++c) {
    const auto uc = static_cast<std::size_t>(c);
    if (training) {
      Scalar sum = 0;
      for (Index n = 0; n < s.n; ++n) sum += x.value().array().segment((n * s.c + c) * s.plane(), s.plane()).sum();
      const Scalar mu = sum / static_cast<Scalar>(m);
      Scalar sq = 0;
      for (Index n = 0; n < s.n; ++n) {
        sq += (x.value().array().segment((n * s.c + c) * s.plane(), s.plane()) - mu).square().sum();
      }
      const Scalar var = sq / static_cast<Scalar>(m);
      mean[uc] = mu;
      invstd[uc] = Scalar(1) / std::sqrt(var + eps);
      const Scalar unbiased = m > 1 ? sq / static_cast<Scalar>(m - 1) : var;
      stats.mean.data()[c] = (Scalar(1) - momentum) * stats.mean.data()[c] + momentum * mu;
      stats.var.data()[c] = (Scalar(1) - momentum) * stats.var.data()[c] + momentum * unbiased;
    } else {
      mean[uc] = stats.mean.data()[c];
      invstd[uc] = Scalar(1) / std::sqrt(stats.var.data()[c] + eps);
    }
  }
  Tensor<Scalar> xhat(s);
  Tensor<Scalar> out(s);
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      const auto uc = static_cast<std::size_t>(c);
      const Index off = (n * s.c + c) * s.plane();
      xhat.array().segment(off, s.plane()) = (x.value().array().segment(off, s.plane()) - mean[uc]) * invstd[uc];
      out.array().segment(off, s.plane()) =
          xhat.array().segment(off, s.plane()) * gamma.value().data()[c] + beta.value().data()[c];
    }
  }
  return make_result<Scalar>(
      std::move(out), {x, gamma, beta},
      [s, m, training, invstd = std::move(invstd), xhat = std::move(xhat)](Node<Scalar>& self) {
        Node<Scalar>& xin = *self.inputs[0];
        Node<Scalar>& gin = *self.inputs[1];
        Node<Scalar>& bin = *self.inputs[2];
        Tensor<Scalar> dx = xin.requires_grad ? Tensor<Scalar>(s) : Tensor<Scalar>();
        Tensor<Scalar> dgamma(gin.value.shape()), dbeta(bin.value.shape());
        for (Index c = 0; c < s.c; ++c) {
          const auto uc = static_cast<std::size_t>(c);
          Scalar sum_g = 0, sum_gx = 0;
          for (Index n = 0; n < s.n; ++n) {
            const Index off = (n * s.c + c) * s.plane();
            sum_g += self.grad.array().segment(off, s.plane()).sum();
            sum_gx += (self.grad.array().segment(off, s.plane()) * xhat.array().segment(off, s.plane())).sum();
          }
          dgamma.data()[c] = sum_gx;
          dbeta.data()[c] = sum_g;
          if (!xin.requires_grad) continue;
          const Scalar gamma_c = gin.value.data()[c];
          for (Index n = 0; n < s.n; ++n) {
            const Index off = (n * s.c + c) * s.plane();
            if (training) {
              const Scalar k = gamma_c * invstd[uc] / static_cast<Scalar>(m);
              dx.array().segment(off, s.plane()) =
                  k * (static_cast<Scalar>(m) * self.grad.array().segment(off, s.plane()) - sum_g -
                       xhat.array().segment(off, s.plane()) * sum_gx);
            } else {
              dx.array().segment(off, s.plane()) = self.grad.array().segment(off, s.plane()) * gamma_c * invstd[uc];
            }
          }
        }
        if (xin.requires_grad) xin.accumulate(dx);
        gin.accumulate(dgamma);
        bin.accumulate(dbeta);
      });
}

// Per-sample normalized channel correlation, [N, C, C, 1]:
// G = F F^T / (C H W) with F the C x (H W) flattened feature map.
// Per-sample, per-channel normalization over the spatial plane, without an
// affine transform.
template <typename Scalar>
Var<Scalar> instance_norm(const Var<Scalar>& x, Scalar eps = Scalar(1e-5)) {
  const Shape s = x.shape();
  const Index p = s.plane();
  const Index planes = s.n * s.c;
  std::vector<Scalar> invstd(static_cast<std::size_t>(planes));
  Tensor<Scalar> out(s);
  for (Index i = 0; i < planes; ++i) {
    const auto in = x.value().array().segment(i * p, p);
    const Scalar mu = in.sum() / static_cast<Scalar>(p);
    const Scalar var = (in - mu).square().sum() / static_cast<Scalar>(p);
    invstd[static_cast<std::size_t>(i)] = Scalar(1) / std::sqrt(var + eps);
    out.array().segment(i * p, p) = (in - mu) * invstd[static_cast<std::size_t>(i)];
  }
  Tensor<Scalar> xhat = out;
  return make_result<Scalar>(std::move(out), {x},
                             [s, p, planes, invstd = std::move(invstd), xhat = std::move(xhat)](Node<Scalar>& self) {
                               Tensor<Scalar> dx(s);
                               for (Index i = 0; i < planes; ++i) {
                                 const auto g = self.grad.array().segment(i * p, p);
                                 const auto xh = xhat.array().segment(i * p, p);
                                 const Scalar mean_g = g.sum() / static_cast<Scalar>(p);
                                 const Scalar mean_gx = (g * xh).sum() / static_cast<Scalar>(p);
                                 dx.array().segment(i * p, p) =
                                     invstd[static_cast<std::size_t>(i)] * (g - mean_g - xh * mean_gx);
                               }
                               self.inputs[0]->accumulate(dx);
                             });
}

template <typename Scalar>
Var<Scalar> gram_matrix(const Var<Scalar>& features) {
  const Shape s = features.shape();
  const Scalar norm = Scalar(1) / static_cast<Scalar>(s.sample_size());
  Tensor<Scalar> out(Shape{s.n, s.c, s.c, 1});
  for (Index n = 0; n < s.n; ++n) {
    const auto f = features.value().sample_matrix(n);
    typename Tensor<Scalar>::MatrixMap g(out.sample_data(n), s.c, s.c);
    g.noalias() = f * f.transpose();
    g *= norm;
  }
  return make_result<Scalar>(std::move(out), {features}, [s, norm](Node<Scalar>& self) {
    Node<Scalar>& fin = *self.inputs[0];
    Tensor<Scalar> df(s);
    for (Index n = 0; n < s.n; ++n) {
      typename Tensor<Scalar>::ConstMatrixMap dg(self.grad.sample_data(n), s.c, s.c);
      df.sample_matrix(n).noalias() = ((dg + dg.transpose()) * norm) * fin.value.sample_matrix(n);
    }
    fin.accumulate(df);
  });
}

enum class Reduction {
  ElementMean,  // divide by the total element count of a
  SampleMean,   // divide by the batch size of a
};

// Reduced squared difference between a and b; b may have batch 1 and is then
// compared against every sample of a.
template <typename Scalar>
Var<Scalar> squared_error(const Var<Scalar>& a, const Var<Scalar>& b, Reduction reduction) {
  detail::require_broadcastable(a.shape(), b.shape(), "squared_error");
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  auto diff = std::make_shared<Tensor<Scalar>>(sa);
  for (Index n = 0; n < sa.n; ++n) {
    const Index src = sb.n == 1 ? 0 : n;
    diff->array().segment(n * sa.sample_size(), sa.sample_size()) =
        a.value().array().segment(n * sa.sample_size(), sa.sample_size()) -
        b.value().array().segment(src * sb.sample_size(), sb.sample_size());
  }
  const Scalar denom = static_cast<Scalar>(reduction == Reduction::ElementMean ? sa.numel() : sa.n);
  Tensor<Scalar> out = Tensor<Scalar>::scalar(diff->array().square().sum() / denom);
  return make_result<Scalar>(std::move(out), {a, b}, [diff, denom, sb](Node<Scalar>& self) {
    const Scalar k = Scalar(2) * self.grad.item() / denom;
    if (self.inputs[0]->requires_grad) {
      Tensor<Scalar> ga(diff->shape());
      ga.array() = diff->array() * k;
      self.inputs[0]->accumulate(ga);
    }
    if (self.inputs[1]->requires_grad) {
      Tensor<Scalar> gb(diff->shape());
      gb.array() = diff->array() * -k;
      self.inputs[1]->accumulate(detail::reduce_to(gb, sb));
    }
  });
}

// Batch-mean cross entropy of logits [N, K, 1, 1] against class indices,
// evaluated through log-sum-exp.
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, const std::vector<int>& labels) {
  const Shape s = logits.shape();
  if (static_cast<Index>(labels.size()) != s.n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " + s.str());
  }
  const Index k = s.sample_size();
  auto softmax = std::make_shared<RowMatrix<Scalar>>(s.n, k);
  const auto z = logits.value().batch_matrix();
  Scalar total = 0;
  for (Index n = 0; n < s.n; ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= k) throw ValidationError("cross_entropy: label " + std::to_string(y) + " out of range");
    const Scalar top = z.row(n).maxCoeff();
    const auto shifted = (z.row(n).array() - top).eval();
    const Scalar sum = shifted.exp().sum();
    total += std::log(sum) - shifted(y);
    softmax->row(n) = shifted.exp() / sum;
  }
  Tensor<Scalar> out = Tensor<Scalar>::scalar(total / static_cast<Scalar>(s.n));
  return make_result<Scalar>(std::move(out), {logits}, [softmax, labels, s](Node<Scalar>& self) {
    Tensor<Scalar> g(s);
    auto gm = g.batch_matrix();
    gm = *softmax;
    for (Index n = 0; n < s.n; ++n) gm(n, labels[static_cast<std::size_t>(n)]) -= Scalar(1);
    gm *= self.grad.item() / static_cast<Scalar>(s.n);
    self.inputs[0]->accumulate(g);
  });
}

}  // namespace osuda
