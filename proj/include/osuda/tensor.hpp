#pragma once

#include <Eigen/Core>

#include <cstring>
#include <sstream>
#include <string>

#include "osuda/errors.hpp"

namespace osuda {

using Index = Eigen::Index;

// Every tensor in the toolkit is NCHW. Matrices such as logits use
// [N, K, 1, 1]; scalars use [1, 1, 1, 1].
struct Shape {
  Index n = 0;
  Index c = 0;
  Index h = 0;
  Index w = 0;

  constexpr Index numel() const { return n * c * h * w; }
  constexpr Index sample_size() const { return c * h * w; }
  constexpr Index plane() const { return h * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "[" << n << ", " << c << ", " << h << ", " << w << "]";
    return os.str();
  }
};

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;
  explicit Tensor(const Shape& shape) : shape_(shape), data_(Array::Zero(shape.numel())) {}
  Tensor(const Shape& shape, Scalar value) : shape_(shape), data_(Array::Constant(shape.numel(), value)) {}
  Tensor(const Shape& shape, Array data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data size does not match shape " + shape_.str());
    }
  }

  static Tensor zeros(const Shape& shape) { return Tensor(shape); }
  static Tensor constant(const Shape& shape, Scalar value) { return Tensor(shape, value); }
  static Tensor scalar(Scalar value) { return Tensor(Shape{1, 1, 1, 1}, value); }

  const Shape& shape() const { return shape_; }
  Index numel() const { return shape_.numel(); }
  Index n() const { return shape_.n; }
  Index c() const { return shape_.c; }
  Index h() const { return shape_.h; }
  Index w() const { return shape_.w; }
  bool empty() const { return data_.size() == 0; }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator()(Index n, Index c, Index h, Index w) {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  Scalar operator()(Index n, Index c, Index h, Index w) const {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  Scalar item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_.str());
    return data_[0];
  }

  Scalar* sample_data(Index n) { return data_.data() + n * shape_.sample_size(); }
  const Scalar* sample_data(Index n) const { return data_.data() + n * shape_.sample_size(); }

  // Sample n viewed as a C x (H*W) matrix.
  MatrixMap sample_matrix(Index n) { return MatrixMap(sample_data(n), shape_.c, shape_.plane()); }
  ConstMatrixMap sample_matrix(Index n) const {
    return ConstMatrixMap(sample_data(n), shape_.c, shape_.plane());
  }
  // Whole tensor viewed as N x (C*H*W).
  MatrixMap batch_matrix() { return MatrixMap(data(), shape_.n, shape_.sample_size()); }
  ConstMatrixMap batch_matrix() const { return ConstMatrixMap(data(), shape_.n, shape_.sample_size()); }

  Tensor reshaped(const Shape& shape) const {
    if (shape.numel() != numel()) throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
    return Tensor(shape, data_);
  }

  // Samples [begin, begin + count).
  Tensor slice(Index begin, Index count) const {
    if (begin < 0 || count < 0 || begin + count > shape_.n) throw ShapeError("slice out of range");
    Shape s = shape_;
    s.n = count;
    return Tensor(s, data_.segment(begin * shape_.sample_size(), count * shape_.sample_size()));
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool bit_equal(const Tensor& other) const {
    return shape_ == other.shape_ &&
           std::memcmp(data(), other.data(), sizeof(Scalar) * static_cast<std::size_t>(numel())) == 0;
  }

 private:
  Shape shape_;
  Array data_;
};

// Concatenate along the batch dimension.
template <typename Scalar>
Tensor<Scalar> concat_batch(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.c() != b.c() || a.h() != b.h() || a.w() != b.w()) {
    throw ShapeError("concat_batch: " + a.shape().str() + " vs " + b.shape().str());
  }
  Shape s = a.shape();
  s.n += b.n();
  Tensor<Scalar> out(s);
  out.array().head(a.numel()) = a.array();
  out.array().tail(b.numel()) = b.array();
  return out;
}

}  // namespace osuda
