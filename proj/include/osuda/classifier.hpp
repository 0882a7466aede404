#pragma once

#include <optional>
#include <string>
#include <vector>

#include "osuda/layers.hpp"

namespace osuda {

enum class Backbone { SmallCnn, ResNet18, ResNet34, ResNet50, ResNet101 };

inline std::string to_string(Backbone b) {
  switch (b) {
    case Backbone::SmallCnn: return "small_cnn";
    case Backbone::ResNet18: return "resnet18";
    case Backbone::ResNet34: return "resnet34";
    case Backbone::ResNet50: return "resnet50";
    case Backbone::ResNet101: return "resnet101";
  }
  return "?";
}

inline Backbone parse_backbone(const std::string& s) {
  for (auto b : {Backbone::SmallCnn, Backbone::ResNet18, Backbone::ResNet34, Backbone::ResNet50, Backbone::ResNet101}) {
    if (to_string(b) == s) return b;
  }
  throw ValidationError("unknown classifier backbone '" + s + "'");
}

// One-hot class targets.
struct LabelBatch {
  RowMatrix<double> one_hot;

  static LabelBatch from_indices(const std::vector<int>& labels, Index num_classes) {
    LabelBatch b{RowMatrix<double>::Zero(static_cast<Index>(labels.size()), num_classes)};
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || labels[i] >= num_classes) throw ValidationError("label out of range");
      b.one_hot(static_cast<Index>(i), labels[i]) = 1.0;
    }
    return b;
  }

  std::vector<int> indices() const {
    std::vector<int> out;
    for (Index r = 0; r < one_hot.rows(); ++r) {
      if (one_hot.row(r).sum() != 1.0 || (one_hot.row(r).array() != 0.0 && one_hot.row(r).array() != 1.0).any()) {
        throw ValidationError("label row " + std::to_string(r) + " is not one-hot");
      }
      Index k = 0;
      one_hot.row(r).maxCoeff(&k);
      out.push_back(static_cast<int>(k));
    }
    return out;
  }
};

template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, const LabelBatch& labels) {
  if (labels.one_hot.cols() != logits.shape().sample_size()) {
    throw ShapeError("cross_entropy: label width does not match logits " + logits.shape().str());
  }
  return cross_entropy(logits, labels.indices());
}

namespace detail {

// Residual unit of a ResNet: basic (two 3x3) or bottleneck (1x1, 3x3, 1x1).
template <typename Scalar>
struct ResNetBlock {
  std::vector<Conv2dLayer<Scalar>> convs;
  std::vector<BatchNormLayer<Scalar>> norms;
  std::optional<Conv2dLayer<Scalar>> down_conv;
  std::optional<BatchNormLayer<Scalar>> down_norm;

  Var<Scalar> forward(const Var<Scalar>& x, bool training) const {
    Var<Scalar> h = x;
    for (std::size_t i = 0; i < convs.size(); ++i) {
      h = norms[i](convs[i](h), training);
      if (i + 1 < convs.size()) h = relu(h);
    }
    const Var<Scalar> skip = down_conv ? (*down_norm)((*down_conv)(x), training) : x;
    return relu(add(h, skip));
  }

  void collect(const std::string& prefix, ParameterList<Scalar>& out) const {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      convs[i].collect(prefix + ".conv" + std::to_string(i), out);
      norms[i].collect(prefix + ".bn" + std::to_string(i), out);
    }
    if (down_conv) {
      down_conv->collect(prefix + ".down", out);
      down_norm->collect(prefix + ".down_bn", out);
    }
  }
  void collect_buffers(const std::string& prefix, BufferList<Scalar>& out) const {
    for (std::size_t i = 0; i < norms.size(); ++i) norms[i].collect_buffers(prefix + ".bn" + std::to_string(i), out);
    if (down_norm) down_norm->collect_buffers(prefix + ".down_bn", out);
  }
};

}  // namespace detail

// Image classifier: a convolutional backbone and a freshly initialized
// K-way linear head.
template <typename Scalar>
class ClassifierState {
 public:
  // small_width sets the first-layer width of the small CNN.
  static ClassifierState create(Backbone backbone, Index num_classes, std::uint64_t seed, Index small_width = 16) {
    if (num_classes < 2) throw ValidationError("a classifier needs at least 2 classes");
    ClassifierState s;
    s.backbone_ = backbone;
    s.num_classes_ = num_classes;
    s.small_width_ = small_width;
    Rng rng(seed);
    Index features = 0;
    if (backbone == Backbone::SmallCnn) {
      const Index w = small_width;
      const std::vector<Index> widths{w, 2 * w, 4 * w, 4 * w};
      Index in = 3;
      for (Index out : widths) {
        s.convs_.push_back(Conv2dLayer<Scalar>::create(in, out, 3, Conv2dLayer<Scalar>::same(3), rng, true, false));
        s.small_norms_.push_back(BatchNormLayer<Scalar>::create(out));
        in = out;
      }
      features = in;
    } else {
      features = s.build_resnet(backbone, rng);
    }
    s.head_ = LinearLayer<Scalar>::create(features, num_classes, rng);
    return s;
  }

  Backbone backbone() const { return backbone_; }
  Index num_classes() const { return num_classes_; }
  Index small_width() const { return small_width_; }

  // Logits [N, K, 1, 1]. training selects batch statistics in batch-norm
  // layers (and updates their running estimates).
  Var<Scalar> forward(const Var<Scalar>& x, bool training) const {
    if (x.shape().c != 3) throw ShapeError("classifier expects 3-channel images, got " + x.shape().str());
    Var<Scalar> h = x;
    if (backbone_ == Backbone::SmallCnn) {
      for (std::size_t i = 0; i < convs_.size(); ++i) {
        h = relu(small_norms_[i](convs_[i](h), training));
        if (i + 1 < convs_.size() && h.shape().h >= 2 && h.shape().w >= 2) h = max_pool2d(h, 2, 2);
      }
    } else {
      h = max_pool2d(relu((*stem_norm_)(convs_[0](h), training)), 3, 2, 1);
      for (const auto& block : blocks_) h = block.forward(h, training);
    }
    return head_(global_avg_pool(h));
  }

  ParameterList<Scalar> parameters() const {
    ParameterList<Scalar> out;
    if (backbone_ == Backbone::SmallCnn) {
      for (std::size_t i = 0; i < convs_.size(); ++i) {
        convs_[i].collect("conv" + std::to_string(i), out);
        small_norms_[i].collect("bn" + std::to_string(i), out);
      }
    } else {
      convs_[0].collect("stem.conv", out);
      stem_norm_->collect("stem.bn", out);
      for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect("block" + std::to_string(i), out);
    }
    head_.collect("head", out);
    return out;
  }

  ParameterList<Scalar> backbone_parameters() const {
    auto all = parameters();
    all.resize(all.size() - 2);
    return all;
  }

  BufferList<Scalar> buffers() const {
    BufferList<Scalar> out;
    for (std::size_t i = 0; i < small_norms_.size(); ++i) small_norms_[i].collect_buffers("bn" + std::to_string(i), out);
    if (stem_norm_) stem_norm_->collect_buffers("stem.bn", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect_buffers("block" + std::to_string(i), out);
    return out;
  }

  void zero_head() {
    Var<Scalar> w = head_.weight, b = head_.bias;
    w.mutable_value().array().setZero();
    b.mutable_value().array().setZero();
  }

  ClassifierState clone() const {
    ClassifierState copy = create(backbone_, num_classes_, 0, small_width_);
    assign_values(copy.parameters(), snapshot_values(parameters()));
    const auto src = buffers();
    const auto dst = copy.buffers();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].tensor = *src[i].tensor;
    return copy;
  }

 private:
  Index build_resnet(Backbone backbone, Rng& rng) {
    const bool bottleneck = backbone == Backbone::ResNet50 || backbone == Backbone::ResNet101;
    std::vector<int> counts;
    switch (backbone) {
      case Backbone::ResNet18: counts = {2, 2, 2, 2}; break;
      case Backbone::ResNet34: counts = {3, 4, 6, 3}; break;
      case Backbone::ResNet50: counts = {3, 4, 6, 3}; break;
      default: counts = {3, 4, 23, 3}; break;
    }
    const Index expansion = bottleneck ? 4 : 1;
    convs_.push_back(Conv2dLayer<Scalar>::create(3, 64, 7, Conv2dOptions{2, 3, Padding::Zero}, rng, true, false));
    stem_norm_ = BatchNormLayer<Scalar>::create(64);
    Index in = 64;
    for (std::size_t stage = 0; stage < counts.size(); ++stage) {
      const Index width = Index(64) << stage;
      for (int i = 0; i < counts[stage]; ++i) {
        const Index stride = (stage > 0 && i == 0) ? 2 : 1;
        detail::ResNetBlock<Scalar> block;
        auto conv = [&](Index cin, Index cout, Index k, Index s) {
          block.convs.push_back(Conv2dLayer<Scalar>::create(cin, cout, k, Conv2dOptions{s, (k - 1) / 2, Padding::Zero}, rng,
                                                            true, false));
          block.norms.push_back(BatchNormLayer<Scalar>::create(cout));
        };
        if (bottleneck) {
          conv(in, width, 1, 1);
          conv(width, width, 3, stride);
          conv(width, width * expansion, 1, 1);
        } else {
          conv(in, width, 3, stride);
          conv(width, width, 3, 1);
        }
        if (stride != 1 || in != width * expansion) {
          block.down_conv = Conv2dLayer<Scalar>::create(in, width * expansion, 1, Conv2dOptions{stride, 0, Padding::Zero},
                                                        rng, true, false);
          block.down_norm = BatchNormLayer<Scalar>::create(width * expansion);
        }
        blocks_.push_back(std::move(block));
        in = width * expansion;
      }
    }
    return in;
  }

  Backbone backbone_ = Backbone::SmallCnn;
  Index num_classes_ = 0;
  Index small_width_ = 16;
  std::vector<Conv2dLayer<Scalar>> convs_;
  std::vector<BatchNormLayer<Scalar>> small_norms_;
  std::optional<BatchNormLayer<Scalar>> stem_norm_;
  std::vector<detail::ResNetBlock<Scalar>> blocks_;
  LinearLayer<Scalar> head_;
};

// Eval-mode logits.
template <typename Scalar>
Var<Scalar> classify(const ClassifierState<Scalar>& state, const Var<Scalar>& x) {
  return state.forward(x, false);
}

}  // namespace osuda
