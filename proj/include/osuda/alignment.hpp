#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "osuda/layers.hpp"

namespace osuda {

// Style alignment: a frozen VGG-16 feature extractor and the perceptual
// losses built on its feature maps.

inline const std::vector<std::string>& default_style_layers() {
  static const std::vector<std::string> layers{"relu1_2", "relu2_2"};
  return layers;
}
inline const std::vector<std::string>& default_content_layers() {
  static const std::vector<std::string> layers{"relu4_3"};
  return layers;
}

// Frozen VGG-16 convolutional stack. width_divisor = 1 is the ImageNet
// geometry (64/128/256/512/512 channels); larger divisors give the tiny
// randomly initialized stand-in with identical layer names.
template <typename Scalar>
class FeatureExtractor {
 public:
  enum class Kind { Conv, Relu, Pool };
  struct Layer {
    std::string name;
    Kind kind;
    std::size_t conv = 0;  // index into convs_ for Kind::Conv
  };

  static FeatureExtractor vgg16(Index width_divisor = 1, std::uint64_t seed = 0,
                                std::vector<std::string> tap_points = {}) {
    if (width_divisor < 1) throw ValidationError("width_divisor must be >= 1");
    FeatureExtractor fe;
    fe.width_divisor_ = width_divisor;
    Rng rng(seed);
    const std::vector<std::vector<Index>> blocks{{64, 64}, {128, 128}, {256, 256, 256}, {512, 512, 512}, {512, 512, 512}};
    Index in = 3;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      for (std::size_t i = 0; i < blocks[b].size(); ++i) {
        const Index out = std::max<Index>(1, blocks[b][i] / width_divisor);
        const std::string suffix = std::to_string(b + 1) + "_" + std::to_string(i + 1);
        fe.layers_.push_back({"conv" + suffix, Kind::Conv, fe.convs_.size()});
        fe.convs_.push_back(Conv2dLayer<Scalar>::create(in, out, 3, Conv2dLayer<Scalar>::same(3), rng, false));
        fe.layers_.push_back({"relu" + suffix, Kind::Relu});
        in = out;
      }
      fe.layers_.push_back({"pool" + std::to_string(b + 1), Kind::Pool});
    }
    if (tap_points.empty()) {
      tap_points = default_style_layers();
      tap_points.insert(tap_points.end(), default_content_layers().begin(), default_content_layers().end());
    }
    for (const auto& t : tap_points) fe.layer_index(t);
    fe.tap_points_ = std::move(tap_points);
    return fe;
  }

  Index width_divisor() const { return width_divisor_; }
  const std::vector<std::string>& tap_points() const { return tap_points_; }
  const std::vector<Layer>& layers() const { return layers_; }

  std::vector<std::string> layer_names() const {
    std::vector<std::string> names;
    for (const auto& l : layers_) names.push_back(l.name);
    return names;
  }

  ParameterList<Scalar> parameters() const {
    ParameterList<Scalar> out;
    for (const auto& l : layers_) {
      if (l.kind == Kind::Conv) convs_[l.conv].collect(l.name, out);
    }
    return out;
  }

  // ImageNet normalization constants.
  static const std::vector<Scalar>& channel_mean() {
    static const std::vector<Scalar> m{Scalar(0.485), Scalar(0.456), Scalar(0.406)};
    return m;
  }
  static const std::vector<Scalar>& channel_std() {
    static const std::vector<Scalar> s{Scalar(0.229), Scalar(0.224), Scalar(0.225)};
    return s;
  }

  // Feature maps at the requested tap points, in request order. The network
  // runs only as deep as the deepest requested layer.
  std::vector<Var<Scalar>> extract(const Var<Scalar>& x, const std::vector<std::string>& requested) const {
    std::size_t deepest = 0;
    for (const auto& name : requested) {
      if (std::find(tap_points_.begin(), tap_points_.end(), name) == tap_points_.end()) {
        throw ValidationError("unknown feature layer '" + name + "'");
      }
      deepest = std::max(deepest, layer_index(name));
    }
    std::vector<Scalar> scales, shifts;
    for (std::size_t c = 0; c < 3; ++c) {
      scales.push_back(Scalar(1) / channel_std()[c]);
      shifts.push_back(-channel_mean()[c] / channel_std()[c]);
    }
    std::map<std::string, Var<Scalar>> found;
    Var<Scalar> h = channel_affine(x, scales, shifts);
    for (std::size_t i = 0; i <= deepest && !requested.empty(); ++i) {
      const Layer& l = layers_[i];
      switch (l.kind) {
        case Kind::Conv: h = convs_[l.conv](h); break;
        case Kind::Relu: h = relu(h); break;
        case Kind::Pool: h = max_pool2d(h, 2, 2); break;
      }
      if (std::find(requested.begin(), requested.end(), l.name) != requested.end()) found[l.name] = h;
    }
    std::vector<Var<Scalar>> out;
    for (const auto& name : requested) out.push_back(found.at(name));
    return out;
  }

 private:
  std::size_t layer_index(const std::string& name) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (layers_[i].name == name) return i;
    }
    throw ValidationError("unknown feature layer '" + name + "'");
  }

  Index width_divisor_ = 1;
  std::vector<Layer> layers_;
  std::vector<Conv2dLayer<Scalar>> convs_;
  std::vector<std::string> tap_points_;
};

template <typename Scalar>
std::vector<Var<Scalar>> extract_features(const FeatureExtractor<Scalar>& fe, const Var<Scalar>& x,
                                          const std::vector<std::string>& layers) {
  return fe.extract(x, layers);
}

enum class PerceptualMode { GRAM, AVP, NONE };

inline std::string to_string(PerceptualMode m) {
  switch (m) {
    case PerceptualMode::GRAM: return "GRAM";
    case PerceptualMode::AVP: return "AVP";
    case PerceptualMode::NONE: return "NONE";
  }
  return "?";
}

inline PerceptualMode parse_perceptual_mode(const std::string& s) {
  if (s == "GRAM") return PerceptualMode::GRAM;
  if (s == "AVP") return PerceptualMode::AVP;
  if (s == "NONE") return PerceptualMode::NONE;
  throw ValidationError("unknown perceptual mode '" + s + "' (expected GRAM, AVP or NONE)");
}

struct PerceptualConfig {
  std::map<std::string, double> layer_weights{{"relu1_2", 0.25}, {"relu2_2", 1.0}, {"relu4_3", 1.0}};
  PerceptualMode mode = PerceptualMode::GRAM;
  Index pool_kernel = 2;
  std::vector<std::string> style_layers = default_style_layers();
  std::vector<std::string> content_layers = default_content_layers();

  double weight(const std::string& layer) const {
    const auto it = layer_weights.find(layer);
    return it == layer_weights.end() ? 1.0 : it->second;
  }
};

// ||G(F_aug) - G(F_tgt)||_F^2, batch-averaged. F_tgt may have batch 1.
template <typename Scalar>
Var<Scalar> style_layer_loss(const Var<Scalar>& f_aug, const Var<Scalar>& f_tgt) {
  if (f_aug.shape().c != f_tgt.shape().c) {
    throw ShapeError("style_layer_loss: channel mismatch " + f_aug.shape().str() + " vs " + f_tgt.shape().str());
  }
  return squared_error(gram_matrix(f_aug), gram_matrix(f_tgt), Reduction::SampleMean);
}

// ||F_aug - F_src||^2 / (C H W), batch-averaged.
template <typename Scalar>
Var<Scalar> content_layer_loss(const Var<Scalar>& f_aug, const Var<Scalar>& f_src) {
  detail::require_same_shape(f_aug.shape(), f_src.shape(), "content_layer_loss");
  return squared_error(f_aug, f_src, Reduction::ElementMean);
}

// Squared distance of the average-pooled maps normalized by the pooled size,
// batch-averaged. F_b may have batch 1.
template <typename Scalar>
Var<Scalar> avgpool_layer_loss(const Var<Scalar>& f_a, const Var<Scalar>& f_b, Index pool_kernel) {
  detail::require_broadcastable(f_a.shape(), f_b.shape(), "avgpool_layer_loss");
  return squared_error(avg_pool2d(f_a, pool_kernel), avg_pool2d(f_b, pool_kernel), Reduction::ElementMean);
}

namespace detail {

template <typename Scalar, typename LayerLoss>
Var<Scalar> weighted_perceptual(const FeatureExtractor<Scalar>& fe, const PerceptualConfig& cfg, const Var<Scalar>& x_aug,
                                const Var<Scalar>& x_s, const Var<Scalar>& x_t, LayerLoss layer_loss) {
  std::vector<std::string> all = cfg.style_layers;
  all.insert(all.end(), cfg.content_layers.begin(), cfg.content_layers.end());
  const auto f_aug = fe.extract(x_aug, all);
  const auto f_tgt = fe.extract(x_t, cfg.style_layers);
  const auto f_src = fe.extract(x_s, cfg.content_layers);
  Var<Scalar> total(Tensor<Scalar>::scalar(0));
  for (std::size_t i = 0; i < cfg.style_layers.size(); ++i) {
    const auto w = static_cast<Scalar>(cfg.weight(cfg.style_layers[i]));
    total = add(total, scale(layer_loss(f_aug[i], f_tgt[i]), w));
  }
  for (std::size_t j = 0; j < cfg.content_layers.size(); ++j) {
    const auto w = static_cast<Scalar>(cfg.weight(cfg.content_layers[j]));
    total = add(total, scale(layer_loss(f_aug[cfg.style_layers.size() + j], f_src[j], false), w));
  }
  return total;
}

}  // namespace detail

// Weighted Gram style loss against the target plus weighted content loss
// against the source.
template <typename Scalar>
Var<Scalar> perceptual_loss_gram(const FeatureExtractor<Scalar>& fe, const PerceptualConfig& cfg,
                                 const Var<Scalar>& x_aug, const Var<Scalar>& x_s, const Var<Scalar>& x_t) {
  if (cfg.mode != PerceptualMode::GRAM) throw UsageError("perceptual_loss_gram requires mode GRAM");
  return detail::weighted_perceptual(fe, cfg, x_aug, x_s, x_t,
                                     [](const Var<Scalar>& a, const Var<Scalar>& b, bool style = true) {
                                       return style ? style_layer_loss(a, b) : content_layer_loss(a, b);
                                     });
}

// Same pairing as the Gram variant with the pooled layer loss for both terms.
template <typename Scalar>
Var<Scalar> perceptual_loss_avp(const FeatureExtractor<Scalar>& fe, const PerceptualConfig& cfg,
                                const Var<Scalar>& x_aug, const Var<Scalar>& x_s, const Var<Scalar>& x_t) {
  if (cfg.mode != PerceptualMode::AVP) throw UsageError("perceptual_loss_avp requires mode AVP");
  const Index k = cfg.pool_kernel;
  return detail::weighted_perceptual(fe, cfg, x_aug, x_s, x_t,
                                     [k](const Var<Scalar>& a, const Var<Scalar>& b, bool = true) {
                                       return avgpool_layer_loss(a, b, k);
                                     });
}

template <typename Scalar>
Var<Scalar> perceptual_loss(const FeatureExtractor<Scalar>& fe, const PerceptualConfig& cfg, const Var<Scalar>& x_aug,
                            const Var<Scalar>& x_s, const Var<Scalar>& x_t) {
  switch (cfg.mode) {
    case PerceptualMode::GRAM: return perceptual_loss_gram(fe, cfg, x_aug, x_s, x_t);
    case PerceptualMode::AVP: return perceptual_loss_avp(fe, cfg, x_aug, x_s, x_t);
    case PerceptualMode::NONE: break;
  }
  return Var<Scalar>(Tensor<Scalar>::scalar(0));
}

}  // namespace osuda
