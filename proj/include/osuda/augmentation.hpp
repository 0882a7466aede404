#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "osuda/layers.hpp"

namespace osuda {

// Augmentation module: an encoder-decoder that restyles a source image after
// a target image. Two variants share the encoder/decoder blueprint:
//
//   SE  shared encoder; source and target embeddings are mixed
//       (lambda * z_s + (1 - lambda) * z_t) before decoding.
//   DE  separate style and content encoders; their embeddings are
//       concatenated and fused by a bottleneck convolution.

enum class AugmenterVariant { SE, DE };

enum class EncoderRole { Shared, Style, Content };

inline std::string to_string(AugmenterVariant v) { return v == AugmenterVariant::SE ? "SE" : "DE"; }

inline AugmenterVariant parse_augmenter_variant(const std::string& s) {
  if (s == "SE") return AugmenterVariant::SE;
  if (s == "DE") return AugmenterVariant::DE;
  throw ValidationError("unknown augmenter variant '" + s + "' (expected SE or DE)");
}

// Layer blueprint. With base_channels = 64 the encoder runs
// conv(64,k7,s2) conv(128,k4,s2) conv(256,k4,s2) + 4 residual blocks and the
// embedding has 256 channels; base_channels = 4 is the miniature used in tests.
struct ArchitectureSpec {
  Index base_channels = 64;
  Index residual_blocks = 4;
  double leaky_slope = 0.2;
  // Instance normalization after every hidden convolution. Without it the
  // unnormalized chain can grow without bound under training and saturate
  // the output sigmoid.
  bool instance_norm = true;
  // Initialization gains: the second conv of every residual branch and the
  // output conv. Without normalization, full-gain residual branches compound
  // and saturate the output sigmoid at initialization.
  double residual_gain = 0.1;
  double output_gain = 1.0;

  static constexpr Index kEncoderStride = 8;

  static ArchitectureSpec full() { return {}; }
  static ArchitectureSpec miniature() {
    ArchitectureSpec s;
    s.base_channels = 4;
    return s;
  }

  Index embedding_channels() const { return 4 * base_channels; }
  Index decoder_channels() const { return 2 * base_channels; }
};

template <typename Scalar>
Var<Scalar> maybe_instance_norm(const Var<Scalar>& x, bool enabled) {
  return enabled ? instance_norm(x) : x;
}

template <typename Scalar>
struct ResidualBlock {
  Conv2dLayer<Scalar> conv1;
  Conv2dLayer<Scalar> conv2;
  bool norm = true;

  static ResidualBlock create(Index channels, Padding padding, Rng& rng, const ArchitectureSpec& spec) {
    const auto opt = Conv2dLayer<Scalar>::same(3, 1, padding);
    return {Conv2dLayer<Scalar>::create(channels, channels, 3, opt, rng),
            Conv2dLayer<Scalar>::create(channels, channels, 3, opt, rng, true, true, spec.residual_gain),
            spec.instance_norm};
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const {
    const auto h = relu(maybe_instance_norm(conv1(x), norm));
    return add(x, maybe_instance_norm(conv2(h), norm));
  }

  void collect(const std::string& prefix, ParameterList<Scalar>& out) const {
    conv1.collect(prefix + ".conv1", out);
    conv2.collect(prefix + ".conv2", out);
  }
};

template <typename Scalar>
struct Encoder {
  std::vector<Conv2dLayer<Scalar>> downsample;
  std::vector<ResidualBlock<Scalar>> blocks;
  Scalar slope;
  bool norm = true;

  static Encoder create(const ArchitectureSpec& spec, Rng& rng) {
    Encoder e;
    const Index b = spec.base_channels;
    e.downsample.push_back(Conv2dLayer<Scalar>::create(3, b, 7, Conv2dLayer<Scalar>::same(7, 2), rng));
    e.downsample.push_back(Conv2dLayer<Scalar>::create(b, 2 * b, 4, Conv2dLayer<Scalar>::same(4, 2), rng));
    e.downsample.push_back(Conv2dLayer<Scalar>::create(2 * b, 4 * b, 4, Conv2dLayer<Scalar>::same(4, 2), rng));
    for (Index i = 0; i < spec.residual_blocks; ++i) {
      e.blocks.push_back(ResidualBlock<Scalar>::create(4 * b, Padding::Zero, rng, spec));
    }
    e.slope = static_cast<Scalar>(spec.leaky_slope);
    e.norm = spec.instance_norm;
    return e;
  }

  Var<Scalar> operator()(Var<Scalar> x) const {
    for (const auto& conv : downsample) x = leaky_relu(maybe_instance_norm(conv(x), norm), slope);
    for (const auto& block : blocks) x = block(x);
    return x;
  }

  void collect(const std::string& prefix, ParameterList<Scalar>& out) const {
    for (std::size_t i = 0; i < downsample.size(); ++i) downsample[i].collect(prefix + ".down" + std::to_string(i), out);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".res" + std::to_string(i), out);
  }
};

template <typename Scalar>
struct Decoder {
  std::vector<ResidualBlock<Scalar>> blocks;
  std::vector<Conv2dLayer<Scalar>> upsample;
  Conv2dLayer<Scalar> output;
  Scalar slope;
  bool norm = true;

  static Decoder create(const ArchitectureSpec& spec, Rng& rng) {
    Decoder d;
    const Index emb = spec.embedding_channels();
    const Index mid = spec.decoder_channels();
    for (Index i = 0; i < spec.residual_blocks; ++i) {
      d.blocks.push_back(ResidualBlock<Scalar>::create(emb, Padding::Reflect, rng, spec));
    }
    const auto opt = Conv2dLayer<Scalar>::same(3, 1, Padding::Reflect);
    d.upsample.push_back(Conv2dLayer<Scalar>::create(emb, mid, 3, opt, rng));
    d.upsample.push_back(Conv2dLayer<Scalar>::create(mid, mid, 3, opt, rng));
    d.output = Conv2dLayer<Scalar>::create(mid, 3, 3, opt, rng, true, true, spec.output_gain);
    d.slope = static_cast<Scalar>(spec.leaky_slope);
    d.norm = spec.instance_norm;
    return d;
  }

  // Pre-sigmoid output. Two x2 bilinear stages with convolutions, then a
  // third bilinear stage straight to the requested size so the output
  // matches the input resolution of the x8 encoder.
  Var<Scalar> logits(Var<Scalar> z, Index out_h, Index out_w) const {
    for (const auto& block : blocks) z = block(z);
    for (const auto& conv : upsample) {
      z = resize_bilinear(z, 2 * z.shape().h, 2 * z.shape().w);
      z = leaky_relu(maybe_instance_norm(conv(z), norm), slope);
    }
    z = resize_bilinear(z, out_h, out_w);
    return output(z);
  }

  void collect(const std::string& prefix, ParameterList<Scalar>& out) const {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".res" + std::to_string(i), out);
    for (std::size_t i = 0; i < upsample.size(); ++i) upsample[i].collect(prefix + ".up" + std::to_string(i), out);
    output.collect(prefix + ".out", out);
  }
};

// Learnable state of the augmentation module.
template <typename Scalar>
class AugmenterState {
 public:
  static AugmenterState create(AugmenterVariant variant, const ArchitectureSpec& spec, std::uint64_t seed) {
    AugmenterState s;
    s.variant_ = variant;
    s.spec_ = spec;
    Rng rng(seed);
    if (variant == AugmenterVariant::SE) {
      s.encoders_.push_back(Encoder<Scalar>::create(spec, rng));
    } else {
      s.encoders_.push_back(Encoder<Scalar>::create(spec, rng));  // style
      s.encoders_.push_back(Encoder<Scalar>::create(spec, rng));  // content
      const Index emb = spec.embedding_channels();
      s.bottleneck_ = Conv2dLayer<Scalar>::create(2 * emb, emb, 7, Conv2dLayer<Scalar>::same(7), rng);
    }
    s.decoder_ = Decoder<Scalar>::create(spec, rng);
    return s;
  }

  AugmenterVariant variant() const { return variant_; }
  const ArchitectureSpec& spec() const { return spec_; }
  std::size_t encoder_count() const { return encoders_.size(); }
  bool has_bottleneck() const { return bottleneck_.has_value(); }

  const Encoder<Scalar>& encoder(EncoderRole role) const {
    const bool shared = variant_ == AugmenterVariant::SE;
    if (shared != (role == EncoderRole::Shared)) {
      throw UsageError("encoder role not available on the " + to_string(variant_) + " augmenter");
    }
    return encoders_[role == EncoderRole::Content ? 1 : 0];
  }
  const Conv2dLayer<Scalar>& bottleneck() const {
    if (!bottleneck_) throw UsageError("the SE augmenter has no bottleneck");
    return *bottleneck_;
  }
  const Decoder<Scalar>& decoder() const { return decoder_; }
  Decoder<Scalar>& mutable_decoder() { return decoder_; }

  ParameterList<Scalar> parameters() const {
    ParameterList<Scalar> out;
    if (variant_ == AugmenterVariant::SE) {
      encoders_[0].collect("shared_encoder", out);
    } else {
      encoders_[0].collect("style_encoder", out);
      encoders_[1].collect("content_encoder", out);
      bottleneck_->collect("bottleneck", out);
    }
    decoder_.collect("decoder", out);
    return out;
  }

  // Independent copy (parameters are not shared with this state).
  AugmenterState clone() const {
    AugmenterState copy = create(variant_, spec_, 0);
    assign_values(copy.parameters(), snapshot_values(parameters()));
    return copy;
  }

 private:
  AugmenterVariant variant_ = AugmenterVariant::SE;
  ArchitectureSpec spec_;
  std::vector<Encoder<Scalar>> encoders_;
  std::optional<Conv2dLayer<Scalar>> bottleneck_;
  Decoder<Scalar> decoder_;
};

template <typename Scalar>
Var<Scalar> encode(const AugmenterState<Scalar>& state, const Var<Scalar>& x, EncoderRole role) {
  const auto& enc = state.encoder(role);
  const Shape s = x.shape();
  if (s.c != 3) throw ShapeError("encode: expected 3-channel images, got " + s.str());
  if (s.h % ArchitectureSpec::kEncoderStride != 0 || s.w % ArchitectureSpec::kEncoderStride != 0) {
    throw ShapeError("encode: spatial size " + s.str() + " is not divisible by 8");
  }
  return enc(x);
}

// lambda * z_s + (1 - lambda) * z_t; a batch-1 z_t is shared by every source.
template <typename Scalar>
Var<Scalar> mixup_embeddings(const Var<Scalar>& z_s, const Var<Scalar>& z_t, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ValidationError("mixup lambda must lie in [0, 1], got " + std::to_string(lambda));
  }
  return mixup(z_s, z_t, static_cast<Scalar>(lambda));
}

// One draw from Beta(alpha, beta) through two gamma variates.
inline double sample_mixup_lambda(Rng& rng, double alpha = 5.0, double beta = 1.0) {
  std::gamma_distribution<double> ga(alpha, 1.0);
  std::gamma_distribution<double> gb(beta, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x / (x + y);
}

template <typename Scalar>
Var<Scalar> fuse_bottleneck(const AugmenterState<Scalar>& state, const Var<Scalar>& z_style,
                            const Var<Scalar>& z_content) {
  const auto& conv = state.bottleneck();
  if (z_style.shape().h != z_content.shape().h || z_style.shape().w != z_content.shape().w) {
    throw ShapeError("fuse_bottleneck: spatial mismatch " + z_style.shape().str() + " vs " + z_content.shape().str());
  }
  return relu(conv(concat_channels(z_style, z_content)));
}

template <typename Scalar>
Var<Scalar> decode(const AugmenterState<Scalar>& state, const Var<Scalar>& z, Index out_h, Index out_w) {
  if (z.shape().c != state.spec().embedding_channels()) {
    throw ShapeError("decode: embedding has " + std::to_string(z.shape().c) + " channels, expected " +
                     std::to_string(state.spec().embedding_channels()));
  }
  return sigmoid(state.decoder().logits(z, out_h, out_w));
}

// x_hat = T(x_s, x_t). SE needs a mixup lambda; DE ignores it.
template <typename Scalar>
Var<Scalar> augment(const AugmenterState<Scalar>& state, const Var<Scalar>& x_s, const Var<Scalar>& x_t,
                    std::optional<double> lambda = std::nullopt) {
  const Shape s = x_s.shape();
  if (x_t.shape().n != 1 && x_t.shape().n != s.n) {
    throw ShapeError("augment: target batch " + x_t.shape().str() + " does not match source " + s.str());
  }
  if (state.variant() == AugmenterVariant::SE) {
    if (!lambda) throw UsageError("augment: the SE augmenter needs a mixup lambda");
    const auto z_s = encode(state, x_s, EncoderRole::Shared);
    const auto z_t = encode(state, x_t, EncoderRole::Shared);
    return decode(state, mixup_embeddings(z_s, z_t, *lambda), s.h, s.w);
  }
  const auto z_style = encode(state, x_t, EncoderRole::Style);
  const auto z_content = encode(state, x_s, EncoderRole::Content);
  return decode(state, fuse_bottleneck(state, z_style, z_content), s.h, s.w);
}

template <typename Scalar>
Var<Scalar> augment(const AugmenterState<Scalar>& state, const Var<Scalar>& x_s, const Var<Scalar>& x_t, Rng& rng) {
  std::optional<double> lambda;
  if (state.variant() == AugmenterVariant::SE) lambda = sample_mixup_lambda(rng);
  return augment(state, x_s, x_t, lambda);
}

// Mean squared error between T(x, x) and x, averaged over every element.
template <typename Scalar>
Var<Scalar> reconstruction_loss(const AugmenterState<Scalar>& state, const Var<Scalar>& x) {
  if (state.variant() != AugmenterVariant::DE) {
    throw UsageError("reconstruction_loss is defined for the DE augmenter only");
  }
  const Var<Scalar> target = x.detach();
  return squared_error(augment(state, x, x), target, Reduction::ElementMean);
}

}  // namespace osuda
