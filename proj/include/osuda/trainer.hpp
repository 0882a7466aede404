#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "osuda/alignment.hpp"
#include "osuda/augmentation.hpp"
#include "osuda/classifier.hpp"
#include "osuda/config.hpp"
#include "osuda/container.hpp"
#include "osuda/data.hpp"
#include "osuda/evaluation.hpp"
#include "osuda/optim.hpp"

namespace osuda {

// What step 2 minimizes.
struct AugmenterObjective {
  PerceptualConfig perceptual;
  bool use_rec_loss = false;
  bool rec_on_target = true;

  static AugmenterObjective from_config(const TrainConfig& cfg) {
    return AugmenterObjective{cfg.perceptual(), cfg.use_rec_loss, cfg.rec_on_target};
  }
};

template <typename Scalar>
struct AugmenterLossTerms {
  Var<Scalar> perceptual;
  Var<Scalar> reconstruction;  // undefined without the reconstruction term
  Var<Scalar> total;
};

struct AugmenterLoss {
  double perceptual = 0;
  double reconstruction = 0;
  double total = 0;
};

// Step 2 objective on one batch: perceptual loss of T(x_s, x_t) plus, when
// enabled, the reconstruction loss on x_s (and x_t) with unit weight.
template <typename Scalar>
AugmenterLossTerms<Scalar> augmenter_loss(const AugmenterState<Scalar>& aum, const FeatureExtractor<Scalar>& sam,
                                          const AugmenterObjective& objective, const Tensor<Scalar>& x_s,
                                          const Tensor<Scalar>& x_t, std::optional<double> lambda) {
  const Var<Scalar> vs(x_s), vt(x_t);
  AugmenterLossTerms<Scalar> terms;
  terms.perceptual = perceptual_loss(sam, objective.perceptual, augment(aum, vs, vt, lambda), vs, vt);
  terms.total = terms.perceptual;
  if (objective.use_rec_loss) {
    const Var<Scalar> rec_input(objective.rec_on_target ? concat_batch(x_s, x_t) : x_s);
    terms.reconstruction = reconstruction_loss(aum, rec_input);
    terms.total = add(terms.total, terms.reconstruction);
  }
  return terms;
}

namespace detail {

template <typename Scalar>
void require_finite(double loss, const std::string& what, const ParameterList<Scalar>& params) {
  if (std::isfinite(loss)) return;
  throw TrainingDiverged(what + " loss is not finite (" + std::to_string(loss) + "), gradient norm " +
                         std::to_string(grad_norm(params)));
}

}  // namespace detail

// Step 1: one classifier update on augmented sources with source labels. The
// augmenter runs without gradient recording, so its parameters cannot move.
// A null augmenter trains on the raw sources (the source-only baseline).
template <typename Scalar>
double step_classifier(ClassifierState<Scalar>& cm, Sgd<Scalar>& optimizer, const AugmenterState<Scalar>* aum,
                       const Tensor<Scalar>& x_s, const std::vector<int>& labels, const Tensor<Scalar>& x_t,
                       std::optional<double> lambda) {
  Tensor<Scalar> inputs = x_s;
  if (aum != nullptr) {
    NoGradGuard no_grad;
    inputs = augment(*aum, Var<Scalar>(x_s), Var<Scalar>(x_t), lambda).value();
  }
  optimizer.zero_grad();
  const Var<Scalar> loss = cross_entropy(cm.forward(Var<Scalar>(inputs), true), labels);
  backward(loss);
  const double value = static_cast<double>(loss.item());
  detail::require_finite(value, "classifier", cm.parameters());
  optimizer.step();
  return value;
}

// Step 2: one augmenter update. The classifier is not involved and the
// feature extractor holds no trainable parameters.
template <typename Scalar>
AugmenterLoss step_augmenter(AugmenterState<Scalar>& aum, AdamW<Scalar>& optimizer, const FeatureExtractor<Scalar>& sam,
                             const AugmenterObjective& objective, const Tensor<Scalar>& x_s, const Tensor<Scalar>& x_t,
                             std::optional<double> lambda) {
  optimizer.zero_grad();
  const auto terms = augmenter_loss(aum, sam, objective, x_s, x_t, lambda);
  AugmenterLoss out;
  out.perceptual = static_cast<double>(terms.perceptual.item());
  out.reconstruction = terms.reconstruction.defined() ? static_cast<double>(terms.reconstruction.item()) : 0.0;
  out.total = static_cast<double>(terms.total.item());
  if (!terms.total.requires_grad()) {
    throw UsageError("step_augmenter: the objective does not depend on the augmenter (perceptual mode NONE without "
                     "reconstruction loss)");
  }
  backward(terms.total);
  detail::require_finite(out.total, "augmenter", aum.parameters());
  optimizer.step();
  return out;
}

// ---------------------------------------------------------------------------
// Training loop (float).

using WarningSink = std::function<void(const std::string&)>;

// Frozen VGG-16 from cfg.sam_weights, or the tiny random stand-in when the
// file is absent and cfg.test_mode is set.
FeatureExtractor<float> build_alignment(const TrainConfig& cfg, const WarningSink& warn = {});

// Classifier with pretrained backbone weights from cfg.classifier_weights
// (the head is always fresh). small_cnn and test mode accept random weights.
ClassifierState<float> build_classifier(const TrainConfig& cfg, Index num_classes, std::uint64_t seed,
                                        const WarningSink& warn = {});

struct StepRecord {
  long long step = 0;  // batch index
  int epoch = 0;
  std::string phase;   // "classifier" or "augmenter"
  int repeat = 0;      // index within the batch's step_ratio group
  double loss = 0;
  double perceptual = 0;
  double reconstruction = 0;
  double lambda = -1;  // -1 when no mixup coefficient was drawn
  int target_index = 0;
  double millis = 0;

  nlohmann::json to_json() const;
};

inline constexpr int kCheckpointVersion = 1;

// Alternating two-step training over a source dataset.
class Trainer {
 public:
  using RecordSink = std::function<void(const nlohmann::json&)>;

  Trainer(const TrainConfig& cfg, DomainDataset source, TargetSet targets, RecordSink sink = {});

  // Restores every state from a checkpoint. The source dataset must have the
  // class names recorded in it.
  static Trainer resume(const TensorContainer& checkpoint, DomainDataset source, RecordSink sink = {});

  bool done() const;
  // Processes one source batch and returns its step records.
  std::vector<StepRecord> iterate();

  TensorContainer checkpoint();

  const TrainConfig& config() const { return cfg_; }
  const DomainDataset& source() const { return source_; }
  const TargetSet& targets() const { return targets_; }
  ClassifierState<float>& classifier() { return cm_; }
  AugmenterState<float>* augmenter() { return aum_ ? &*aum_ : nullptr; }
  const FeatureExtractor<float>& alignment() const { return sam_; }
  long long global_step() const { return global_step_; }
  int epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const;

 private:
  void emit(const nlohmann::json& record) const;
  void begin_epoch();
  [[noreturn]] void diverged(const TrainingDiverged& e, const StepRecord& at);

  TrainConfig cfg_;
  DomainDataset source_;
  TargetSet targets_;
  RecordSink sink_;

  FeatureExtractor<float> sam_;
  ClassifierState<float> cm_;
  std::optional<AugmenterState<float>> aum_;
  Sgd<float> opt_cm_;
  std::optional<AdamW<float>> opt_aum_;

  Rng shuffle_rng_;
  Rng mixup_rng_;
  Rng target_rng_;

  std::vector<std::size_t> permutation_;
  std::size_t cursor_ = 0;
  int epoch_ = 0;
  long long global_step_ = 0;
};

void save_checkpoint(const TensorContainer& checkpoint, const std::filesystem::path& path);
// Reads and validates a checkpoint container (kind and version).
TensorContainer load_checkpoint(const std::filesystem::path& path);
TrainConfig checkpoint_config(const TensorContainer& checkpoint);

// Rebuilds the models stored in a checkpoint for inference.
ClassifierState<float> checkpoint_classifier(const TensorContainer& checkpoint);
std::optional<AugmenterState<float>> checkpoint_augmenter(const TensorContainer& checkpoint);
TargetSet checkpoint_targets(const TensorContainer& checkpoint);

struct TrainResult {
  TensorContainer checkpoint;
  std::optional<MetricsReport> report;
  std::vector<StepRecord> records;
};

// Full run into out_dir: train_log.jsonl, checkpoint.osc (periodic and
// final) and, with an evaluation set, metrics.json plus csv/markdown tables.
TrainResult train(const TrainConfig& cfg, const DomainDataset& source, const TargetSet& targets,
                  const std::filesystem::path& out_dir, const DomainDataset* eval_set = nullptr,
                  const WarningSink& warn = {});

}  // namespace osuda
