#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "osuda/digest.hpp"
#include "osuda/trainer.hpp"
#include "support.hpp"

namespace osuda {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("trainer");
    corpus_ = new SyntheticCorpus(make_synthetic_corpus(dir_->path(), 0, 4, 3));
  }
  static void TearDownTestSuite() {
    delete corpus_;
    delete dir_;
  }

  static TrainConfig desk() {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.input_size = 16;
    cfg.cm_lr = 0.01;
    cfg.variant = AugmenterVariant::DE;
    cfg.use_rec_loss = true;
    cfg.aum_base_channels = 4;
    cfg.classifier_backbone = "small_cnn";
    cfg.classifier_width = 4;
    cfg.test_mode = true;
    cfg.source_root = corpus_->source.root.string();
    cfg.target_root = corpus_->target.root.string();
    return cfg;
  }

  static TargetSet targets(const TrainConfig& cfg) {
    return select_targets(corpus_->target, cfg.k_targets, cfg.target_selection_seed, cfg.input_size);
  }

  static Trainer make(const TrainConfig& cfg) { return Trainer(cfg, corpus_->source, targets(cfg)); }

  static ImageBatch source_batch(Index size) {
    const std::vector<std::size_t> idx{0, 5, 10, 3};
    return load_batch(corpus_->source, idx, size);
  }

  static TempDir* dir_;
  static SyntheticCorpus* corpus_;
};

TempDir* TrainerTest::dir_ = nullptr;
SyntheticCorpus* TrainerTest::corpus_ = nullptr;

FeatureExtractor<float> tiny_sam() { return FeatureExtractor<float>::vgg16(16, 5); }

AugmenterState<float> tiny_aum(AugmenterVariant v, std::uint64_t seed) {
  return AugmenterState<float>::create(v, ArchitectureSpec::miniature(), seed);
}

AugmenterObjective de_objective() {
  AugmenterObjective obj;
  obj.use_rec_loss = true;
  return obj;
}

TEST_F(TrainerTest, ClassifierStepLeavesTheAugmenterAlone) {
  const auto batch = source_batch(16);
  const auto x_t = targets(desk()).images;
  auto cm = ClassifierState<float>::create(Backbone::SmallCnn, 3, 1, 4);
  auto aum = tiny_aum(AugmenterVariant::DE, 2);
  const auto before = cm.clone();
  const auto aum_digest = parameter_digest(aum.parameters());
  const auto cm_digest = parameter_digest(cm.parameters());
  Sgd<float> opt(cm.parameters(), 0.01);
  const double loss = step_classifier(cm, opt, &aum, batch.data, batch.labels, x_t, std::nullopt);

  EXPECT_EQ(parameter_digest(aum.parameters()), aum_digest);
  EXPECT_NE(parameter_digest(cm.parameters()), cm_digest);
  Tensor<float> augmented;
  {
    NoGradGuard guard;
    augmented = augment(aum, Var<float>(batch.data), Var<float>(x_t)).value();
  }
  const double expected = cross_entropy(before.forward(Var<float>(augmented), true), batch.labels).item();
  EXPECT_NEAR(loss, expected, 1e-5);
}

TEST_F(TrainerTest, AugmenterStepLeavesClassifierAndAlignmentAlone) {
  const auto batch = source_batch(16);
  const auto x_t = targets(desk()).images;
  const auto cm = ClassifierState<float>::create(Backbone::SmallCnn, 3, 1, 4);
  const auto sam = tiny_sam();
  auto aum = tiny_aum(AugmenterVariant::DE, 3);
  const auto before = aum.clone();
  const auto cm_digest = parameter_digest(cm.parameters());
  const auto sam_digest = parameter_digest(sam.parameters());
  const auto aum_digest = parameter_digest(aum.parameters());
  AdamW<float> opt(aum.parameters(), 1e-3);
  const auto objective = de_objective();
  const auto loss = step_augmenter(aum, opt, sam, objective, batch.data, x_t, std::nullopt);

  EXPECT_EQ(parameter_digest(cm.parameters()), cm_digest);
  EXPECT_EQ(parameter_digest(sam.parameters()), sam_digest);
  EXPECT_NE(parameter_digest(aum.parameters()), aum_digest);
  EXPECT_GT(loss.reconstruction, 0.0);
  EXPECT_NEAR(loss.total, loss.perceptual + loss.reconstruction, 1e-6);

  NoGradGuard guard;
  const Var<float> vs(batch.data), vt(x_t);
  const double perceptual = perceptual_loss(sam, objective.perceptual, augment(before, vs, vt), vs, vt).item();
  const double rec = reconstruction_loss(before, Var<float>(concat_batch(batch.data, x_t))).item();
  EXPECT_NEAR(loss.perceptual, perceptual, 1e-5);
  EXPECT_NEAR(loss.reconstruction, rec, 1e-5);
}

TEST_F(TrainerTest, SourceOnlyStepUsesRawImages) {
  const auto batch = source_batch(16);
  auto cm = ClassifierState<float>::create(Backbone::SmallCnn, 3, 1, 4);
  const auto before = cm.clone();
  Sgd<float> opt(cm.parameters(), 0.01);
  const double loss = step_classifier<float>(cm, opt, nullptr, batch.data, batch.labels, batch.data, std::nullopt);
  EXPECT_NEAR(loss, cross_entropy(before.forward(Var<float>(batch.data), true), batch.labels).item(), 1e-5);
}

TEST_F(TrainerTest, RepeatedAugmenterStepsReduceTheLoss) {
  const auto batch = source_batch(16);
  const auto x_t = targets(desk()).images;
  const auto sam = tiny_sam();
  const auto objective = de_objective();
  std::vector<double> ratios;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto aum = tiny_aum(AugmenterVariant::DE, seed);
    AdamW<float> opt(aum.parameters(), 1e-3);
    double first = 0, last = 0;
    for (int step = 0; step < 50; ++step) {
      const double loss = step_augmenter(aum, opt, sam, objective, batch.data, x_t, std::nullopt).total;
      if (step == 0) first = loss;
      last = loss;
    }
    ratios.push_back(last / first);
  }
  std::sort(ratios.begin(), ratios.end());
  EXPECT_LT(ratios[1], 1.0);
}

// Central difference of a tensor-valued function of one parameter coordinate.
template <typename F>
Tensor<double> directional(Var<double> param, Index i, F f, double h = 1e-6) {
  NoGradGuard guard;
  const double original = param.value().data()[i];
  param.mutable_value().data()[i] = original + h;
  const Tensor<double> plus = f();
  param.mutable_value().data()[i] = original - h;
  const Tensor<double> minus = f();
  param.mutable_value().data()[i] = original;
  Tensor<double> out(plus.shape());
  out.array() = (plus.array() - minus.array()) / (2 * h);
  return out;
}

// Finite differences straight through the objective cross ReLU kinks of the
// extractor (instance norm on 2x2 planes amplifies weight perturbations), so
// the oracle chains a finite-difference Jacobian column of the augmenter
// output with the extractor gradient at that output, plus a finite
// difference of the smooth reconstruction term.
TEST_F(TrainerTest, ObjectiveGradientMatchesChainedFiniteDifferences) {
  std::mt19937_64 rng(4);
  const auto aum = AugmenterState<double>::create(AugmenterVariant::DE, ArchitectureSpec::miniature(), 5);
  const auto sam = FeatureExtractor<double>::vgg16(16, 6);
  const auto x_s = testing::random_tensor({2, 3, 16, 16}, rng, 0.0, 1.0);
  const auto x_t = testing::random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0);
  const Var<double> vs(x_s), vt(x_t);
  auto augmented = [&] { return augment(aum, vs, vt).value(); };
  auto rec = [&] { return Tensor<double>::scalar(reconstruction_loss(aum, Var<double>(concat_batch(x_s, x_t))).item()); };
  for (auto mode : {PerceptualMode::GRAM, PerceptualMode::AVP}) {
    auto objective = de_objective();
    objective.perceptual.mode = mode;
    Var<double> x_aug(augmented(), true);
    backward(perceptual_loss(sam, objective.perceptual, x_aug, vs, vt));
    const Tensor<double> g_aug = x_aug.grad();
    for (const auto& p : aum.parameters()) {
      Var<double> param = p.var;
      param.zero_grad();
      backward(augmenter_loss(aum, sam, objective, x_s, x_t, std::nullopt).total);
      const Tensor<double> analytic = param.grad();
      param.zero_grad();
      std::uniform_int_distribution<Index> pick(0, param.value().numel() - 1);
      double diff = 0, scale = 0;
      for (int probe = 0; probe < 3; ++probe) {
        const Index i = pick(rng);
        const double chained = (directional(param, i, augmented).array() * g_aug.array()).sum() +
                               directional(param, i, rec).item();
        diff += std::pow(analytic.data()[i] - chained, 2);
        scale += std::pow(analytic.data()[i], 2) + std::pow(chained, 2);
      }
      EXPECT_LE(std::sqrt(diff), 1e-4 * std::max(std::sqrt(scale), 1e-3)) << to_string(mode) << " " << p.name;
    }
  }
}

TEST_F(TrainerTest, SharedEncoderStepNeedsLambda) {
  const auto batch = source_batch(16);
  const auto x_t = targets(desk()).images;
  const auto sam = tiny_sam();
  auto aum = tiny_aum(AugmenterVariant::SE, 1);
  AdamW<float> opt(aum.parameters(), 1e-3);
  AugmenterObjective objective;
  EXPECT_THROW(step_augmenter(aum, opt, sam, objective, batch.data, x_t, std::nullopt), UsageError);
  const auto loss = step_augmenter(aum, opt, sam, objective, batch.data, x_t, 0.8);
  EXPECT_EQ(loss.reconstruction, 0.0);
  EXPECT_EQ(loss.total, loss.perceptual);
}

TEST_F(TrainerTest, AlternationFollowsWarmupAndStepRatio) {
  auto cfg = desk();
  cfg.classifier_warmup_steps = 2;
  cfg.step_ratio = StepRatio{1, 2};
  auto trainer = make(cfg);
  const auto aum_digest = parameter_digest(trainer.augmenter()->parameters());
  for (int step = 0; step < 2; ++step) {
    const auto records = trainer.iterate();
    ASSERT_EQ(records.size(), 1u);
    EXPECT_EQ(records[0].phase, "classifier");
  }
  EXPECT_EQ(parameter_digest(trainer.augmenter()->parameters()), aum_digest);
  const auto records = trainer.iterate();
  ASSERT_EQ(records.size(), 3u);
  EXPECT_EQ(records[0].phase, "classifier");
  EXPECT_EQ(records[1].phase, "augmenter");
  EXPECT_EQ(records[2].phase, "augmenter");
  EXPECT_EQ(records[2].repeat, 1);
  EXPECT_EQ(records[2].step, 2);
  EXPECT_GT(records[1].reconstruction, 0.0);
}

TEST_F(TrainerTest, AlignmentNeverChangesOverAnEpoch) {
  auto trainer = make(desk());
  const auto sam_digest = parameter_digest(trainer.alignment().parameters());
  ASSERT_EQ(trainer.batches_per_epoch(), 3u);
  while (trainer.epoch() == 0) trainer.iterate();
  EXPECT_EQ(parameter_digest(trainer.alignment().parameters()), sam_digest);
}

TEST_F(TrainerTest, IdenticalSeedsGiveIdenticalTrajectories) {
  auto a = make(desk());
  auto b = make(desk());
  while (!a.done()) {
    const auto ra = a.iterate();
    const auto rb = b.iterate();
    ASSERT_EQ(ra.size(), rb.size());
    for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_EQ(ra[i].loss, rb[i].loss);
  }
  EXPECT_TRUE(b.done());
  EXPECT_EQ(parameter_digest(a.classifier().parameters()), parameter_digest(b.classifier().parameters()));
  EXPECT_EQ(parameter_digest(a.augmenter()->parameters()), parameter_digest(b.augmenter()->parameters()));
  auto cfg = desk();
  cfg.train_seed = 1;
  auto c = make(cfg);
  EXPECT_NE(c.iterate()[0].loss, make(desk()).iterate()[0].loss);
}

TEST_F(TrainerTest, ResumedRunMatchesTheUninterruptedOne) {
  auto cfg = desk();
  cfg.epochs = 5;
  cfg.variant = AugmenterVariant::SE;
  cfg.use_rec_loss = false;
  cfg.k_targets = 3;
  TempDir out("resume");
  auto trainer = make(cfg);
  for (int i = 0; i < 4; ++i) trainer.iterate();
  save_checkpoint(trainer.checkpoint(), out.path() / "c.osc");
  std::vector<double> expected;
  for (int i = 0; i < 10; ++i) {
    for (const auto& r : trainer.iterate()) expected.push_back(r.loss);
  }

  auto resumed = Trainer::resume(load_checkpoint(out.path() / "c.osc"), corpus_->source);
  EXPECT_EQ(resumed.global_step(), 4);
  std::vector<double> actual;
  for (int i = 0; i < 10; ++i) {
    for (const auto& r : resumed.iterate()) actual.push_back(r.loss);
  }
  ASSERT_EQ(actual.size(), expected.size());
  for (std::size_t i = 0; i < actual.size(); ++i) EXPECT_NEAR(actual[i], expected[i], 1e-6) << i;
  EXPECT_EQ(parameter_digest(resumed.classifier().parameters()), parameter_digest(trainer.classifier().parameters()));
}

TEST_F(TrainerTest, OneTargetIsUsedForEveryBatch) {
  auto cfg = desk();
  auto one = make(cfg);
  while (!one.done()) {
    for (const auto& r : one.iterate()) EXPECT_EQ(r.target_index, 0);
  }
  EXPECT_EQ(one.targets().k, 1);
  cfg.k_targets = 3;
  auto three = make(cfg);
  std::set<int> used;
  while (!three.done()) {
    for (const auto& r : three.iterate()) used.insert(r.target_index);
  }
  EXPECT_GT(used.size(), 1u);
  EXPECT_LE(*used.rbegin(), 2);
}

TEST_F(TrainerTest, SourceOnlyRunHasNoAugmenter) {
  auto cfg = desk();
  cfg.use_augmenter = false;
  auto trainer = make(cfg);
  EXPECT_EQ(trainer.augmenter(), nullptr);
  const auto records = trainer.iterate();
  ASSERT_EQ(records.size(), 1u);
  EXPECT_EQ(records[0].phase, "classifier");
}

TEST_F(TrainerTest, MaxStepsStopsEarly) {
  auto cfg = desk();
  cfg.max_steps = 2;
  auto trainer = make(cfg);
  trainer.iterate();
  EXPECT_FALSE(trainer.done());
  trainer.iterate();
  EXPECT_TRUE(trainer.done());
  EXPECT_THROW(trainer.iterate(), UsageError);
}

TEST_F(TrainerTest, DivergenceAbortsWithDiagnostics) {
  auto cfg = desk();
  cfg.use_augmenter = false;
  cfg.cm_lr = 1e30;
  std::vector<nlohmann::json> records;
  Trainer trainer(cfg, corpus_->source, targets(cfg), [&](const nlohmann::json& r) { records.push_back(r); });
  EXPECT_THROW(
      {
        while (!trainer.done()) trainer.iterate();
      },
      TrainingDiverged);
  ASSERT_FALSE(records.empty());
  const auto& last = records.back();
  EXPECT_EQ(last.at("event"), "diverged");
  EXPECT_TRUE(last.contains("grad_norm_classifier"));
  EXPECT_TRUE(last.contains("step"));
}

TEST_F(TrainerTest, TrainWritesLogCheckpointAndMetrics) {
  auto cfg = desk();
  cfg.epochs = 1;
  TempDir out("train");
  const auto result = train(cfg, corpus_->source, targets(cfg), out.path() / "run", &corpus_->target);
  ASSERT_TRUE(result.report.has_value());
  EXPECT_EQ(result.report->n_samples, 12u);
  EXPECT_EQ(result.records.size(), 6u);
  for (const char* name : {"train_log.jsonl", "checkpoint.osc", "metrics.json", "metrics.csv", "metrics.md"}) {
    EXPECT_TRUE(fs::exists(out.path() / "run" / name)) << name;
  }
  std::ifstream log(out.path() / "run" / "train_log.jsonl");
  std::string line;
  std::size_t steps = 0;
  while (std::getline(log, line)) {
    const auto record = nlohmann::json::parse(line);
    if (record.contains("phase")) {
      ++steps;
      EXPECT_TRUE(record.contains("loss"));
      EXPECT_TRUE(record.contains("millis"));
    }
  }
  EXPECT_EQ(steps, 6u);

  const auto loaded = load_checkpoint(out.path() / "run" / "checkpoint.osc");
  EXPECT_EQ(config_digest(checkpoint_config(loaded)), config_digest(cfg));
  const auto cm = checkpoint_classifier(loaded);
  EXPECT_EQ(evaluate(cm, corpus_->target, 32, cfg.input_size).per_class_accuracy, result.report->per_class_accuracy);
  EXPECT_TRUE(checkpoint_augmenter(loaded).has_value());
  EXPECT_TRUE(checkpoint_targets(loaded).images.bit_equal(targets(cfg).images));

  std::ofstream(out.path() / "file") << "x";
  EXPECT_THROW(train(cfg, corpus_->source, targets(cfg), out.path() / "file" / "run"), PathError);
}

TEST_F(TrainerTest, CheckpointSavesAreByteStable) {
  TempDir out("stable");
  auto trainer = make(desk());
  trainer.iterate();
  const auto c = trainer.checkpoint();
  save_checkpoint(c, out.path() / "a.osc");
  save_checkpoint(trainer.checkpoint(), out.path() / "b.osc");
  auto bytes = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(sha256_hex(bytes(out.path() / "a.osc")), sha256_hex(bytes(out.path() / "b.osc")));
}

TEST_F(TrainerTest, CheckpointValidationNamesTheField) {
  TempDir out("ckpt");
  auto trainer = make(desk());
  auto c = trainer.checkpoint();
  auto expect_field = [&](const TensorContainer& bad, const std::string& field) {
    save_checkpoint(bad, out.path() / "bad.osc");
    try {
      load_checkpoint(out.path() / "bad.osc");
      ADD_FAILURE() << field << " accepted";
    } catch (const CheckpointError& e) {
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  };
  auto wrong_version = c;
  wrong_version.meta["checkpoint_version"] = kCheckpointVersion + 1;
  expect_field(wrong_version, "checkpoint_version");
  auto wrong_kind = c;
  wrong_kind.kind = "weights";
  expect_field(wrong_kind, "kind");
  auto wrong_digest = c;
  wrong_digest.meta["config_digest"] = "0";
  try {
    checkpoint_config(wrong_digest);
    ADD_FAILURE() << "config_digest accepted";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("config_digest"), std::string::npos) << e.what();
  }

  TempDir other("other-corpus");
  const auto different = make_synthetic_corpus(other.path(), 0, 4, 2);
  EXPECT_THROW(Trainer::resume(c, different.source), CheckpointError);
}

}  // namespace
}  // namespace osuda
