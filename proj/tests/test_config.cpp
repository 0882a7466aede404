#include <gtest/gtest.h>

#include <fstream>

#include "osuda/config.hpp"
#include "support.hpp"

namespace osuda {
namespace {

TEST(Config, DefaultsFollowTheFullScaleSetup) {
  const TrainConfig cfg;
  EXPECT_EQ(cfg.epochs, 20);
  EXPECT_EQ(cfg.batch_size, 8);
  EXPECT_EQ(cfg.input_size, 224);
  EXPECT_EQ(cfg.cm_optimizer, "sgd");
  EXPECT_EQ(cfg.cm_lr, 1e-4);
  EXPECT_EQ(cfg.aum_optimizer, "adamw");
  EXPECT_EQ(cfg.aum_lr, 1e-3);
  EXPECT_EQ(cfg.mixup_alpha, 5.0);
  EXPECT_EQ(cfg.mixup_beta, 1.0);
  EXPECT_EQ(cfg.layer_weights.at("relu1_2"), 0.25);
  EXPECT_EQ(cfg.layer_weights.at("relu2_2"), 1.0);
  EXPECT_EQ(cfg.layer_weights.at("relu4_3"), 1.0);
  EXPECT_EQ(cfg.classifier_backbone, "resnet101");
  EXPECT_EQ(cfg.sam_backbone, "vgg16");
  EXPECT_EQ(cfg.step_ratio, (StepRatio{1, 1}));
  EXPECT_EQ(cfg.classifier_warmup_steps, 0);
  EXPECT_EQ(cfg.architecture().base_channels, 64);
  EXPECT_EQ(cfg.style_layers, (std::vector<std::string>{"relu1_2", "relu2_2"}));
  EXPECT_EQ(cfg.content_layers, (std::vector<std::string>{"relu4_3"}));
}

TEST(Config, ParsesCommentsBlankLinesAndSpaces) {
  const auto cfg = parse_config(
      "# desk run\n\nepochs = 3\nvariant=DE\nuse_rec_loss=true\nlayer_weights=relu1_2:0.5,relu2_2:1,relu4_3:2\n"
      "step_ratio=2:3\ncm_lr=0.01\n");
  EXPECT_EQ(cfg.epochs, 3);
  EXPECT_EQ(cfg.variant, AugmenterVariant::DE);
  EXPECT_TRUE(cfg.use_rec_loss);
  EXPECT_EQ(cfg.layer_weights.at("relu4_3"), 2.0);
  EXPECT_EQ(cfg.step_ratio, (StepRatio{2, 3}));
  EXPECT_EQ(cfg.cm_lr, 0.01);
  EXPECT_EQ(cfg.perceptual().weight("relu1_2"), 0.5);
  const auto layers = parse_config("style_layers=relu1_1, relu2_1\ncontent_layers=relu3_3\n");
  EXPECT_EQ(layers.perceptual().style_layers, (std::vector<std::string>{"relu1_1", "relu2_1"}));
  EXPECT_EQ(layers.perceptual().content_layers, (std::vector<std::string>{"relu3_3"}));
}

TEST(Config, UnknownKeyIsNamed) {
  try {
    parse_config("epochs=2\nlearning_rate=3\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
}

TEST(Config, BadValuesAreNamed) {
  TrainConfig cfg;
  for (const auto& [key, value] : std::vector<std::pair<std::string, std::string>>{
           {"epochs", "ten"}, {"cm_lr", "1e-4x"}, {"use_rec_loss", "yes"}, {"variant", "XE"},
           {"perceptual_mode", "L2"}, {"step_ratio", "1"}, {"layer_weights", "relu1_2"}}) {
    try {
      apply_setting(cfg, key, value);
      FAIL() << key << "=" << value << " accepted";
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(key), std::string::npos) << e.what();
    }
  }
  EXPECT_THROW(parse_config("epochs\n"), ConfigError);
}

TEST(Config, CanonicalTextRoundTrips) {
  TrainConfig cfg = parse_config("epochs=7\ncm_lr=0.1\nvariant=DE\nuse_rec_loss=true\nk_targets=3\n"
                                 "perceptual_mode=AVP\npool_kernel=3\nsource_root=/data/a b\ntrain_seed=18446744073709551615\n");
  const auto text = to_text(cfg);
  const auto again = parse_config(text);
  EXPECT_EQ(to_text(again), text);
  EXPECT_EQ(config_digest(again), config_digest(cfg));
  EXPECT_EQ(again.source_root, "/data/a b");
  EXPECT_EQ(again.train_seed, 18446744073709551615ull);
  EXPECT_EQ(again.cm_lr, 0.1);
  for (const auto& key : config_keys()) EXPECT_NE(text.find(key.name + "="), std::string::npos) << key.name;
  cfg.epochs = 8;
  EXPECT_NE(config_digest(cfg), config_digest(again));
}

TEST(Config, ValidationNamesTheOffendingKey) {
  auto expect_invalid = [](const std::string& text, const std::string& key) {
    try {
      validate(parse_config(text));
      ADD_FAILURE() << text << " validated";
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(key), std::string::npos) << e.what();
    }
  };
  expect_invalid("use_rec_loss=true\nvariant=SE\n", "use_rec_loss");
  expect_invalid("input_size=30\n", "input_size");
  expect_invalid("epochs=0\n", "epochs");
  expect_invalid("batch_size=0\n", "batch_size");
  expect_invalid("cm_optimizer=adam\n", "cm_optimizer");
  expect_invalid("classifier_backbone=vit\n", "classifier_backbone");
  expect_invalid("layer_weights=relu1_2:-1\n", "layer_weights");
  expect_invalid("k_targets=0\n", "k_targets");
  expect_invalid("content_layers=conv1_1\n", "content_layers");
  expect_invalid("style_layers=relu6_1\n", "style_layers");
  expect_invalid("style_layers=\n", "style_layers");
  EXPECT_NO_THROW(validate(TrainConfig{}));
}

TEST(Config, MethodLabels) {
  TrainConfig cfg;
  EXPECT_EQ(cfg.method_label(), "SE");
  cfg.variant = AugmenterVariant::DE;
  cfg.use_rec_loss = true;
  EXPECT_EQ(cfg.method_label(), "DE+RL");
  cfg.perceptual_mode = PerceptualMode::AVP;
  EXPECT_EQ(cfg.method_label(), "DE+AvgP+RL");
  cfg.use_augmenter = false;
  EXPECT_EQ(cfg.method_label(), "Source only");
}

TEST(Config, LoadFromFile) {
  testing::TempDir dir("config");
  const auto path = dir.path() / "run.cfg";
  std::ofstream(path) << "epochs=4\n";
  EXPECT_EQ(load_config(path.string()).epochs, 4);
  EXPECT_THROW(load_config((dir.path() / "missing.cfg").string()), PathError);
}

}  // namespace
}  // namespace osuda
