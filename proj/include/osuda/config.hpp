#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "osuda/alignment.hpp"
#include "osuda/augmentation.hpp"

namespace osuda {

struct StepRatio {
  int classifier = 1;
  int augmenter = 1;
  bool operator==(const StepRatio&) const = default;
};

// Run configuration. Serialized as a flat key=value file, one key per field;
// see config_keys() for the documented list.
struct TrainConfig {
  int epochs = 20;
  int batch_size = 8;
  int input_size = 224;
  int max_steps = 0;  // 0 = no limit

  std::string cm_optimizer = "sgd";
  double cm_lr = 1e-4;
  double cm_momentum = 0.9;
  std::string aum_optimizer = "adamw";
  double aum_lr = 1e-3;
  double aum_weight_decay = 0.01;

  bool use_augmenter = true;
  AugmenterVariant variant = AugmenterVariant::SE;
  int aum_base_channels = 64;
  bool aum_instance_norm = true;
  PerceptualMode perceptual_mode = PerceptualMode::GRAM;
  bool use_rec_loss = false;
  bool rec_on_target = true;
  std::map<std::string, double> layer_weights{{"relu1_2", 0.25}, {"relu2_2", 1.0}, {"relu4_3", 1.0}};
  std::vector<std::string> style_layers = default_style_layers();
  std::vector<std::string> content_layers = default_content_layers();
  int pool_kernel = 2;
  double mixup_alpha = 5.0;
  double mixup_beta = 1.0;

  int k_targets = 1;
  std::uint64_t train_seed = 0;
  std::uint64_t target_selection_seed = 0;
  int classifier_warmup_steps = 0;
  StepRatio step_ratio;

  std::string classifier_backbone = "resnet101";
  std::string classifier_weights;
  int classifier_width = 16;
  std::string sam_backbone = "vgg16";
  std::string sam_weights;
  int sam_fallback_width_divisor = 16;
  bool test_mode = false;

  std::string source_root;
  std::string target_root;
  std::string eval_root;
  int eval_batch_size = 32;
  int checkpoint_every = 0;  // steps; 0 = end of every epoch

  // Short label in the style of the ablation tables, e.g. "DE+RL" or "SE+AvgP".
  std::string method_label() const;
  PerceptualConfig perceptual() const;
  ArchitectureSpec architecture() const;
};

struct ConfigKey {
  std::string name;
  std::string doc;
};

// Every accepted key with its documentation, in canonical order.
const std::vector<ConfigKey>& config_keys();

// Applies one key=value assignment. Unknown keys and unparsable values throw
// ConfigError naming the key.
void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value);

// Parses key=value lines ('#' comments and blank lines allowed) on top of the
// defaults.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::string& path);

// Canonical text: every key in config_keys() order.
std::string to_text(const TrainConfig& cfg);
std::string config_digest(const TrainConfig& cfg);

// Throws ConfigError when a field is out of range or fields contradict.
void validate(const TrainConfig& cfg);

}  // namespace osuda
