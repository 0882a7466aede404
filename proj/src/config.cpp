#include "osuda/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "osuda/classifier.hpp"
#include "osuda/digest.hpp"

namespace osuda {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& item : items) out += (out.empty() ? "" : ",") + item;
  return out;
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& why) {
  throw ConfigError("invalid value '" + value + "' for config key '" + key + "': " + why);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) bad_value(key, value, "not a number");
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) bad_value(key, value, "not a number");
    return v;
  } catch (const std::logic_error&) {
    bad_value(key, value, "not a number");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  bad_value(key, value, "expected true or false");
}

std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  // Prefer the shortest representation that still round-trips.
  for (int prec = 1; prec <= 17; ++prec) {
    char shortbuf[64];
    std::snprintf(shortbuf, sizeof(shortbuf), "%.*g", prec, v);
    if (std::stod(shortbuf) == v) return shortbuf;
  }
  return buf;
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

struct Field {
  ConfigKey key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define OSUDA_INT(NAME, DOC)                                                                          \
  Field {                                                                                              \
    {#NAME, DOC}, [](TrainConfig& c, const std::string& v) { c.NAME = parse_number<int>(#NAME, v); }, \
        [](const TrainConfig& c) { return std::to_string(c.NAME); }                                    \
  }
#define OSUDA_U64(NAME, DOC)                                                                                    \
  Field {                                                                                                        \
    {#NAME, DOC}, [](TrainConfig& c, const std::string& v) { c.NAME = parse_number<std::uint64_t>(#NAME, v); }, \
        [](const TrainConfig& c) { return std::to_string(c.NAME); }                                              \
  }
#define OSUDA_REAL(NAME, DOC)                                                                    \
  Field {                                                                                         \
    {#NAME, DOC}, [](TrainConfig& c, const std::string& v) { c.NAME = parse_real(#NAME, v); }, \
        [](const TrainConfig& c) { return fmt_real(c.NAME); }                                     \
  }
#define OSUDA_BOOL(NAME, DOC)                                                                    \
  Field {                                                                                         \
    {#NAME, DOC}, [](TrainConfig& c, const std::string& v) { c.NAME = parse_bool(#NAME, v); }, \
        [](const TrainConfig& c) { return fmt_bool(c.NAME); }                                     \
  }
#define OSUDA_STR(NAME, DOC)                                                                                  \
  Field {                                                                                                      \
    {#NAME, DOC}, [](TrainConfig& c, const std::string& v) { c.NAME = v; }, [](const TrainConfig& c) { return c.NAME; } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      OSUDA_INT(epochs, "passes over the source set (default 20)"),
      OSUDA_INT(batch_size, "source images per batch (default 8)"),
      OSUDA_INT(input_size, "square input resolution, divisible by 8 (default 224)"),
      OSUDA_INT(max_steps, "stop after this many batches; 0 = no limit (default 0)"),
      OSUDA_STR(cm_optimizer, "classifier optimizer; only 'sgd' (default sgd)"),
      OSUDA_REAL(cm_lr, "classifier learning rate (default 1e-4)"),
      OSUDA_REAL(cm_momentum, "classifier SGD momentum (default 0.9)"),
      OSUDA_STR(aum_optimizer, "augmenter optimizer; only 'adamw' (default adamw)"),
      OSUDA_REAL(aum_lr, "augmenter learning rate (default 1e-3)"),
      OSUDA_REAL(aum_weight_decay, "augmenter decoupled weight decay (default 0.01)"),
      OSUDA_BOOL(use_augmenter, "false trains a source-only classifier (default true)"),
      Field{{"variant", "augmenter variant SE or DE (default SE)"},
            [](TrainConfig& c, const std::string& v) {
              try {
                c.variant = parse_augmenter_variant(v);
              } catch (const ValidationError& e) {
                bad_value("variant", v, e.what());
              }
            },
            [](const TrainConfig& c) { return to_string(c.variant); }},
      OSUDA_INT(aum_base_channels, "augmenter first-layer width; 64 = full, 4 = miniature (default 64)"),
      OSUDA_BOOL(aum_instance_norm, "instance normalization after hidden augmenter convolutions (default true)"),
      Field{{"perceptual_mode", "GRAM, AVP or NONE (default GRAM)"},
            [](TrainConfig& c, const std::string& v) {
              try {
                c.perceptual_mode = parse_perceptual_mode(v);
              } catch (const ValidationError& e) {
                bad_value("perceptual_mode", v, e.what());
              }
            },
            [](const TrainConfig& c) { return to_string(c.perceptual_mode); }},
      OSUDA_BOOL(use_rec_loss, "add the reconstruction loss to the augmenter objective; DE only (default false)"),
      OSUDA_BOOL(rec_on_target, "also reconstruct the target sample (default true)"),
      Field{{"layer_weights", "comma-separated layer:weight list (default relu1_2:0.25,relu2_2:1,relu4_3:1)"},
            [](TrainConfig& c, const std::string& v) {
              std::map<std::string, double> weights;
              std::stringstream ss(v);
              std::string item;
              while (std::getline(ss, item, ',')) {
                const auto colon = item.find(':');
                if (colon == std::string::npos) bad_value("layer_weights", v, "expected layer:weight items");
                weights[trim(item.substr(0, colon))] = parse_real("layer_weights", trim(item.substr(colon + 1)));
              }
              c.layer_weights = std::move(weights);
            },
            [](const TrainConfig& c) {
              std::string out;
              for (const auto& [k, w] : c.layer_weights) out += (out.empty() ? "" : ",") + k + ":" + fmt_real(w);
              return out;
            }},
      Field{{"style_layers", "comma-separated VGG-16 layers for the style term (default relu1_2,relu2_2)"},
            [](TrainConfig& c, const std::string& v) { c.style_layers = split_list(v); },
            [](const TrainConfig& c) { return join(c.style_layers); }},
      Field{{"content_layers", "comma-separated VGG-16 layers for the content term (default relu4_3)"},
            [](TrainConfig& c, const std::string& v) { c.content_layers = split_list(v); },
            [](const TrainConfig& c) { return join(c.content_layers); }},
      OSUDA_INT(pool_kernel, "average-pooling kernel (and stride) for AVP mode (default 2)"),
      OSUDA_REAL(mixup_alpha, "Beta alpha for the SE mixup coefficient (default 5.0)"),
      OSUDA_REAL(mixup_beta, "Beta beta for the SE mixup coefficient (default 1.0)"),
      OSUDA_INT(k_targets, "number of unlabeled target samples; 1 = one-shot (default 1)"),
      OSUDA_U64(train_seed, "seed for initialization, shuffling and mixup draws (default 0)"),
      OSUDA_U64(target_selection_seed, "seed for choosing target samples and per-batch target draws (default 0)"),
      OSUDA_INT(classifier_warmup_steps, "initial batches that update only the classifier (default 0)"),
      Field{{"step_ratio", "classifier:augmenter updates per batch (default 1:1)"},
            [](TrainConfig& c, const std::string& v) {
              const auto colon = v.find(':');
              if (colon == std::string::npos) bad_value("step_ratio", v, "expected a:b");
              c.step_ratio.classifier = parse_number<int>("step_ratio", v.substr(0, colon));
              c.step_ratio.augmenter = parse_number<int>("step_ratio", v.substr(colon + 1));
            },
            [](const TrainConfig& c) {
              return std::to_string(c.step_ratio.classifier) + ":" + std::to_string(c.step_ratio.augmenter);
            }},
      OSUDA_STR(classifier_backbone, "small_cnn, resnet18, resnet34, resnet50 or resnet101 (default resnet101)"),
      OSUDA_STR(classifier_weights, "pretrained backbone weight container (default none)"),
      OSUDA_INT(classifier_width, "first-layer width of small_cnn (default 16)"),
      OSUDA_STR(sam_backbone, "feature extractor backbone; only vgg16 (default vgg16)"),
      OSUDA_STR(sam_weights, "pretrained VGG-16 weight container (default none)"),
      OSUDA_INT(sam_fallback_width_divisor, "width divisor of the random stand-in extractor (default 16)"),
      OSUDA_BOOL(test_mode, "allow random weights when weight files are absent (default false)"),
      OSUDA_STR(source_root, "labeled source dataset root"),
      OSUDA_STR(target_root, "target dataset root; targets are drawn from it"),
      OSUDA_STR(eval_root, "evaluation dataset root (default target_root)"),
      OSUDA_INT(eval_batch_size, "batch size for evaluation (default 32)"),
      OSUDA_INT(checkpoint_every, "checkpoint period in batches; 0 = every epoch (default 0)"),
  };
  return table;
}

}  // namespace

std::string TrainConfig::method_label() const {
  if (!use_augmenter) return "Source only";
  std::string label = to_string(variant);
  if (perceptual_mode == PerceptualMode::AVP) label += "+AvgP";
  if (use_rec_loss) label += "+RL";
  return label;
}

PerceptualConfig TrainConfig::perceptual() const {
  PerceptualConfig p;
  p.layer_weights = layer_weights;
  p.mode = perceptual_mode;
  p.pool_kernel = pool_kernel;
  p.style_layers = style_layers;
  p.content_layers = content_layers;
  return p;
}

ArchitectureSpec TrainConfig::architecture() const {
  ArchitectureSpec spec;
  spec.base_channels = aum_base_channels;
  spec.instance_norm = aum_instance_norm;
  return spec;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return keys;
}

void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key.name == key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

TrainConfig parse_config(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    apply_setting(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PathError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key.name + "=" + f.get(cfg) + "\n";
  return out;
}

std::string config_digest(const TrainConfig& cfg) { return sha256_hex(to_text(cfg)); }

void validate(const TrainConfig& cfg) {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("config key '" + key + "': " + why);
  };
  if (cfg.epochs < 1) fail("epochs", "must be >= 1");
  if (cfg.batch_size < 1) fail("batch_size", "must be >= 1");
  if (cfg.input_size < 8 || cfg.input_size % 8 != 0) fail("input_size", "must be a positive multiple of 8");
  if (cfg.max_steps < 0) fail("max_steps", "must be >= 0");
  if (cfg.cm_optimizer != "sgd") fail("cm_optimizer", "only 'sgd' is supported");
  if (cfg.aum_optimizer != "adamw") fail("aum_optimizer", "only 'adamw' is supported");
  if (!(cfg.cm_lr > 0)) fail("cm_lr", "must be > 0");
  if (!(cfg.aum_lr > 0)) fail("aum_lr", "must be > 0");
  if (cfg.cm_momentum < 0 || cfg.cm_momentum >= 1) fail("cm_momentum", "must be in [0, 1)");
  if (cfg.aum_weight_decay < 0) fail("aum_weight_decay", "must be >= 0");
  if (cfg.aum_base_channels < 1) fail("aum_base_channels", "must be >= 1");
  if (cfg.use_rec_loss && cfg.variant != AugmenterVariant::DE) fail("use_rec_loss", "requires variant=DE");
  for (const auto& [layer, w] : cfg.layer_weights) {
    if (w < 0) fail("layer_weights", "weight of " + layer + " is negative");
  }
  const auto vgg_layers = FeatureExtractor<float>::vgg16(64).layer_names();
  for (const auto* key : {"style_layers", "content_layers"}) {
    const auto& layers = std::string(key) == "style_layers" ? cfg.style_layers : cfg.content_layers;
    if (layers.empty()) fail(key, "needs at least one layer");
    for (const auto& layer : layers) {
      if (layer.rfind("relu", 0) != 0 || std::find(vgg_layers.begin(), vgg_layers.end(), layer) == vgg_layers.end()) {
        fail(key, "'" + layer + "' is not a VGG-16 relu layer");
      }
    }
  }
  if (cfg.pool_kernel < 1) fail("pool_kernel", "must be >= 1");
  if (!(cfg.mixup_alpha > 0) || !(cfg.mixup_beta > 0)) fail("mixup_alpha", "Beta parameters must be > 0");
  if (cfg.k_targets < 1) fail("k_targets", "must be >= 1");
  if (cfg.classifier_warmup_steps < 0) fail("classifier_warmup_steps", "must be >= 0");
  if (cfg.step_ratio.classifier < 1 || cfg.step_ratio.augmenter < 1) fail("step_ratio", "components must be >= 1");
  try {
    parse_backbone(cfg.classifier_backbone);
  } catch (const ValidationError& e) {
    fail("classifier_backbone", e.what());
  }
  if (cfg.classifier_width < 1) fail("classifier_width", "must be >= 1");
  if (cfg.sam_backbone != "vgg16") fail("sam_backbone", "only 'vgg16' is supported");
  if (cfg.sam_fallback_width_divisor < 1) fail("sam_fallback_width_divisor", "must be >= 1");
  if (cfg.eval_batch_size < 1) fail("eval_batch_size", "must be >= 1");
  if (cfg.checkpoint_every < 0) fail("checkpoint_every", "must be >= 0");
}

}  // namespace osuda
