#include "osuda/trainer.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <fstream>
#include <numeric>
#include <sstream>

#include "osuda/digest.hpp"

namespace osuda {

namespace {

constexpr std::uint64_t kAugmenterInitStream = 1;
constexpr std::uint64_t kClassifierInitStream = 2;
constexpr std::uint64_t kShuffleStream = 3;
constexpr std::uint64_t kMixupStream = 4;
constexpr std::uint64_t kTargetDrawStream = 5;
// The stand-in extractor plays the role of fixed pretrained weights, so its
// seed does not follow the training seed.
constexpr std::uint64_t kFallbackExtractorSeed = 0x5a4d;

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void restore_rng(Rng& rng, const nlohmann::json& meta, const std::string& field) {
  std::istringstream is(meta.at(field).get<std::string>());
  is >> rng;
  if (!is) throw CheckpointError("checkpoint field 'rng." + field + "' is not a valid generator state");
}

bool file_exists(const std::string& path) { return !path.empty() && std::filesystem::is_regular_file(path); }

void notify(const WarningSink& warn, const std::string& message) {
  if (warn) warn(message);
}

template <typename T>
T meta_field(const nlohmann::json& meta, const std::string& field) {
  try {
    return meta.at(field).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw CheckpointError("checkpoint field '" + field + "' is missing or malformed");
  }
}

}  // namespace

FeatureExtractor<float> build_alignment(const TrainConfig& cfg, const WarningSink& warn) {
  std::vector<std::string> taps = cfg.style_layers;
  for (const auto& layer : cfg.content_layers) {
    if (std::find(taps.begin(), taps.end(), layer) == taps.end()) taps.push_back(layer);
  }
  if (file_exists(cfg.sam_weights)) {
    auto fe = FeatureExtractor<float>::vgg16(1, 0, taps);
    load_parameters(read_container(cfg.sam_weights), "", fe.parameters());
    return fe;
  }
  if (!cfg.test_mode) {
    if (cfg.sam_weights.empty()) {
      throw PathError("no VGG-16 weights configured (sam_weights); set test_mode=true to use a random stand-in");
    }
    throw PathError("VGG-16 weight file not found: " + cfg.sam_weights);
  }
  notify(warn, "using a randomly initialized frozen VGG-16 stand-in (width divisor " +
                   std::to_string(cfg.sam_fallback_width_divisor) + "); style alignment is not meaningful");
  return FeatureExtractor<float>::vgg16(cfg.sam_fallback_width_divisor, kFallbackExtractorSeed, taps);
}

ClassifierState<float> build_classifier(const TrainConfig& cfg, Index num_classes, std::uint64_t seed,
                                        const WarningSink& warn) {
  const Backbone backbone = parse_backbone(cfg.classifier_backbone);
  auto cm = ClassifierState<float>::create(backbone, num_classes, seed, cfg.classifier_width);
  if (file_exists(cfg.classifier_weights)) {
    const auto weights = read_container(cfg.classifier_weights);
    load_parameters(weights, "", cm.backbone_parameters());
    load_buffers(weights, "", cm.buffers());
    return cm;
  }
  const bool wants_weights = !cfg.classifier_weights.empty() || backbone != Backbone::SmallCnn;
  if (!wants_weights) return cm;
  if (!cfg.test_mode) {
    if (cfg.classifier_weights.empty()) {
      throw PathError("no pretrained weights configured for " + cfg.classifier_backbone +
                      " (classifier_weights); set test_mode=true to train from random initialization");
    }
    throw PathError("classifier weight file not found: " + cfg.classifier_weights);
  }
  notify(warn, "using a randomly initialized " + cfg.classifier_backbone + " backbone");
  return cm;
}

nlohmann::json StepRecord::to_json() const {
  nlohmann::json j{{"step", step},           {"epoch", epoch}, {"phase", phase}, {"repeat", repeat},
                   {"loss", loss},           {"target_index", target_index}, {"millis", millis}};
  if (phase == "augmenter") {
    j["perceptual"] = perceptual;
    j["reconstruction"] = reconstruction;
  }
  if (lambda >= 0) j["lambda"] = lambda;
  return j;
}

Trainer::Trainer(const TrainConfig& cfg, DomainDataset source, TargetSet targets, RecordSink sink)
    : cfg_(cfg),
      source_(std::move(source)),
      targets_(std::move(targets)),
      sink_(std::move(sink)),
      sam_(build_alignment(cfg_, [this](const std::string& m) { emit({{"event", "warning"}, {"message", m}}); })),
      cm_(build_classifier(cfg_, static_cast<Index>(source_.num_classes()), derive_seed(cfg_.train_seed, kClassifierInitStream),
                           [this](const std::string& m) { emit({{"event", "warning"}, {"message", m}}); })),
      shuffle_rng_(derive_seed(cfg_.train_seed, kShuffleStream)),
      mixup_rng_(derive_seed(cfg_.train_seed, kMixupStream)),
      target_rng_(derive_seed(cfg_.target_selection_seed, kTargetDrawStream)) {
  validate(cfg_);
  if (source_.size() == 0) throw ValidationError("source dataset is empty");
  const Shape ts = targets_.images.shape();
  if (targets_.k < 1 || ts.n != targets_.k || ts.c != 3 || ts.h != cfg_.input_size || ts.w != cfg_.input_size) {
    throw ValidationError("target set has shape " + ts.str() + ", expected [" + std::to_string(targets_.k) + ", 3, " +
                          std::to_string(cfg_.input_size) + ", " + std::to_string(cfg_.input_size) + "]");
  }
  if (targets_.k != cfg_.k_targets) {
    throw ValidationError("target set holds " + std::to_string(targets_.k) + " samples but k_targets is " +
                          std::to_string(cfg_.k_targets));
  }
  opt_cm_ = Sgd<float>(cm_.parameters(), cfg_.cm_lr, cfg_.cm_momentum);
  if (cfg_.use_augmenter) {
    aum_ = AugmenterState<float>::create(cfg_.variant, cfg_.architecture(),
                                         derive_seed(cfg_.train_seed, kAugmenterInitStream));
    opt_aum_ = AdamW<float>(aum_->parameters(), cfg_.aum_lr, cfg_.aum_weight_decay);
  }
}

void Trainer::emit(const nlohmann::json& record) const {
  if (sink_) sink_(record);
}

std::size_t Trainer::batches_per_epoch() const {
  const auto bs = static_cast<std::size_t>(cfg_.batch_size);
  return (source_.size() + bs - 1) / bs;
}

bool Trainer::done() const {
  if (cfg_.max_steps > 0 && global_step_ >= cfg_.max_steps) return true;
  return epoch_ >= cfg_.epochs;
}

void Trainer::begin_epoch() {
  permutation_.resize(source_.size());
  std::iota(permutation_.begin(), permutation_.end(), std::size_t{0});
  std::shuffle(permutation_.begin(), permutation_.end(), shuffle_rng_);
}

void Trainer::diverged(const TrainingDiverged& e, const StepRecord& at) {
  nlohmann::json record{{"event", "diverged"}, {"step", at.step},   {"epoch", at.epoch},
                        {"phase", at.phase},   {"repeat", at.repeat}, {"message", e.what()},
                        {"grad_norm_classifier", grad_norm(cm_.parameters())}};
  if (aum_) record["grad_norm_augmenter"] = grad_norm(aum_->parameters());
  emit(record);
  throw e;
}

std::vector<StepRecord> Trainer::iterate() {
  if (done()) throw UsageError("training has already finished");
  if (permutation_.empty()) begin_epoch();
  const std::size_t end = std::min(source_.size(), cursor_ + static_cast<std::size_t>(cfg_.batch_size));
  const std::vector<std::size_t> indices(permutation_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                         permutation_.begin() + static_cast<std::ptrdiff_t>(end));
  const ImageBatch batch = load_batch(source_, indices, cfg_.input_size);

  int target_index = 0;
  if (targets_.k > 1) target_index = std::uniform_int_distribution<int>(0, targets_.k - 1)(target_rng_);
  const Tensor<float> x_t = targets_.images.slice(target_index, 1);
  std::optional<double> lambda;
  if (aum_ && aum_->variant() == AugmenterVariant::SE) {
    lambda = sample_mixup_lambda(mixup_rng_, cfg_.mixup_alpha, cfg_.mixup_beta);
  }

  const bool warmup = global_step_ < cfg_.classifier_warmup_steps;
  const int n_classifier = warmup ? 1 : cfg_.step_ratio.classifier;
  const int n_augmenter = (warmup || !aum_) ? 0 : cfg_.step_ratio.augmenter;
  const AugmenterObjective objective = AugmenterObjective::from_config(cfg_);

  std::vector<StepRecord> records;
  auto base = [&](const char* phase, int repeat) {
    StepRecord r;
    r.step = global_step_;
    r.epoch = epoch_;
    r.phase = phase;
    r.repeat = repeat;
    r.lambda = lambda.value_or(-1.0);
    r.target_index = target_index;
    return r;
  };
  using Clock = std::chrono::steady_clock;
  for (int i = 0; i < n_classifier; ++i) {
    StepRecord r = base("classifier", i);
    const auto t0 = Clock::now();
    try {
      r.loss = step_classifier(cm_, opt_cm_, augmenter(), batch.data, batch.labels, x_t, lambda);
    } catch (const TrainingDiverged& e) {
      diverged(e, r);
    }
    r.millis = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    emit(r.to_json());
    records.push_back(r);
  }
  for (int i = 0; i < n_augmenter; ++i) {
    StepRecord r = base("augmenter", i);
    const auto t0 = Clock::now();
    try {
      const auto loss = step_augmenter(*aum_, *opt_aum_, sam_, objective, batch.data, x_t, lambda);
      r.loss = loss.total;
      r.perceptual = loss.perceptual;
      r.reconstruction = loss.reconstruction;
    } catch (const TrainingDiverged& e) {
      diverged(e, r);
    }
    r.millis = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    emit(r.to_json());
    records.push_back(r);
  }

  cursor_ = end;
  ++global_step_;
  if (cursor_ >= source_.size()) {
    cursor_ = 0;
    permutation_.clear();
    ++epoch_;
  }
  return records;
}

TensorContainer Trainer::checkpoint() {
  TensorContainer c;
  c.kind = "checkpoint";
  nlohmann::json target_paths = nlohmann::json::array();
  for (const auto& p : targets_.paths) target_paths.push_back(p.string());
  c.meta = {{"checkpoint_version", kCheckpointVersion},
            {"config", to_text(cfg_)},
            {"config_digest", config_digest(cfg_)},
            {"epoch", epoch_},
            {"cursor", cursor_},
            {"global_step", global_step_},
            {"permutation", permutation_},
            {"rng", {{"shuffle", rng_state(shuffle_rng_)}, {"mixup", rng_state(mixup_rng_)}, {"target", rng_state(target_rng_)}}},
            {"class_names", source_.class_names},
            {"sam_digest", parameter_digest(sam_.parameters())},
            {"targets",
             {{"k", targets_.k},
              {"selection_seed", targets_.selection_seed},
              {"source_dataset", targets_.source_dataset},
              {"paths", target_paths}}},
            {"has_augmenter", aum_.has_value()},
            {"aum_optimizer_steps", opt_aum_ ? opt_aum_->steps() : 0}};
  store_parameters(c, "cm/", cm_.parameters());
  store_buffers(c, "cm_buffers/", cm_.buffers());
  store_buffers(c, "opt_cm/", opt_cm_.state());
  if (aum_) {
    store_parameters(c, "aum/", aum_->parameters());
    store_buffers(c, "opt_aum/", opt_aum_->state());
  }
  c.put("targets", targets_.images);
  return c;
}

Trainer Trainer::resume(const TensorContainer& checkpoint, DomainDataset source, RecordSink sink) {
  const TrainConfig cfg = checkpoint_config(checkpoint);
  const auto& meta = checkpoint.meta;
  const auto class_names = meta_field<std::vector<std::string>>(meta, "class_names");
  if (class_names != source.class_names) {
    throw CheckpointError("checkpoint field 'class_names' does not match the classes of " + source.root.string());
  }
  Trainer t(cfg, std::move(source), checkpoint_targets(checkpoint), std::move(sink));
  if (meta_field<std::string>(meta, "sam_digest") != parameter_digest(t.sam_.parameters())) {
    throw CheckpointError("checkpoint field 'sam_digest' does not match the configured feature extractor");
  }
  load_parameters(checkpoint, "cm/", t.cm_.parameters());
  load_buffers(checkpoint, "cm_buffers/", t.cm_.buffers());
  load_buffers(checkpoint, "opt_cm/", t.opt_cm_.state());
  if (meta_field<bool>(meta, "has_augmenter") != t.aum_.has_value()) {
    throw CheckpointError("checkpoint field 'has_augmenter' contradicts use_augmenter in its config");
  }
  if (t.aum_) {
    load_parameters(checkpoint, "aum/", t.aum_->parameters());
    load_buffers(checkpoint, "opt_aum/", t.opt_aum_->state());
    t.opt_aum_->set_steps(meta_field<long long>(meta, "aum_optimizer_steps"));
  }
  t.epoch_ = meta_field<int>(meta, "epoch");
  t.cursor_ = meta_field<std::size_t>(meta, "cursor");
  t.global_step_ = meta_field<long long>(meta, "global_step");
  t.permutation_ = meta_field<std::vector<std::size_t>>(meta, "permutation");
  if (!t.permutation_.empty() && t.permutation_.size() != t.source_.size()) {
    throw CheckpointError("checkpoint field 'permutation' does not match the source dataset size");
  }
  try {
    const auto& rng = meta.at("rng");
    restore_rng(t.shuffle_rng_, rng, "shuffle");
    restore_rng(t.mixup_rng_, rng, "mixup");
    restore_rng(t.target_rng_, rng, "target");
  } catch (const nlohmann::json::exception&) {
    throw CheckpointError("checkpoint field 'rng' is missing or malformed");
  }
  return t;
}

void save_checkpoint(const TensorContainer& checkpoint, const std::filesystem::path& path) {
  write_container(path, checkpoint);
}

TensorContainer load_checkpoint(const std::filesystem::path& path) {
  TensorContainer c = read_container(path);
  if (c.kind != "checkpoint") {
    throw CheckpointError(path.string() + ": field 'kind' is '" + c.kind + "', expected 'checkpoint'");
  }
  const int version = c.meta.value("checkpoint_version", -1);
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": field 'checkpoint_version' is " + std::to_string(version) +
                          ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  return c;
}

TrainConfig checkpoint_config(const TensorContainer& checkpoint) {
  TrainConfig cfg;
  try {
    cfg = parse_config(meta_field<std::string>(checkpoint.meta, "config"));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint field 'config' is invalid: ") + e.what());
  }
  if (config_digest(cfg) != meta_field<std::string>(checkpoint.meta, "config_digest")) {
    throw CheckpointError("checkpoint field 'config_digest' does not match its config");
  }
  return cfg;
}

ClassifierState<float> checkpoint_classifier(const TensorContainer& checkpoint) {
  const TrainConfig cfg = checkpoint_config(checkpoint);
  const auto classes = meta_field<std::vector<std::string>>(checkpoint.meta, "class_names");
  auto cm = ClassifierState<float>::create(parse_backbone(cfg.classifier_backbone), static_cast<Index>(classes.size()),
                                           0, cfg.classifier_width);
  load_parameters(checkpoint, "cm/", cm.parameters());
  load_buffers(checkpoint, "cm_buffers/", cm.buffers());
  return cm;
}

std::optional<AugmenterState<float>> checkpoint_augmenter(const TensorContainer& checkpoint) {
  if (!meta_field<bool>(checkpoint.meta, "has_augmenter")) return std::nullopt;
  const TrainConfig cfg = checkpoint_config(checkpoint);
  auto aum = AugmenterState<float>::create(cfg.variant, cfg.architecture(), 0);
  load_parameters(checkpoint, "aum/", aum.parameters());
  return aum;
}

TargetSet checkpoint_targets(const TensorContainer& checkpoint) {
  if (!checkpoint.contains("targets")) throw CheckpointError("checkpoint tensor 'targets' is missing");
  TargetSet t;
  t.images = checkpoint.get("targets");
  try {
    const auto& meta = checkpoint.meta.at("targets");
    t.k = meta.at("k").get<int>();
    t.selection_seed = meta.at("selection_seed").get<std::uint64_t>();
    t.source_dataset = meta.at("source_dataset").get<std::string>();
    for (const auto& p : meta.at("paths")) t.paths.emplace_back(p.get<std::string>());
  } catch (const nlohmann::json::exception&) {
    throw CheckpointError("checkpoint field 'targets' is missing or malformed");
  }
  return t;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PathError("cannot write " + path.string());
  out << text;
  if (!out) throw PathError("failed writing " + path.string());
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const DomainDataset& source, const TargetSet& targets,
                  const std::filesystem::path& out_dir, const DomainDataset* eval_set, const WarningSink& warn) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw PathError("cannot create output directory " + out_dir.string() + ": " + ec.message());
  const auto log_path = out_dir / "train_log.jsonl";
  std::ofstream log(log_path);
  if (!log) throw PathError("cannot write to output directory " + out_dir.string());

  TrainResult result;
  auto sink = [&](const nlohmann::json& record) {
    log << record.dump() << '\n';
    log.flush();
    if (warn && record.value("event", "") == "warning") warn(record.at("message").get<std::string>());
  };
  Trainer trainer(cfg, source, targets, sink);
  const auto ckpt_path = out_dir / "checkpoint.osc";
  while (!trainer.done()) {
    const int epoch_before = trainer.epoch();
    auto records = trainer.iterate();
    result.records.insert(result.records.end(), records.begin(), records.end());
    const bool periodic = cfg.checkpoint_every > 0 ? trainer.global_step() % cfg.checkpoint_every == 0
                                                   : trainer.epoch() != epoch_before;
    if (periodic && !trainer.done()) save_checkpoint(trainer.checkpoint(), ckpt_path);
  }
  result.checkpoint = trainer.checkpoint();
  save_checkpoint(result.checkpoint, ckpt_path);

  if (eval_set != nullptr) {
    result.report = evaluate(trainer.classifier(), *eval_set, cfg.eval_batch_size, cfg.input_size, cfg.train_seed);
    write_text(out_dir / "metrics.json", result.report->to_json().dump(2) + "\n");
    const auto agg = single_run(*result.report);
    write_text(out_dir / "metrics.csv", render_table(agg, TableFormat::Csv));
    write_text(out_dir / "metrics.md", render_table(agg, TableFormat::Markdown));
    sink({{"event", "evaluation"}, {"report", result.report->to_json()}});
  }
  return result;
}

}  // namespace osuda
