#include "osuda/cli.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "osuda/trainer.hpp"

namespace osuda {

namespace {

namespace fs = std::filesystem;

std::string utc_timestamp(const char* format) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[64];
  std::strftime(buf, sizeof(buf), format, &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PathError("cannot write " + path.string());
  out << text;
  if (!out) throw PathError("failed writing " + path.string());
}

// Fresh directory <out>/<timestamp>-<label>, suffixed when it already exists.
fs::path make_run_dir(const fs::path& out, const std::string& label) {
  std::string safe = label;
  std::replace_if(safe.begin(), safe.end(), [](char c) { return !std::isalnum(static_cast<unsigned char>(c)) && c != '+'; },
                  '_');
  const std::string stem = utc_timestamp("%Y%m%dT%H%M%SZ") + "-" + safe;
  fs::path dir = out / stem;
  for (int i = 1; fs::exists(dir); ++i) dir = out / (stem + "-" + std::to_string(i));
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw PathError("cannot create run directory " + dir.string() + ": " + ec.message());
  return dir;
}

nlohmann::json config_json(const TrainConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  std::istringstream in(to_text(cfg));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    j[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return j;
}

TrainConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides,
                           std::optional<std::uint64_t> seed) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (seed) cfg.train_seed = *seed;
  validate(cfg);
  return cfg;
}

DomainDataset load_dataset(const std::string& root, const char* key) {
  if (root.empty()) throw ConfigError(std::string("config key '") + key + "' is not set");
  return load_image_folder(root);
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              std::optional<std::uint64_t> seed, const std::string& out_root, std::ostream& out, std::ostream& err) {
  const TrainConfig cfg = resolve_config(config_path, overrides, seed);
  const DomainDataset source = load_dataset(cfg.source_root, "source_root");
  const DomainDataset target = load_dataset(cfg.target_root, "target_root");
  const DomainDataset eval_set = cfg.eval_root.empty() ? target : load_dataset(cfg.eval_root, "eval_root");
  if (source.class_names != eval_set.class_names) {
    throw ValidationError("source classes (" + std::to_string(source.num_classes()) + ") differ from evaluation classes (" +
                          std::to_string(eval_set.num_classes()) + ") in " + eval_set.root.string());
  }
  const TargetSet targets = select_targets(target, cfg.k_targets, cfg.target_selection_seed, cfg.input_size);

  const fs::path run_dir = make_run_dir(out_root, cfg.method_label());
  nlohmann::json target_paths = nlohmann::json::array();
  for (const auto& p : targets.paths) target_paths.push_back(p.string());
  const nlohmann::json manifest{
      {"tool", "osuda"},
      {"tool_version", kToolVersion},
      {"method", cfg.method_label()},
      {"config", config_json(cfg)},
      {"config_digest", config_digest(cfg)},
      {"seeds", {{"train_seed", cfg.train_seed}, {"target_selection_seed", cfg.target_selection_seed}}},
      {"datasets",
       {{"source", {{"root", source.root.string()}, {"digest", dataset_digest(source)}, {"size", source.size()}}},
        {"target", {{"root", target.root.string()}, {"digest", dataset_digest(target)}, {"size", target.size()}}},
        {"eval", {{"root", eval_set.root.string()}, {"digest", dataset_digest(eval_set)}, {"size", eval_set.size()}}}}},
      {"targets", target_paths},
      {"started_at", utc_timestamp("%Y-%m-%dT%H:%M:%SZ")}};
  write_text(run_dir / "manifest.json", manifest.dump(2) + "\n");
  write_text(run_dir / "config.cfg", to_text(cfg));
  err << "run directory: " << run_dir.string() << "\n";

  nlohmann::json completion{{"config_digest", config_digest(cfg)}};
  try {
    const auto result =
        train(cfg, source, targets, run_dir, &eval_set, [&](const std::string& m) { err << "warning: " << m << "\n"; });
    completion["status"] = "completed";
    completion["steps"] = result.records.empty() ? 0 : result.records.back().step + 1;
    completion["finished_at"] = utc_timestamp("%Y-%m-%dT%H:%M:%SZ");
    write_text(run_dir / "completion.json", completion.dump(2) + "\n");
    out << cfg.method_label() << "\n" << render_table(single_run(*result.report), TableFormat::Markdown);
  } catch (const std::exception& e) {
    completion["status"] = "failed";
    completion["error"] = e.what();
    completion["finished_at"] = utc_timestamp("%Y-%m-%dT%H:%M:%SZ");
    write_text(run_dir / "completion.json", completion.dump(2) + "\n");
    throw;
  }
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_root, const std::string& out_dir,
             std::ostream& out) {
  const TensorContainer ckpt = load_checkpoint(checkpoint_path);
  const TrainConfig cfg = checkpoint_config(ckpt);
  const std::string root = !data_root.empty() ? data_root : (!cfg.eval_root.empty() ? cfg.eval_root : cfg.target_root);
  const DomainDataset dataset = load_dataset(root, "eval_root");
  const auto classes = ckpt.meta.at("class_names").get<std::vector<std::string>>();
  if (classes.size() != dataset.num_classes()) {
    throw ValidationError("checkpoint classifier predicts " + std::to_string(classes.size()) + " classes but " + root +
                          " has " + std::to_string(dataset.num_classes()));
  }
  if (classes != dataset.class_names) throw ValidationError("class names of " + root + " differ from the checkpoint's");
  const auto cm = checkpoint_classifier(ckpt);
  const auto report = evaluate(cm, dataset, cfg.eval_batch_size, cfg.input_size, cfg.train_seed);
  const auto agg = single_run(report);
  if (!out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw PathError("cannot create " + out_dir + ": " + ec.message());
    write_text(fs::path(out_dir) / "metrics.json", report.to_json().dump(2) + "\n");
    write_text(fs::path(out_dir) / "metrics.csv", render_table(agg, TableFormat::Csv));
    write_text(fs::path(out_dir) / "metrics.md", render_table(agg, TableFormat::Markdown));
  }
  out << render_table(agg, TableFormat::Markdown);
  char overall[64];
  std::snprintf(overall, sizeof(overall), "%.2f", report.overall_accuracy);
  out << "overall accuracy: " << overall << " (" << report.n_samples << " samples)\n";
  return kExitOk;
}

// Places 3 panels of [1, 3, S, S] side by side.
Image grid_image(const std::vector<Tensor<float>>& panels) {
  const Index s = panels.front().shape().h;
  Image img;
  img.width = static_cast<int>(s * static_cast<Index>(panels.size()));
  img.height = static_cast<int>(s);
  img.channels = 3;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height * 3, 0);
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const Image panel = to_image(panels[p], 0);
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < static_cast<int>(s); ++x) {
        for (int c = 0; c < 3; ++c) {
          img.pixels[(static_cast<std::size_t>(y) * img.width + p * s + x) * 3 + c] =
              panel.pixels[(static_cast<std::size_t>(y) * s + x) * 3 + c];
        }
      }
    }
  }
  return img;
}

int cmd_augment_dump(const std::string& checkpoint_path, int n_samples, const std::string& source_root,
                     std::uint64_t seed, const std::string& out_dir, std::ostream& out) {
  if (n_samples < 1) throw UsageError("--n must be >= 1");
  const TensorContainer ckpt = load_checkpoint(checkpoint_path);
  const TrainConfig cfg = checkpoint_config(ckpt);
  const auto aum = checkpoint_augmenter(ckpt);
  if (!aum) throw CheckpointError(checkpoint_path + " holds no augmentation module (trained with use_augmenter=false)");
  const DomainDataset source = load_dataset(source_root.empty() ? cfg.source_root : source_root, "source_root");
  const TargetSet targets = checkpoint_targets(ckpt);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw PathError("cannot create " + out_dir + ": " + ec.message());

  Rng rng(seed);
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(n_samples), source.size());
  std::vector<std::size_t> order(source.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t idx[] = {order[i]};
    const auto batch = load_batch(source, idx, cfg.input_size);
    const auto t = static_cast<Index>(i % static_cast<std::size_t>(targets.k));
    const Tensor<float> x_t = targets.images.slice(t, 1);
    std::optional<double> lambda;
    if (aum->variant() == AugmenterVariant::SE) lambda = sample_mixup_lambda(rng, cfg.mixup_alpha, cfg.mixup_beta);
    const auto x_hat = augment(*aum, Var<float>(batch.data), Var<float>(x_t), lambda).value();
    char name[32];
    std::snprintf(name, sizeof(name), "grid_%03zu.png", i);
    write_png(fs::path(out_dir) / name, grid_image({batch.data, x_t, x_hat}));
  }
  out << "wrote " << n << " grids to " << out_dir << "\n";
  return kExitOk;
}

int cmd_make_synth(std::uint64_t seed, const std::string& out_dir, int n_per_class, int n_classes, int size,
                   std::ostream& out) {
  const auto corpus = make_synthetic_corpus(out_dir, seed, n_per_class, n_classes, size);
  out << "wrote " << corpus.source.size() << " source and " << corpus.target.size() << " target images to " << out_dir
      << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"One-shot unsupervised domain adaptation by style-aligned augmentation", "osuda"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  std::string config_path, out_root = "runs", checkpoint, data_root, source_root, dump_out, synth_out;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::uint64_t dump_seed = 0, synth_seed = 0;
  std::string eval_out;
  int n_samples = 4, n_per_class = 50, n_classes = 4, image_size = 32;

  auto* train_cmd = app.add_subcommand("train", "Train a classifier with the augmentation module");
  train_cmd->add_option("--config", config_path, "key=value config file (defaults apply when omitted)");
  train_cmd->add_option("--set", overrides, "override one config key: key=value (repeatable)");
  train_cmd->add_option("--out", out_root, "parent of the timestamped run directory")->capture_default_str();
  train_cmd->add_option("--seed", seed, "training seed (overrides train_seed)");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint's classifier on a dataset");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--data", data_root, "dataset root (default: the checkpoint's eval_root or target_root)");
  eval_cmd->add_option("--out", eval_out, "directory for metrics.json/csv/md");

  auto* dump_cmd = app.add_subcommand("augment-dump", "Write source | target | augmented PNG grids");
  dump_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  dump_cmd->add_option("--n", n_samples, "number of grids")->capture_default_str();
  dump_cmd->add_option("--source", source_root, "source dataset root (default: the checkpoint's source_root)");
  dump_cmd->add_option("--seed", dump_seed, "seed for sample choice and mixup draws")->capture_default_str();
  dump_cmd->add_option("--out", dump_out, "output directory")->required();

  auto* synth_cmd = app.add_subcommand("make-synth", "Render the synthetic two-domain shape corpus");
  synth_cmd->add_option("--seed", synth_seed, "generator seed")->capture_default_str();
  synth_cmd->add_option("--out", synth_out, "output directory")->required();
  synth_cmd->add_option("--n-per-class", n_per_class, "images per class and domain")->capture_default_str();
  synth_cmd->add_option("--classes", n_classes, "number of shape classes (2-6)")->capture_default_str();
  synth_cmd->add_option("--size", image_size, "image side length in pixels")->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(config_path, overrides, seed, out_root, out, err);
    if (*eval_cmd) return cmd_eval(checkpoint, data_root, eval_out, out);
    if (*dump_cmd) return cmd_augment_dump(checkpoint, n_samples, source_root, dump_seed, dump_out, out);
    if (*synth_cmd) return cmd_make_synth(synth_seed, synth_out, n_per_class, n_classes, image_size, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const PathError& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kExitData;
  } catch (const TrainingDiverged& e) {
    err << "training diverged: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace osuda
