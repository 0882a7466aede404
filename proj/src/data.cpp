#include "osuda/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "osuda/digest.hpp"
#include "osuda/errors.hpp"
#include "osuda/ops.hpp"

namespace osuda {

namespace fs = std::filesystem;

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace

DomainDataset load_image_folder(const fs::path& root) {
  if (!fs::is_directory(root)) throw PathError("dataset root not found: " + root.string());
  DomainDataset ds;
  ds.root = root;
  ds.domain_name = fs::absolute(root).lexically_normal().filename().string();
  if (ds.domain_name.empty()) ds.domain_name = fs::absolute(root).lexically_normal().parent_path().filename().string();

  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) ds.class_names.push_back(entry.path().filename().string());
  }
  std::sort(ds.class_names.begin(), ds.class_names.end());
  if (ds.class_names.empty()) throw ValidationError("dataset root has no class directories: " + root.string());

  for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(root / ds.class_names[c])) {
      if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
    }
    if (files.empty()) throw ValidationError("class directory '" + ds.class_names[c] + "' contains no images");
    std::sort(files.begin(), files.end());
    for (auto& f : files) {
      if (!probe_image(f)) throw ValidationError("cannot decode image " + f.string());
      ds.samples.push_back({std::move(f), static_cast<int>(c)});
    }
  }
  return ds;
}

Tensor<float> preprocess(const Image& image, Index size) {
  if (image.channels != 3) {
    throw ValidationError("preprocess expects a 3-channel image, got " + std::to_string(image.channels) + " channels");
  }
  if (image.width <= 0 || image.height <= 0) throw ValidationError("preprocess: empty image");
  const Index h = image.height, w = image.width;
  Tensor<float> chw(Shape{1, 3, h, w});
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      for (Index c = 0; c < 3; ++c) {
        chw(0, c, y, x) = static_cast<float>(image.pixels[static_cast<std::size_t>((y * w + x) * 3 + c)]) / 255.0f;
      }
    }
  }
  Tensor<float> out = (h == size && w == size) ? chw : resize_bilinear(chw, size, size);
  out.array() = out.array().max(0.0f).min(1.0f);
  return out;
}

ImageBatch load_batch(const DomainDataset& dataset, std::span<const std::size_t> indices, Index size) {
  ImageBatch batch;
  batch.data = Tensor<float>(Shape{static_cast<Index>(indices.size()), 3, size, size});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& sample = dataset.samples.at(indices[i]);
    const Tensor<float> t = preprocess(read_image(sample.path), size);
    std::copy(t.data(), t.data() + t.numel(), batch.data.sample_data(static_cast<Index>(i)));
    batch.labels.push_back(sample.label);
  }
  return batch;
}

TargetSet select_targets(const DomainDataset& dataset, int k, std::uint64_t seed, Index size) {
  if (k < 1) throw ValidationError("k must be at least 1");
  if (static_cast<std::size_t>(k) > dataset.size()) {
    throw ValidationError("cannot select " + std::to_string(k) + " targets from a dataset of " +
                          std::to_string(dataset.size()) + " samples");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  // Partial Fisher-Yates: the first k slots are a uniform k-subset.
  for (std::size_t i = 0; i < static_cast<std::size_t>(k); ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  order.resize(static_cast<std::size_t>(k));
  TargetSet targets;
  targets.images = load_batch(dataset, order, size).data;
  targets.k = k;
  targets.selection_seed = seed;
  targets.source_dataset = dataset.domain_name;
  for (auto i : order) targets.paths.push_back(dataset.samples[i].path);
  return targets;
}

namespace {

const char* const kShapeNames[kSyntheticMaxClasses] = {"cross", "diamond", "disk", "ring", "square", "triangle"};

// Shape membership in coordinates normalized by the shape radius.
bool inside(int shape, double u, double v) {
  const double r2 = u * u + v * v;
  switch (shape) {
    case 0: return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);
    case 1: return std::abs(u) + std::abs(v) <= 1.0;
    case 2: return r2 <= 1.0;
    case 3: return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    case 4: return std::max(std::abs(u), std::abs(v)) <= 0.8;
    case 5: return v <= 0.8 && v >= -0.9 && std::abs(u) <= (v + 0.9) / 1.7;
    default: return false;
  }
}

Image render(int shape, bool target_domain, int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double cx = (0.38 + 0.24 * unit(rng)) * size;
  const double cy = (0.38 + 0.24 * unit(rng)) * size;
  const double radius = (0.24 + 0.08 * unit(rng)) * size;
  const double gray = 0.35 * unit(rng);
  const double brightness = 0.8 + 0.2 * unit(rng);
  const double period = 4.0 + 3.0 * unit(rng);
  const double phase = period * unit(rng);
  const double fg[3] = {0.95 * brightness, 0.45 * brightness, 0.12 * brightness};
  const double stripe_a[3] = {0.12, 0.30, 0.52};
  const double stripe_b[3] = {0.25, 0.50, 0.30};
  std::normal_distribution<double> noise(0.0, 0.04);

  Image img{size, size, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size * 3)};
  constexpr int kSuper = 4;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = x + (sx + 0.5) / kSuper, py = y + (sy + 0.5) / kSuper;
          hits += inside(shape, (px - cx) / radius, (py - cy) / radius) ? 1 : 0;
        }
      }
      const double alpha = static_cast<double>(hits) / (kSuper * kSuper);
      const bool stripe = std::fmod(x + y + phase, period) < period / 2;
      const double grain = target_domain ? noise(rng) : 0.0;
      for (int c = 0; c < 3; ++c) {
        const double bg = target_domain ? (stripe ? stripe_a[c] : stripe_b[c]) + grain : 1.0;
        const double fore = target_domain ? fg[c] : gray;
        const double v = std::clamp((1.0 - alpha) * bg + alpha * fore, 0.0, 1.0);
        img.pixels[static_cast<std::size_t>((y * size + x) * 3 + c)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  return img;
}

}  // namespace

SyntheticCorpus make_synthetic_corpus(const fs::path& out_dir, std::uint64_t seed, int n_per_class, int n_classes,
                                      int image_size) {
  if (n_classes < 2 || n_classes > kSyntheticMaxClasses) {
    throw ValidationError("n_classes must be in [2, " + std::to_string(kSyntheticMaxClasses) + "]");
  }
  if (n_per_class < 4) throw ValidationError("n_per_class must be at least 4");
  if (image_size < 8) throw ValidationError("image_size must be at least 8");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw PathError("cannot create output directory " + out_dir.string());

  const char* domains[2] = {"source", "target"};
  for (int d = 0; d < 2; ++d) {
    for (int c = 0; c < n_classes; ++c) {
      const fs::path dir = out_dir / domains[d] / kShapeNames[c];
      fs::create_directories(dir, ec);
      if (ec) throw PathError("cannot create " + dir.string());
      for (int i = 0; i < n_per_class; ++i) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(d), static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(i)};
        std::mt19937_64 rng(seq);
        char name[64];
        std::snprintf(name, sizeof(name), "%s_%04d.png", kShapeNames[c], i);
        write_png(dir / name, render(c, d == 1, image_size, rng));
      }
    }
  }
  const nlohmann::json provenance{{"seed", seed},
                                  {"n_per_class", n_per_class},
                                  {"n_classes", n_classes},
                                  {"image_size", image_size},
                                  {"generator_version", kSyntheticGeneratorVersion},
                                  {"source_images", n_per_class * n_classes},
                                  {"target_images", n_per_class * n_classes}};
  std::ofstream(out_dir / "provenance.json") << provenance.dump(2) << "\n";
  return {load_image_folder(out_dir / "source"), load_image_folder(out_dir / "target")};
}

std::string dataset_digest(const DomainDataset& dataset) {
  Sha256 h;
  for (const auto& name : dataset.class_names) h.update(name + "\n");
  for (const auto& s : dataset.samples) {
    h.update(fs::relative(s.path, dataset.root).generic_string() + "\n");
    std::error_code ec;
    h.update(std::to_string(fs::file_size(s.path, ec)) + "\n");
  }
  return h.hex_digest();
}

Image to_image(const Tensor<float>& images, Index n) {
  Image img{static_cast<int>(images.w()), static_cast<int>(images.h()), 3, {}};
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (Index y = 0; y < images.h(); ++y) {
    for (Index x = 0; x < images.w(); ++x) {
      for (Index c = 0; c < 3; ++c) {
        const float v = std::clamp(images(n, c, y, x), 0.0f, 1.0f);
        img.pixels[static_cast<std::size_t>((y * images.w() + x) * 3 + c)] =
            static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  return img;
}

}  // namespace osuda
