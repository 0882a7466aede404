#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "osuda/image_io.hpp"
#include "osuda/tensor.hpp"

namespace osuda {

// Class-folder image dataset: root/<class_name>/<file>.{png,jpg,jpeg}. The
// class index is the rank of the class name under lexicographic order.
struct DomainDataset {
  struct Sample {
    std::filesystem::path path;
    int label = 0;
  };

  std::filesystem::path root;
  std::vector<Sample> samples;
  std::vector<std::string> class_names;
  std::string domain_name;

  std::size_t size() const { return samples.size(); }
  std::size_t num_classes() const { return class_names.size(); }
};

// Images [batch, 3, size, size] in [0, 1] and optional class labels.
struct ImageBatch {
  Tensor<float> data;
  std::vector<int> labels;
};

// The unlabeled target samples available for adaptation (k = 1 is one-shot).
struct TargetSet {
  Tensor<float> images;  // [k, 3, size, size]
  int k = 0;
  std::uint64_t selection_seed = 0;
  std::string source_dataset;
  std::vector<std::filesystem::path> paths;
};

DomainDataset load_image_folder(const std::filesystem::path& root);

// Bilinear resize to size x size and scale to [0, 1]. Output [1, 3, size, size].
Tensor<float> preprocess(const Image& image, Index size = 224);

// Loads and preprocesses the given samples in order.
ImageBatch load_batch(const DomainDataset& dataset, std::span<const std::size_t> indices, Index size);

// k distinct samples drawn uniformly without replacement from an RNG stream
// seeded only by `seed`.
TargetSet select_targets(const DomainDataset& dataset, int k, std::uint64_t seed, Index size = 224);

struct SyntheticCorpus {
  DomainDataset source;
  DomainDataset target;
};

inline constexpr int kSyntheticGeneratorVersion = 1;
inline constexpr int kSyntheticMaxClasses = 6;

// Renders two class-folder trees under out_dir/source and out_dir/target.
// Classes differ by shape; the source domain is gray shapes on white, the
// target domain is tinted shapes on a striped, noisy background. Also writes
// out_dir/provenance.json. Output is a pure function of the arguments.
SyntheticCorpus make_synthetic_corpus(const std::filesystem::path& out_dir, std::uint64_t seed, int n_per_class,
                                      int n_classes, int image_size = 32);

// Digest over class names, relative sample paths and file sizes.
std::string dataset_digest(const DomainDataset& dataset);

// Sample n of a [N, 3, H, W] tensor quantized to 8-bit RGB.
Image to_image(const Tensor<float>& images, Index n);

}  // namespace osuda
