#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "osuda/classifier.hpp"
#include "osuda/data.hpp"

namespace osuda {

// Accuracies are percentages in [0, 100].
struct MetricsReport {
  std::vector<std::string> class_names;
  std::vector<double> per_class_accuracy;
  std::vector<std::size_t> per_class_count;
  double mean_accuracy = 0;     // unweighted mean over classes (primary metric)
  double overall_accuracy = 0;  // fraction of all samples
  std::size_t n_samples = 0;
  std::uint64_t run_seed = 0;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

MetricsReport evaluate_predictions(std::span<const int> labels, std::span<const int> predictions,
                                   const std::vector<std::string>& class_names, std::uint64_t run_seed = 0);

// Argmax predictions of the classifier in eval mode.
std::vector<int> predict(const ClassifierState<float>& cm, const Tensor<float>& images);

MetricsReport evaluate(const ClassifierState<float>& cm, const DomainDataset& dataset, Index batch_size,
                       Index input_size, std::uint64_t run_seed = 0);

struct Stat {
  double mean = 0;
  double std = 0;  // population standard deviation
};

struct AggregateReport {
  std::vector<std::string> class_names;
  std::vector<Stat> per_class;
  Stat mean_accuracy;
  Stat overall_accuracy;
  std::size_t n_runs = 0;

  nlohmann::json to_json() const;
};

// Runs must share class names.
AggregateReport aggregate_runs(std::span<const MetricsReport> runs);
AggregateReport single_run(const MetricsReport& report);

enum class TableFormat { Csv, Markdown };

// "48.79 ± 0.50": two decimals.
std::string format_cell(const Stat& s);

// One header row (classes..., Mean, n_runs) and one data row.
std::string render_table(const AggregateReport& agg, TableFormat format);

}  // namespace osuda
