#include "osuda/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

namespace osuda {

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json per_class = nlohmann::json::object();
  for (std::size_t k = 0; k < class_names.size(); ++k) per_class[class_names[k]] = per_class_accuracy[k];
  return {{"class_names", class_names},       {"per_class_accuracy", per_class_accuracy},
          {"per_class_count", per_class_count}, {"per_class", per_class},
          {"mean_accuracy", mean_accuracy},   {"overall_accuracy", overall_accuracy},
          {"n_samples", n_samples},           {"run_seed", run_seed}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  try {
    r.class_names = j.at("class_names").get<std::vector<std::string>>();
    r.per_class_accuracy = j.at("per_class_accuracy").get<std::vector<double>>();
    r.per_class_count = j.value("per_class_count", std::vector<std::size_t>(r.class_names.size(), 0));
    r.mean_accuracy = j.at("mean_accuracy").get<double>();
    r.overall_accuracy = j.at("overall_accuracy").get<double>();
    r.n_samples = j.value("n_samples", std::size_t{0});
    r.run_seed = j.value("run_seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed metrics report: ") + e.what());
  }
  if (r.per_class_accuracy.size() != r.class_names.size()) {
    throw ValidationError("malformed metrics report: per_class_accuracy length differs from class_names");
  }
  return r;
}

MetricsReport evaluate_predictions(std::span<const int> labels, std::span<const int> predictions,
                                   const std::vector<std::string>& class_names, std::uint64_t run_seed) {
  if (labels.size() != predictions.size()) throw ShapeError("evaluate_predictions: label/prediction count mismatch");
  if (labels.empty()) throw ValidationError("evaluate_predictions: no samples");
  const auto K = class_names.size();
  std::vector<std::size_t> correct(K, 0), count(K, 0);
  std::size_t total_correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= K) {
      throw ValidationError("evaluate_predictions: label " + std::to_string(labels[i]) + " out of range");
    }
    ++count[labels[i]];
    if (labels[i] == predictions[i]) {
      ++correct[labels[i]];
      ++total_correct;
    }
  }
  MetricsReport r;
  r.class_names = class_names;
  r.per_class_count = count;
  r.n_samples = labels.size();
  r.run_seed = run_seed;
  for (std::size_t k = 0; k < K; ++k) {
    if (count[k] == 0) throw ValidationError("evaluate_predictions: class '" + class_names[k] + "' has no samples");
    r.per_class_accuracy.push_back(100.0 * static_cast<double>(correct[k]) / static_cast<double>(count[k]));
  }
  r.mean_accuracy = std::accumulate(r.per_class_accuracy.begin(), r.per_class_accuracy.end(), 0.0) / K;
  r.overall_accuracy = 100.0 * static_cast<double>(total_correct) / static_cast<double>(labels.size());
  return r;
}

std::vector<int> predict(const ClassifierState<float>& cm, const Tensor<float>& images) {
  NoGradGuard guard;
  const auto logits = classify(cm, Var<float>(images)).value();
  std::vector<int> out;
  for (Index n = 0; n < logits.shape().n; ++n) {
    Index best = 0;
    logits.sample_matrix(n).col(0).maxCoeff(&best);
    out.push_back(static_cast<int>(best));
  }
  return out;
}

MetricsReport evaluate(const ClassifierState<float>& cm, const DomainDataset& dataset, Index batch_size,
                       Index input_size, std::uint64_t run_seed) {
  if (static_cast<Index>(dataset.num_classes()) != cm.num_classes()) {
    throw ValidationError("evaluation set has " + std::to_string(dataset.num_classes()) +
                          " classes but the classifier predicts " + std::to_string(cm.num_classes()));
  }
  std::vector<int> labels, preds;
  for (std::size_t start = 0; start < dataset.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(dataset.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
      idx.push_back(i);
    }
    const auto batch = load_batch(dataset, idx, input_size);
    const auto p = predict(cm, batch.data);
    labels.insert(labels.end(), batch.labels.begin(), batch.labels.end());
    preds.insert(preds.end(), p.begin(), p.end());
  }
  return evaluate_predictions(labels, preds, dataset.class_names, run_seed);
}

namespace {

Stat population_stat(const std::vector<double>& xs) {
  Stat s;
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double sq = 0;
  for (double x : xs) sq += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(sq / static_cast<double>(xs.size()));
  return s;
}

}  // namespace

AggregateReport aggregate_runs(std::span<const MetricsReport> runs) {
  if (runs.empty()) throw ValidationError("aggregate_runs: no runs");
  AggregateReport agg;
  agg.class_names = runs.front().class_names;
  agg.n_runs = runs.size();
  for (const auto& r : runs) {
    if (r.class_names != agg.class_names) throw ValidationError("aggregate_runs: runs disagree on class names");
  }
  for (std::size_t k = 0; k < agg.class_names.size(); ++k) {
    std::vector<double> xs;
    for (const auto& r : runs) xs.push_back(r.per_class_accuracy[k]);
    agg.per_class.push_back(population_stat(xs));
  }
  std::vector<double> means, overalls;
  for (const auto& r : runs) {
    means.push_back(r.mean_accuracy);
    overalls.push_back(r.overall_accuracy);
  }
  agg.mean_accuracy = population_stat(means);
  agg.overall_accuracy = population_stat(overalls);
  return agg;
}

AggregateReport single_run(const MetricsReport& report) { return aggregate_runs(std::span(&report, 1)); }

nlohmann::json AggregateReport::to_json() const {
  auto stat = [](const Stat& s) { return nlohmann::json{{"mean", s.mean}, {"std", s.std}}; };
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t k = 0; k < class_names.size(); ++k) per[class_names[k]] = stat(per_class[k]);
  return {{"class_names", class_names}, {"per_class", per},         {"mean_accuracy", stat(mean_accuracy)},
          {"overall_accuracy", stat(overall_accuracy)}, {"n_runs", n_runs}, {"std_kind", "population"}};
}

std::string format_cell(const Stat& s) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f ± %.2f", s.mean, s.std);
  return buf;
}

std::string render_table(const AggregateReport& agg, TableFormat format) {
  std::vector<std::string> header = agg.class_names;
  header.push_back("Mean");
  header.push_back("n_runs");
  std::vector<std::string> row;
  for (const auto& s : agg.per_class) row.push_back(format_cell(s));
  row.push_back(format_cell(agg.mean_accuracy));
  row.push_back(std::to_string(agg.n_runs));

  auto join = [](const std::vector<std::string>& cells, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? sep : "") + cells[i];
    return out;
  };
  if (format == TableFormat::Csv) return join(header, ",") + "\n" + join(row, ",") + "\n";
  std::vector<std::string> rule(header.size(), "---");
  return "| " + join(header, " | ") + " |\n| " + join(rule, " | ") + " |\n| " + join(row, " | ") + " |\n";
}

}  // namespace osuda
