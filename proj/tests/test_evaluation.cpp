#include <gtest/gtest.h>

#include <numeric>
#include <sstream>

#include "oracles.hpp"
#include "osuda/evaluation.hpp"
#include "support.hpp"

namespace osuda {
namespace {

MetricsReport report_with(const std::vector<double>& per_class) {
  MetricsReport r;
  for (std::size_t i = 0; i < per_class.size(); ++i) r.class_names.push_back("c" + std::to_string(i));
  r.per_class_accuracy = per_class;
  r.per_class_count.assign(per_class.size(), 10);
  r.mean_accuracy = std::accumulate(per_class.begin(), per_class.end(), 0.0) / static_cast<double>(per_class.size());
  r.overall_accuracy = r.mean_accuracy;
  return r;
}

TEST(Predictions, PerfectAndConstantPredictors) {
  const std::vector<int> labels{0, 1, 0, 1};
  const auto perfect = evaluate_predictions(labels, labels, {"a", "b"});
  EXPECT_EQ(perfect.per_class_accuracy, (std::vector<double>{100, 100}));
  EXPECT_EQ(perfect.mean_accuracy, 100.0);
  const std::vector<int> zeros(4, 0);
  const auto constant = evaluate_predictions(labels, zeros, {"a", "b"});
  EXPECT_EQ(constant.per_class_accuracy, (std::vector<double>{100, 0}));
  EXPECT_EQ(constant.mean_accuracy, 50.0);
  EXPECT_EQ(constant.n_samples, 4u);
}

TEST(Predictions, MatchConfusionMatrixOracle) {
  std::mt19937_64 rng(0);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = 2 + static_cast<int>(rng() % 6);
    std::vector<int> labels, preds;
    for (int c = 0; c < k; ++c) labels.push_back(c);
    for (int i = 0; i < 100; ++i) labels.push_back(static_cast<int>(rng() % k));
    for (std::size_t i = 0; i < labels.size(); ++i) {
      preds.push_back(rng() % 3 == 0 ? labels[i] : static_cast<int>(rng() % k));
    }
    std::vector<std::string> names;
    for (int c = 0; c < k; ++c) names.push_back(std::to_string(c));
    const auto report = evaluate_predictions(labels, preds, names, 42);
    const auto expected = oracle::per_class_accuracy(labels, preds, k);
    EXPECT_EQ(report.per_class_accuracy, expected);
    double mean = 0;
    for (double v : expected) mean += v / k;
    EXPECT_NEAR(report.mean_accuracy, mean, 1e-9);
    EXPECT_EQ(report.run_seed, 42u);
    for (double v : report.per_class_accuracy) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 100.0);
    }
  }
}

TEST(Predictions, MeanIsInvariantToClassOrder) {
  const std::vector<int> labels{0, 0, 1, 2, 2, 2};
  const std::vector<int> preds{0, 1, 1, 2, 0, 2};
  const auto a = evaluate_predictions(labels, preds, {"x", "y", "z"});
  std::vector<int> relabel{2, 0, 1};
  std::vector<int> l2, p2;
  for (int v : labels) l2.push_back(relabel[v]);
  for (int v : preds) p2.push_back(relabel[v]);
  const auto b = evaluate_predictions(l2, p2, {"y", "z", "x"});
  EXPECT_NEAR(a.mean_accuracy, b.mean_accuracy, 1e-12);
}

TEST(Predictions, RejectsEmptyClassesAndBadInput) {
  EXPECT_THROW(evaluate_predictions(std::vector<int>{0, 0}, std::vector<int>{0, 0}, {"a", "b"}), ValidationError);
  EXPECT_THROW(evaluate_predictions(std::vector<int>{0, 1}, std::vector<int>{0}, {"a", "b"}), ShapeError);
}

TEST(Evaluate, BatchSizeInvarianceAndClassCheck) {
  testing::TempDir dir("eval");
  const auto corpus = make_synthetic_corpus(dir.path(), 0, 4, 3);
  const auto cm = ClassifierState<float>::create(Backbone::SmallCnn, 3, 5, 4);
  const auto one = evaluate(cm, corpus.target, 1, 16);
  const auto many = evaluate(cm, corpus.target, 32, 16);
  EXPECT_EQ(one.per_class_accuracy, many.per_class_accuracy);
  EXPECT_EQ(one.n_samples, 12u);
  std::vector<std::size_t> all(12);
  std::iota(all.begin(), all.end(), 0);
  const auto batch = load_batch(corpus.target, all, 16);
  const auto preds = predict(cm, batch.data);
  EXPECT_EQ(one.per_class_accuracy, oracle::per_class_accuracy(batch.labels, preds, 3));
  const auto wrong = ClassifierState<float>::create(Backbone::SmallCnn, 4, 5, 4);
  EXPECT_THROW(evaluate(wrong, corpus.target, 4, 16), ValidationError);
}

TEST(Aggregate, TwoPointAndIdenticalRuns) {
  const std::vector<MetricsReport> two{report_with({40, 40}), report_with({60, 60})};
  const auto agg = aggregate_runs(two);
  EXPECT_DOUBLE_EQ(agg.mean_accuracy.mean, 50.0);
  EXPECT_DOUBLE_EQ(agg.mean_accuracy.std, 10.0);
  EXPECT_EQ(agg.n_runs, 2u);
  const std::vector<MetricsReport> five(5, report_with({12.5, 80, 33}));
  const auto same = aggregate_runs(five);
  for (const auto& s : same.per_class) EXPECT_EQ(s.std, 0.0);
  EXPECT_EQ(same.mean_accuracy.std, 0.0);
  EXPECT_EQ(same.to_json().at("std_kind"), "population");
}

TEST(Aggregate, RunOrderIrrelevantAndClassMismatchRejected) {
  const std::vector<MetricsReport> runs{report_with({10, 90}), report_with({30, 20}), report_with({70, 55})};
  const std::vector<MetricsReport> permuted{runs[2], runs[0], runs[1]};
  const auto a = aggregate_runs(runs);
  const auto b = aggregate_runs(permuted);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_NEAR(a.per_class[k].mean, b.per_class[k].mean, 1e-12);
    EXPECT_NEAR(a.per_class[k].std, b.per_class[k].std, 1e-12);
  }
  auto other = report_with({1, 2});
  other.class_names[1] = "zz";
  const std::vector<MetricsReport> mixed{runs[0], other};
  EXPECT_THROW(aggregate_runs(mixed), ValidationError);
}

TEST(Table, CellFormatAndColumnStructure) {
  EXPECT_EQ(format_cell({48.79, 0.5}), "48.79 ± 0.50");
  EXPECT_EQ(format_cell({100, 0}), "100.00 ± 0.00");
  const std::vector<MetricsReport> runs{report_with({40, 60}), report_with({60, 80})};
  const auto csv = render_table(aggregate_runs(runs), TableFormat::Csv);
  EXPECT_EQ(csv, "c0,c1,Mean,n_runs\n50.00 ± 10.00,70.00 ± 10.00,60.00 ± 10.00,2\n");

  const std::vector<std::string> visda{"Aeroplane", "Bicycle", "Bus",   "Car",   "Horse", "Knife",
                                       "Motorcycle", "Person", "Plant", "Skateboard", "Train", "Truck"};
  auto r = report_with(std::vector<double>(12, 48.79));
  r.class_names = visda;
  const auto md = render_table(single_run(r), TableFormat::Markdown);
  std::istringstream lines(md);
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(std::count(header.begin(), header.end(), '|'), 15);
  EXPECT_NE(header.find("| Aeroplane |"), std::string::npos);
  EXPECT_NE(header.find("| Truck | Mean | n_runs |"), std::string::npos);
}

// Parses "| a | b |" rows back into cells.
std::vector<std::string> cells(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  std::getline(ss, cell, '|');
  while (std::getline(ss, cell, '|')) {
    const auto b = cell.find_first_not_of(' ');
    const auto e = cell.find_last_not_of(' ');
    if (b != std::string::npos) out.push_back(cell.substr(b, e - b + 1));
  }
  return out;
}

TEST(Table, MarkdownParsesBackToTheAggregate) {
  const std::vector<MetricsReport> runs{report_with({12.345, 99.5, 7}), report_with({20.1, 80.25, 9}),
                                        report_with({15, 90, 30})};
  const auto agg = aggregate_runs(runs);
  std::istringstream md(render_table(agg, TableFormat::Markdown));
  std::string header, rule, row;
  std::getline(md, header);
  std::getline(md, rule);
  std::getline(md, row);
  const auto values = cells(row);
  ASSERT_EQ(values.size(), 5u);
  for (std::size_t k = 0; k < 3; ++k) {
    double m = 0, s = 0;
    ASSERT_EQ(std::sscanf(values[k].c_str(), "%lf ± %lf", &m, &s), 2) << values[k];
    EXPECT_NEAR(m, agg.per_class[k].mean, 0.005);
    EXPECT_NEAR(s, agg.per_class[k].std, 0.005);
  }
  EXPECT_EQ(values[4], "3");
}

TEST(Report, JsonRoundTrip) {
  auto r = evaluate_predictions(std::vector<int>{0, 1, 1}, std::vector<int>{0, 1, 0}, {"a", "b"}, 9);
  const auto back = MetricsReport::from_json(r.to_json());
  EXPECT_EQ(back.class_names, r.class_names);
  EXPECT_EQ(back.per_class_accuracy, r.per_class_accuracy);
  EXPECT_EQ(back.per_class_count, r.per_class_count);
  EXPECT_EQ(back.mean_accuracy, r.mean_accuracy);
  EXPECT_EQ(back.run_seed, 9u);
}

}  // namespace
}  // namespace osuda
