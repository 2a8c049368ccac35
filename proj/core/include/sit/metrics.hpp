#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace sit {

/// Mean absolute error. Throws ArgumentError on empty or mismatched input.
double mean_absolute_error(const std::vector<double>& predictions, const std::vector<double>& targets);

/// Pearson correlation; NaN (with a logged warning) when either side has zero
/// variance.
double pearson_r(const std::vector<double>& x, const std::vector<double>& y);

/// Area under the ROC curve from the rank-sum statistic; tied scores receive
/// their average rank. Labels are 0/1; both classes must be present.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct MetricRecord {
  std::string metric;
  double value = 0.0;
  std::string split;
  std::uint64_t seed = 0;
};

/// One JSON object per line: {"metric", "value", "split", "seed"}; NaN is
/// written as null.
std::string metrics_jsonl(const std::vector<MetricRecord>& records);
void write_metrics(const std::vector<MetricRecord>& records, const std::filesystem::path& path);

}  // namespace sit
