#include "sit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "sit/error.hpp"
#include "sit/text_io.hpp"

namespace sit {

namespace {

void check_pair(std::size_t a, std::size_t b, const char* what) {
  if (a == 0) throw ArgumentError(fmt::format("{}: empty input", what));
  if (a != b) throw ArgumentError(fmt::format("{}: {} values against {}", what, a, b));
}

}  // namespace

double mean_absolute_error(const std::vector<double>& predictions, const std::vector<double>& targets) {
  check_pair(predictions.size(), targets.size(), "mean_absolute_error");
  double sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) sum += std::abs(predictions[i] - targets[i]);
  return sum / double(predictions.size());
}

double pearson_r(const std::vector<double>& x, const std::vector<double>& y) {
  check_pair(x.size(), y.size(), "pearson_r");
  const double n = double(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) {
    spdlog::warn("pearson_r: zero variance, correlation undefined");
    return std::numeric_limits<double>::quiet_NaN();
  }
  return sxy / std::sqrt(sxx * syy);
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_pair(scores.size(), labels.size(), "roc_auc");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double positives = 0.0, negatives = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      positives += 1.0;
      rank_sum += rank[i];
    } else if (labels[i] == 0) {
      negatives += 1.0;
    } else {
      throw ArgumentError(fmt::format("roc_auc: label {} is not 0 or 1", labels[i]));
    }
  }
  if (positives == 0.0 || negatives == 0.0) throw ArgumentError("roc_auc: both classes must be present");
  return (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

std::string metrics_jsonl(const std::vector<MetricRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["metric"] = r.metric;
    if (std::isfinite(r.value)) {
      j["value"] = r.value;
    } else {
      j["value"] = nullptr;
    }
    j["split"] = r.split;
    j["seed"] = r.seed;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_metrics(const std::vector<MetricRecord>& records, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << metrics_jsonl(records);
  if (!out) throw IoError(fmt::format("failed writing metrics to '{}'", path.string()));
}

}  // namespace sit
