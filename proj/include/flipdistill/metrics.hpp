#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace flipdistill {

inline constexpr double kDecisionThreshold = 0.5;

// Predictions are positive when score >= threshold.
double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold = kDecisionThreshold);
// 0 when there are no predicted and no actual positives.
double f1_score(std::span<const double> scores, std::span<const int> labels, double threshold = kDecisionThreshold);
// Mann-Whitney statistic with half credit for ties. Absent (with a warning)
// when either class is empty.
std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> labels);

struct ScoreHistogram {
  std::vector<double> edges;  // bins + 1 edges over [0, 1]
  std::vector<std::size_t> pos_counts;
  std::vector<std::size_t> neg_counts;
  double pos_mean = 0.0;
  double neg_mean = 0.0;
  double separation = 0.0;  // pos_mean - neg_mean
};

// Scores are clamped into [0, 1]; the last bin is closed on the right.
ScoreHistogram score_histogram(std::span<const double> scores, std::span<const int> labels, std::size_t bins);
// Columns: bin_low, bin_high, pos_count, neg_count.
void write_histogram_csv(const std::filesystem::path& path, const ScoreHistogram& h);

}  // namespace flipdistill
