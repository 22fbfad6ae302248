#include "flipdistill/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "flipdistill/errors.hpp"
#include "flipdistill/log.hpp"

namespace flipdistill {

namespace {

void require_aligned(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError(std::to_string(scores.size()) + " scores vs " + std::to_string(labels.size()) + " labels");
  }
  for (int y : labels)
    if (y != 0 && y != 1) throw InputError("labels must be 0 or 1");
}

struct Counts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

Counts confusion(std::span<const double> scores, std::span<const int> labels, double threshold) {
  require_aligned(scores, labels);
  Counts c;
  for (std::size_t n = 0; n < scores.size(); ++n) {
    const bool pred = scores[n] >= threshold;
    if (pred && labels[n] == 1) ++c.tp;
    else if (pred) ++c.fp;
    else if (labels[n] == 1) ++c.fn;
    else ++c.tn;
  }
  return c;
}

}  // namespace

double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold) {
  const auto c = confusion(scores, labels, threshold);
  if (scores.empty()) return 0.0;
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(scores.size());
}

double f1_score(std::span<const double> scores, std::span<const int> labels, double threshold) {
  const auto c = confusion(scores, labels, threshold);
  const auto denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 0.0;
  return static_cast<double>(2 * c.tp) / static_cast<double>(denom);
}

std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> labels) {
  require_aligned(scores, labels);
  const std::size_t n = scores.size();
  const auto n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    warn("AUC undefined: evaluation set has a single class");
    return std::nullopt;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the positive rank sum, with tied groups sharing their average rank.
  double twice_rank_sum = 0.0;
  for (std::size_t start = 0; start < n;) {
    std::size_t end = start;
    while (end < n && scores[order[end]] == scores[order[start]]) ++end;
    const double twice_avg_rank = static_cast<double>(start + 1 + end);
    for (std::size_t k = start; k < end; ++k)
      if (labels[order[k]] == 1) twice_rank_sum += twice_avg_rank;
    start = end;
  }
  const double np = static_cast<double>(n_pos);
  const double u = (twice_rank_sum - np * (np + 1.0)) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

ScoreHistogram score_histogram(std::span<const double> scores, std::span<const int> labels, std::size_t bins) {
  require_aligned(scores, labels);
  if (bins == 0) throw ConfigError("histogram needs at least one bin");
  ScoreHistogram h;
  h.edges.resize(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b) h.edges[b] = static_cast<double>(b) / static_cast<double>(bins);
  h.pos_counts.assign(bins, 0);
  h.neg_counts.assign(bins, 0);
  double pos_sum = 0.0, neg_sum = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t n = 0; n < scores.size(); ++n) {
    const double s = std::clamp(scores[n], 0.0, 1.0);
    const auto b = std::min(static_cast<std::size_t>(s * static_cast<double>(bins)), bins - 1);
    if (labels[n] == 1) {
      ++h.pos_counts[b];
      pos_sum += scores[n];
      ++n_pos;
    } else {
      ++h.neg_counts[b];
      neg_sum += scores[n];
      ++n_neg;
    }
  }
  h.pos_mean = n_pos ? pos_sum / static_cast<double>(n_pos) : 0.0;
  h.neg_mean = n_neg ? neg_sum / static_cast<double>(n_neg) : 0.0;
  h.separation = h.pos_mean - h.neg_mean;
  return h;
}

void write_histogram_csv(const std::filesystem::path& path, const ScoreHistogram& h) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw std::runtime_error("cannot write histogram " + path.string());
  os << "bin_low,bin_high,pos_count,neg_count\n";
  char buf[128];
  for (std::size_t b = 0; b < h.pos_counts.size(); ++b) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%zu,%zu\n", h.edges[b], h.edges[b + 1], h.pos_counts[b],
                  h.neg_counts[b]);
    os << buf;
  }
}

}  // namespace flipdistill
