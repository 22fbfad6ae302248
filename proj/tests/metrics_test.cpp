#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "test_util.hpp"
#include "flipdistill/metrics.hpp"
#include "flipdistill/rng.hpp"

namespace fd = flipdistill;

using fdtest::brute_force_auc;

TEST(Auc, HandExample) {
  std::vector<double> s{0.9, 0.8, 0.3, 0.2};
  std::vector<int> y{1, 0, 1, 0};
  EXPECT_DOUBLE_EQ(*fd::roc_auc(s, y), 0.75);
}

TEST(Auc, MatchesBruteForceIncludingTies) {
  auto rng = fd::make_stream(21, "auc");
  std::uniform_int_distribution<int> size(2, 50), level(0, 9);
  std::bernoulli_distribution coin(0.5);
  int compared = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = size(rng);
    std::vector<double> s(n);
    std::vector<int> y(n);
    // Coarse score levels produce many ties.
    for (int i = 0; i < n; ++i) {
      s[i] = level(rng) / 10.0;
      y[i] = coin(rng);
    }
    y[0] = 1;
    y[1] = 0;
    EXPECT_EQ(*fd::roc_auc(s, y), brute_force_auc(s, y)) << "trial " << trial;
    ++compared;
  }
  EXPECT_EQ(compared, 200);
}

TEST(Auc, PerfectAndNull) {
  std::vector<double> s{1, 1, 0, 0};
  std::vector<int> y{1, 1, 0, 0};
  EXPECT_EQ(*fd::roc_auc(s, y), 1.0);
  auto rng = fd::make_stream(22, "auc-null");
  std::uniform_real_distribution<double> u;
  std::bernoulli_distribution coin(0.5);
  std::vector<double> rs(4000);
  std::vector<int> ry(4000);
  for (std::size_t i = 0; i < rs.size(); ++i) {
    rs[i] = u(rng);
    ry[i] = coin(rng);
  }
  EXPECT_NEAR(*fd::roc_auc(rs, ry), 0.5, 0.05);
}

TEST(Auc, SingleClassIsAbsentWithWarning) {
  fdtest::WarningCounter warnings;
  std::vector<double> s{0.2, 0.4};
  std::vector<int> y{1, 1};
  EXPECT_FALSE(fd::roc_auc(s, y).has_value());
  EXPECT_EQ(warnings.count, 1);
}

TEST(Accuracy, HandFormula) {
  std::vector<double> s{0.9, 0.5, 0.49, 0.1, 0.7};
  std::vector<int> y{1, 0, 1, 0, 1};
  // Predictions at 0.5: 1, 1, 0, 0, 1 -> correct: 1, 0, 0, 1, 1
  EXPECT_DOUBLE_EQ(fd::accuracy(s, y), 3.0 / 5.0);
  // tp = 2, fp = 1, fn = 1 -> F1 = 2tp / (2tp + fp + fn)
  EXPECT_DOUBLE_EQ(fd::f1_score(s, y), 4.0 / 6.0);
}

TEST(F1, MatchesHandFormulaOnRandomSets) {
  auto rng = fd::make_stream(23, "f1");
  std::uniform_real_distribution<double> u;
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(30);
    std::vector<int> y(30);
    double tp = 0, fp = 0, fn = 0, correct = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = u(rng);
      y[i] = coin(rng);
      const int pred = s[i] >= 0.5;
      tp += pred && y[i];
      fp += pred && !y[i];
      fn += !pred && y[i];
      correct += pred == y[i];
    }
    EXPECT_DOUBLE_EQ(fd::accuracy(s, y), correct / 30.0);
    const double denom = 2 * tp + fp + fn;
    EXPECT_DOUBLE_EQ(fd::f1_score(s, y), denom > 0 ? 2 * tp / denom : 0.0);
  }
}

TEST(F1, NoPositivesAnywhereIsZero) {
  std::vector<double> s{0.1, 0.2};
  std::vector<int> y{0, 0};
  EXPECT_EQ(fd::f1_score(s, y), 0.0);
  EXPECT_EQ(fd::accuracy(s, y), 1.0);
}

TEST(Histogram, ConstantScoresOccupyOneBin) {
  std::vector<double> s(10, 0.5);
  std::vector<int> y{1, 0, 1, 0, 1, 0, 1, 0, 1, 1};
  auto h = fd::score_histogram(s, y, 20);
  int occupied = 0;
  for (std::size_t b = 0; b < 20; ++b) occupied += (h.pos_counts[b] + h.neg_counts[b]) > 0;
  EXPECT_EQ(occupied, 1);
  EXPECT_EQ(h.separation, 0.0);
}

TEST(Histogram, CountsConserveAndSeparationIsMeanGap) {
  std::vector<double> s{0.9, 0.8, 1.0, 0.1, 0.0, 0.2};
  std::vector<int> y{1, 1, 1, 0, 0, 0};
  auto h = fd::score_histogram(s, y, 10);
  ASSERT_EQ(h.edges.size(), 11u);
  EXPECT_EQ(h.edges.front(), 0.0);
  EXPECT_EQ(h.edges.back(), 1.0);
  std::size_t pos = 0, neg = 0;
  for (std::size_t b = 0; b < 10; ++b) {
    pos += h.pos_counts[b];
    neg += h.neg_counts[b];
  }
  EXPECT_EQ(pos, 3u);
  EXPECT_EQ(neg, 3u);
  EXPECT_EQ(h.pos_counts[9], 2u);  // 0.9 and the closed right edge 1.0
  EXPECT_NEAR(h.pos_mean, 0.9, 1e-15);
  EXPECT_NEAR(h.neg_mean, 0.1, 1e-15);
  EXPECT_NEAR(h.separation, 0.8, 1e-15);
}

TEST(Histogram, CsvHasHeaderAndOneRowPerBin) {
  std::vector<double> s{0.25, 0.75};
  std::vector<int> y{0, 1};
  auto h = fd::score_histogram(s, y, 4);
  auto path = std::filesystem::temp_directory_path() / "flipdistill_hist.csv";
  fd::write_histogram_csv(path, h);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "bin_low,bin_high,pos_count,neg_count");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 4);
}
