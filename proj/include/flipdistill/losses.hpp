#pragma once

#include <cstddef>
#include <span>

#include "flipdistill/tensor.hpp"

namespace flipdistill {

inline constexpr double kNormEps = 1e-12;
inline constexpr double kProbEps = 1e-12;

// Similarity structure of one batch. Row i is anchor text_i, column j is
// candidate text_j; the diagonal holds the aligned pairs.
struct BatchMatrices {
  Tensor alpha_s;  // teacher cosine, constant
  Tensor alpha_l;  // student cosine, differentiable
  Tensor y;        // pair labels in {0, 1}
  Tensor phi;      // noise-filter mask in {0, 1}
};

struct LossBreakdown {
  double l_sup = 0.0;
  double l_dist = 0.0;
  double l_mcl = 0.0;
  double total = 0.0;
  std::size_t filtered_count = 0;  // entries with phi == 0
};

struct LossWeights {
  double w_dist = 0.1;
  double w_mcl = 0.1;
};

// Which teacher angle sets the margin of a negative term (i, j').
enum class NegativeMargin {
  kPositivePairAngle,  // theta_s(i, i), the aligned pair's angle
  kOwnAngle,           // theta_s(i, j')
};

// (a_i . b_j) / max(|a_i| |b_j|, kNormEps)
Tensor cosine_matrix(const Tensor& r_a, const Tensor& r_b);

// 0 where (alpha < threshold and y = 1) or (alpha >= 1 - threshold and y = 0), else 1.
// Throws ConfigError unless 0 < threshold < 1.
Tensor filter_mask(const Tensor& alpha_s, const Tensor& y, double threshold);
Tensor all_pass_mask(const Shape& shape);
std::size_t count_filtered(const Tensor& phi);

// Mean squared similarity gap over unfiltered entries; 0 if every entry is filtered.
Tensor distillation_loss(const BatchMatrices& m);

// arccos of clamped cosines.
Tensor angular(const Tensor& alpha);

// Margin-aware contrastive loss, averaged over surviving anchors.
//
// Anchor i survives when its aligned pair is a labelled match (y_ii = 1)
// that the filter keeps (phi_ii = 1). Its negatives are the in-batch
// candidates j' != i with y_ij' = 0, each weighted by phi_ij'. Per anchor:
//
//   -log( e^{cos(tl_ii + m tm_ii)} / (e^{cos(tl_ii + m tm_ii)} + sum_j' phi_ij' e^{cos(tl_ij' - m tm_ij')}) )
//
// where tm_ij' is ts_ii (default) or ts_ij' depending on `negative_margin`.
// Returns 0 (with a warning) when no anchor survives.
Tensor mcl_loss(const Tensor& theta_l, const Tensor& theta_s, const Tensor& phi, const Tensor& y, double m_c,
                NegativeMargin negative_margin = NegativeMargin::kPositivePairAngle);
std::size_t count_mcl_anchors(const Tensor& phi, const Tensor& y);

// Mean binary cross-entropy of p_yes ([B]) against labels; p is clamped to
// [kProbEps, 1 - kProbEps] before the logs.
Tensor supervised_loss(const Tensor& p_yes, std::span<const int> labels);

struct TotalLoss {
  Tensor total;
  LossBreakdown breakdown;
};

// l_sup + w_dist * l_dist + w_mcl * l_mcl. Throws TrainingError naming the
// first non-finite component.
TotalLoss total_loss(const Tensor& l_sup, const Tensor& l_dist, const Tensor& l_mcl, const LossWeights& weights,
                     std::size_t filtered_count = 0);

}  // namespace flipdistill
