#include "flipdistill/losses.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "flipdistill/errors.hpp"
#include "flipdistill/log.hpp"

namespace flipdistill {

namespace {

void require_square(const Tensor& m, std::size_t b, const char* what) {
  if (m.rank() != 2 || m.dim(0) != b || m.dim(1) != b) {
    throw DimensionError(std::string(what) + ": expected [" + std::to_string(b) + "," + std::to_string(b) +
                         "], got " + shape_str(m.shape()));
  }
}

Tensor as_scalar(const Tensor& t) { return t.rank() == 0 ? t : reshape(t, {}); }

}  // namespace

Tensor cosine_matrix(const Tensor& r_a, const Tensor& r_b) {
  if (r_a.rank() != 2 || r_b.rank() != 2 || r_a.dim(1) != r_b.dim(1)) {
    throw DimensionError("cosine_matrix: incompatible shapes " + shape_str(r_a.shape()) + " and " +
                         shape_str(r_b.shape()));
  }
  auto dots = matmul_nt(r_a, r_b);
  auto norm_a = sqrt(reduce_sum(mul(r_a, r_a), 1));
  auto norm_b = sqrt(reduce_sum(mul(r_b, r_b), 1));
  auto denom = clamp(outer(norm_a, norm_b), kNormEps, std::numeric_limits<double>::infinity());
  return div(dots, denom);
}

Tensor filter_mask(const Tensor& alpha_s, const Tensor& y, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ConfigError("filter threshold must lie in (0, 1), got " + std::to_string(threshold));
  }
  if (alpha_s.shape() != y.shape()) {
    throw DimensionError("filter_mask: alpha " + shape_str(alpha_s.shape()) + " vs labels " + shape_str(y.shape()));
  }
  std::vector<double> phi(alpha_s.size());
  for (std::size_t n = 0; n < phi.size(); ++n) {
    const double a = alpha_s.values()[n];
    const double label = y.values()[n];
    const bool noisy_positive = a < threshold && label == 1.0;
    const bool noisy_negative = a >= 1.0 - threshold && label == 0.0;
    phi[n] = (noisy_positive || noisy_negative) ? 0.0 : 1.0;
  }
  return Tensor(alpha_s.shape(), std::move(phi));
}

Tensor all_pass_mask(const Shape& shape) { return Tensor::full(shape, 1.0); }

std::size_t count_filtered(const Tensor& phi) {
  std::size_t n = 0;
  for (double v : phi.values()) n += v == 0.0;
  return n;
}

Tensor distillation_loss(const BatchMatrices& m) {
  if (m.alpha_s.shape() != m.alpha_l.shape() || m.alpha_s.shape() != m.phi.shape()) {
    throw DimensionError("distillation_loss: inconsistent matrix shapes");
  }
  const std::size_t kept = m.phi.size() - count_filtered(m.phi);
  if (kept == 0) return Tensor::scalar(0.0);
  auto gap = sub(m.alpha_s.detach(), m.alpha_l);
  return div(sum(mul(m.phi, mul(gap, gap))), Tensor::scalar(static_cast<double>(kept)));
}

Tensor angular(const Tensor& alpha) { return arccos(alpha); }

std::size_t count_mcl_anchors(const Tensor& phi, const Tensor& y) {
  const std::size_t b = phi.dim(0);
  std::size_t n = 0;
  for (std::size_t i = 0; i < b; ++i) n += phi.at(i, i) == 1.0 && y.at(i, i) == 1.0;
  return n;
}

Tensor mcl_loss(const Tensor& theta_l, const Tensor& theta_s, const Tensor& phi, const Tensor& y, double m_c,
                NegativeMargin negative_margin) {
  if (theta_l.rank() != 2 || theta_l.dim(0) != theta_l.dim(1)) {
    throw DimensionError("mcl_loss: theta_l must be square, got " + shape_str(theta_l.shape()));
  }
  const std::size_t b = theta_l.dim(0);
  require_square(theta_s, b, "mcl_loss theta_s");
  require_square(phi, b, "mcl_loss phi");
  require_square(y, b, "mcl_loss y");
  if (m_c < 0.0) throw ConfigError("margin m_c must be non-negative");

  // Constant margin shifts and the term-selection weights.
  std::vector<double> shift(b * b, 0.0), weight(b * b, 0.0);
  std::vector<std::size_t> anchor_diag;
  for (std::size_t i = 0; i < b; ++i) {
    const bool anchor = phi.at(i, i) == 1.0 && y.at(i, i) == 1.0;
    if (!anchor) continue;
    anchor_diag.push_back(i * b + i);
    const double ts_pos = theta_s.at(i, i);
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) {
        shift[i * b + j] = m_c * ts_pos;
        weight[i * b + j] = 1.0;
      } else if (y.at(i, j) == 0.0) {
        const double ts = negative_margin == NegativeMargin::kPositivePairAngle ? ts_pos : theta_s.at(i, j);
        shift[i * b + j] = -m_c * ts;
        weight[i * b + j] = phi.at(i, j);
      }
    }
  }
  if (anchor_diag.empty()) {
    warn("mcl_loss: no surviving anchors in batch; contributing 0");
    return Tensor::scalar(0.0);
  }
  std::vector<std::size_t> anchor_rows;
  for (auto d : anchor_diag) anchor_rows.push_back(d / b);

  auto terms = mul(exp(cos(add(theta_l, Tensor({b, b}, std::move(shift))))), Tensor({b, b}, std::move(weight)));
  auto denom = gather(reduce_sum(terms, 1), anchor_rows);
  auto numer = gather(terms, anchor_diag);
  auto per_anchor = scale(log(div(numer, denom)), -1.0);
  return as_scalar(div(sum(per_anchor), Tensor::scalar(static_cast<double>(anchor_diag.size()))));
}

Tensor supervised_loss(const Tensor& p_yes, std::span<const int> labels) {
  if (p_yes.size() != labels.size()) {
    throw DimensionError("supervised_loss: " + std::to_string(p_yes.size()) + " probabilities vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = labels.size();
  std::vector<double> pos(n), neg(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw InputError("supervised_loss: labels must be 0 or 1");
    pos[i] = labels[i];
    neg[i] = 1.0 - labels[i];
  }
  auto p = clamp(reshape(p_yes, {n}), kProbEps, 1.0 - kProbEps);
  auto log_p = log(p);
  auto log_q = log(add_scalar(scale(p, -1.0), 1.0));
  auto ll = add(mul(log_p, Tensor({n}, std::move(pos))), mul(log_q, Tensor({n}, std::move(neg))));
  return as_scalar(scale(div(sum(ll), Tensor::scalar(static_cast<double>(n))), -1.0));
}

TotalLoss total_loss(const Tensor& l_sup, const Tensor& l_dist, const Tensor& l_mcl, const LossWeights& weights,
                     std::size_t filtered_count) {
  for (auto [name, t] : {std::pair{"l_sup", &l_sup}, {"l_dist", &l_dist}, {"l_mcl", &l_mcl}}) {
    if (t->size() != 1) throw DimensionError(std::string(name) + " is not a scalar");
    if (!std::isfinite(t->item())) throw TrainingError(std::string("non-finite loss component ") + name);
  }
  auto total = add(as_scalar(l_sup), add(scale(as_scalar(l_dist), weights.w_dist), scale(as_scalar(l_mcl), weights.w_mcl)));
  LossBreakdown b;
  b.l_sup = l_sup.item();
  b.l_dist = l_dist.item();
  b.l_mcl = l_mcl.item();
  b.total = total.item();
  b.filtered_count = filtered_count;
  if (!std::isfinite(b.total)) throw TrainingError("non-finite total loss");
  return {total, b};
}

}  // namespace flipdistill
