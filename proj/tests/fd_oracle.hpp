#pragma once

// Test-only central finite-difference oracle. Independent of the tape: it
// only perturbs raw values and re-evaluates a forward function.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

namespace fdtest {

inline std::vector<double> central_diff(std::span<double> params, const std::function<double()>& f, double h = 1e-5) {
  std::vector<double> out(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = params[i];
    params[i] = orig + h;
    const double fp = f();
    params[i] = orig - h;
    const double fm = f();
    params[i] = orig;
    out[i] = (fp - fm) / (2.0 * h);
  }
  return out;
}

// |a - n| / max(|a|, |n|, floor)
inline double rel_err(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline double max_rel_err(std::span<const double> analytic, std::span<const double> numeric, double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) worst = std::max(worst, rel_err(analytic[i], numeric[i], floor));
  return worst;
}

}  // namespace fdtest
