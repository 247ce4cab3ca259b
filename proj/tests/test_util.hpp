#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "efi/autograd.hpp"
#include "efi/tensor.hpp"

namespace efi::test {

template <typename S>
TensorT<S> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                         double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  TensorT<S> t(shape);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(dist(rng));
  return t;
}

struct GradCheckReport {
  double max_rel_err = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  int checked = 0;
};

// Central finite differences on sampled coordinates of `leaf`, against the
// analytic gradient of the scalar produced by `forward`. `forward` must
// rebuild the graph from current leaf values on every call. Per-coordinate
// errors are measured relative to max(|analytic|, |numeric|, 0.1 * overall
// gradient scale): coordinates far below the gradient scale sit inside the
// float rounding noise of the loss reduction and cannot carry a meaningful
// ratio, while any systematic backward bug still shows up on the dominant
// coordinates.
template <typename S>
GradCheckReport grad_check(const NodeRef<S>& leaf,
                           const std::function<NodeRef<S>()>& forward, double step,
                           int max_coords, std::mt19937_64& rng) {
  auto loss = forward();
  backward(loss);
  TensorT<S> analytic = leaf->grad;

  double scale = 0.0;
  for (std::int64_t i = 0; i < analytic.numel(); ++i) {
    scale = std::max(scale, std::abs(static_cast<double>(analytic[i])));
  }

  std::vector<std::int64_t> coords;
  const std::int64_t n = leaf->value.numel();
  if (n <= max_coords) {
    for (std::int64_t i = 0; i < n; ++i) coords.push_back(i);
  } else {
    std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
    for (int i = 0; i < max_coords; ++i) coords.push_back(pick(rng));
  }

  GradCheckReport report;
  for (std::int64_t c : coords) {
    const S saved = leaf->value[c];
    leaf->value[c] = saved + static_cast<S>(step);
    const double f_plus = static_cast<double>(forward()->value[0]);
    leaf->value[c] = saved - static_cast<S>(step);
    const double f_minus = static_cast<double>(forward()->value[0]);
    leaf->value[c] = saved;

    const double numeric = (f_plus - f_minus) / (2.0 * step);
    const double a = static_cast<double>(analytic[c]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 0.1 * scale});
    if (denom == 0.0) continue;
    const double rel = std::abs(a - numeric) / denom;
    ++report.checked;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
  }
  return report;
}

}  // namespace efi::test
