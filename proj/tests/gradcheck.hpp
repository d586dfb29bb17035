#pragma once

// Central finite-difference checker for scalar functions of leaf tensors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "ecer/rng.hpp"
#include "ecer/tensor.hpp"

namespace ecer::testing {

struct GradCheckResult {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double max_rel = 0.0;
  double pass_fraction() const { return checked ? static_cast<double>(passed) / static_cast<double>(checked) : 0.0; }
};

/// |a − n| / max(|a|, |n|, floor). Below `floor` both values are treated as
/// zero-ish and the difference is compared absolutely.
inline double relative_error(double analytic, double numeric, double floor = 1e-7) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Samples `samples` distinct coordinates across `params` and compares the
/// backward-pass gradient of `f` against (f(x+h) − f(x−h)) / 2h.
inline GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                  std::size_t samples, std::uint64_t seed, double h = 1e-5, double tol = 1e-4) {
  for (auto& p : params) p.zero_grad();
  f().backward();
  std::vector<std::vector<double>> analytic;
  std::size_t total = 0;
  for (auto& p : params) {
    const auto g = p.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(p.numel(), 0.0);
    total += p.numel();
  }
  std::vector<std::size_t> coords(total);
  std::iota(coords.begin(), coords.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span(coords));
  coords.resize(std::min(samples, total));

  GradCheckResult r;
  NoGradGuard ng;
  for (std::size_t flat : coords) {
    std::size_t pi = 0;
    while (flat >= params[pi].numel()) flat -= params[pi++].numel();
    auto data = params[pi].mutable_data();
    const double x0 = data[flat];
    data[flat] = x0 + h;
    const double fp = f().item();
    data[flat] = x0 - h;
    const double fm = f().item();
    data[flat] = x0;
    const double numeric = (fp - fm) / (2.0 * h);
    const double rel = relative_error(analytic[pi][flat], numeric);
    r.max_rel = std::max(r.max_rel, rel);
    ++r.checked;
    r.passed += rel < tol;
  }
  return r;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace ecer::testing
