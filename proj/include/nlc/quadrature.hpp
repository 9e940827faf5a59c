#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>

namespace nlc {

/// Integration range for expectations under N(0,1). The Gaussian mass beyond it
/// is ~1e-32, so polynomially growing integrands are unaffected at double precision.
inline constexpr double kGaussianSupport = 12.0;

inline double standard_normal_pdf(double s) {
  return std::exp(-0.5 * s * s) * (0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
}

/// E_{s~N(0,1)}[fn(s)] by 20-point Gauss-Legendre on panels of width <= 0.5.
/// Panels are split at every breakpoint so that integrands with kinks or jumps
/// (relu, sawtooth, their derivatives) are integrated exactly piece by piece.
template <typename Fn>
double gaussian_expectation(Fn&& fn, std::span<const double> breakpoints = {}) {
  constexpr double kPanel = 0.5;
  std::vector<double> cuts;
  const int n_uniform = static_cast<int>(2 * kGaussianSupport / kPanel);
  cuts.reserve(static_cast<std::size_t>(n_uniform) + 1 + breakpoints.size());
  for (int i = 0; i <= n_uniform; ++i) cuts.push_back(-kGaussianSupport + kPanel * i);
  for (double b : breakpoints)
    if (b > -kGaussianSupport && b < kGaussianSupport) cuts.push_back(b);
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

  using Rule = boost::math::quadrature::gauss<double, 20>;
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    const double a = cuts[i], b = cuts[i + 1];
    if (!(b > a)) continue;
    total += Rule::integrate([&](double s) { return fn(s) * standard_normal_pdf(s); }, a, b);
  }
  return total;
}

}  // namespace nlc
