#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "nlc/tensor.hpp"

namespace nlc {

/// Output bias of the scalar stream `bias + z` evaluated entirely in type T,
/// by the two-pass (mean first) and the one-pass (E f^2 - mean^2) forms.
struct ReducedBias {
  double two_pass;
  double one_pass;
};

template <typename T>
ReducedBias reduced_precision_bias(const std::vector<double>& z, double bias) {
  const auto n = static_cast<T>(z.size());
  std::vector<T> f(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) f[i] = static_cast<T>(bias) + static_cast<T>(z[i]);
  T sum = 0, sq = 0;
  for (T v : f) {
    sum += v;
    sq += v * v;
  }
  const T mean = sum / n, second = sq / n;
  T centered = 0;
  for (T v : f) centered += (v - mean) * (v - mean);
  centered /= n;
  const T one_var = second - mean * mean;
  const auto ratio = [&](T var) {
    return var > 0 ? std::sqrt(static_cast<double>(second) / static_cast<double>(var))
                   : std::numeric_limits<double>::infinity();
  };
  return {ratio(centered), ratio(one_var)};
}

struct PrecisionRow {
  int bits;  // mantissa bits of the arithmetic
  double bias;
  double reference;  // 64-bit two-pass value
  double two_pass_rel_error;
  double one_pass_rel_error;
};

/// Sweeps biases 2^0 .. 2^max_log2 in 32- and 64-bit arithmetic. The one-pass form
/// breaks down near 2^(b/2), the two-pass form near 2^b.
inline std::vector<PrecisionRow> precision_sweep(Index n, int max_log2, Rng& rng) {
  std::vector<double> z(static_cast<std::size_t>(n));
  for (auto& v : z) v = rng.normal();
  std::vector<PrecisionRow> rows;
  for (int k = 0; k <= max_log2; k += 2) {
    const double bias = std::ldexp(1.0, k);
    const double ref = reduced_precision_bias<long double>(z, bias).two_pass;
    const auto rel = [&](double v) { return std::abs(v - ref) / ref; };
    const auto f = reduced_precision_bias<float>(z, bias);
    rows.push_back({std::numeric_limits<float>::digits, bias, ref, rel(f.two_pass), rel(f.one_pass)});
    const auto d = reduced_precision_bias<double>(z, bias);
    rows.push_back({std::numeric_limits<double>::digits, bias, ref, rel(d.two_pass), rel(d.one_pass)});
  }
  return rows;
}

}  // namespace nlc
