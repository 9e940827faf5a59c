#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <string>

#include "nlc/activation.hpp"
#include "nlc/dataset.hpp"
#include "nlc/error.hpp"
#include "nlc/network.hpp"
#include "nlc/tensor.hpp"

namespace nlc {

struct DepthRange {
  Index min = 3;
  Index max = 49;
};

/// Width whose parameter count is closest to `budget`; ties go to the smaller width.
inline Index solve_width(Index depth, Index budget, Index d_in, Index d_out) {
  if (depth < 2) throw ParameterError("solve_width: depth must be at least 2");
  if (budget < parameter_count(depth, 1, d_in, d_out))
    throw CapacityError("solve_width: budget below the width-1 network");
  // paramcount is increasing in w; bracket the crossing, then compare neighbours.
  Index lo = 1, hi = 2;
  while (parameter_count(depth, hi, d_in, d_out) < budget) {
    lo = hi;
    hi *= 2;
  }
  while (hi - lo > 1) {
    const Index mid = lo + (hi - lo) / 2;
    (parameter_count(depth, mid, d_in, d_out) < budget ? lo : hi) = mid;
  }
  const Index under = budget - parameter_count(depth, lo, d_in, d_out);
  const Index over = parameter_count(depth, hi, d_in, d_out) - budget;
  if (under <= 0) return lo;
  return over < under ? hi : lo;
}

struct ActivationCalibration {
  double debias = 0;
  double scale = 1;
};

/// debias = -E tau(ds+t) if requested, scale = (E (tau(ds+t)+debias)^2)^(-1/2), s ~ N(0,1).
inline ActivationCalibration calibrate_activation(ActivationBase base, double dilation, double shift, bool debias,
                                                  double period = 1.0) {
  ActivationConfig raw{base, dilation, shift, 0.0, 1.0, period};
  validate(raw);
  const auto m = gaussian_moments(raw);
  ActivationCalibration cal;
  cal.debias = debias ? -m.mean : 0.0;
  const double power = debias ? m.variance() : m.second;
  if (!(power > 1e-14 * std::max(m.second, 1e-300)))
    throw DegenerateError("calibrate_activation: activation is constant under N(0,1)");
  cal.scale = 1.0 / std::sqrt(power);
  return cal;
}

inline ActivationConfig calibrated_activation(ActivationBase base, double dilation = 1.0, double shift = 0.0,
                                              bool debias = false, double period = 1.0) {
  const auto cal = calibrate_activation(base, dilation, shift, debias, period);
  return ActivationConfig{base, dilation, shift, cal.debias, cal.scale, period};
}

/// Categorical probabilities of the random architecture distribution.
struct SamplerProbabilities {
  static constexpr std::array<double, 2> bias = {0.5, 0.5};               // zero, N(0, 0.05)
  static constexpr std::array<double, 3> multiplier = {0.5, 0.25, 0.25};  // 1, 0.9, 1.1
  static constexpr std::array<double, 3> normalization = {0.5, 0.25, 0.25};
  static constexpr std::array<double, 8> activation = {2, 2, 1, 1, 1, 2, 1, 1};  // / 11, kStudyActivations order
  static constexpr std::array<double, 3> dilation = {0.5, 0.25, 0.25};    // 1, 1.2, 0.8
  static constexpr std::array<double, 3> shift = {0.5, 0.25, 0.25};       // 0, 0.2, -0.2
  static constexpr std::array<double, 3> skip = {0.5, 0.25, 0.25};        // none, 1, uniform
};

inline constexpr double kBiasVariance = 0.05;

inline ArchitectureSpec sample_architecture(Rng& rng, Index budget, Index d_in, Index d_out,
                                            DepthRange range = {}) {
  using P = SamplerProbabilities;
  if (range.min < 3 || range.max < range.min) throw ParameterError("sample_architecture: invalid depth range");
  const Index lo = range.min % 2 ? range.min : range.min + 1;
  const Index hi = range.max % 2 ? range.max : range.max - 1;
  if (hi < lo) throw ParameterError("sample_architecture: depth range contains no odd depth");

  ArchitectureSpec spec;
  spec.seed = rng.seed();
  spec.budget = budget;
  spec.d_in = d_in;
  spec.d_out = d_out;
  spec.depth = lo + 2 * rng.index((hi - lo) / 2 + 1);

  const bool bias_on = rng.categorical(P::bias) == 1;
  static constexpr double kMultipliers[3] = {1.0, 0.9, 1.1};
  const double global = kMultipliers[rng.categorical(P::multiplier)];
  static constexpr Normalization kNorms[3] = {Normalization::none, Normalization::batchnorm, Normalization::layernorm};
  Normalization norm = kNorms[rng.categorical(P::normalization)];
  const ActivationBase base = kStudyActivations[rng.categorical(P::activation)];
  static constexpr double kDilations[3] = {1.0, 1.2, 0.8};
  static constexpr double kShifts[3] = {0.0, 0.2, -0.2};
  const double dilation = kDilations[rng.categorical(P::dilation)];
  const double shift = kShifts[rng.categorical(P::shift)];
  const bool debias = rng.uniform() < 0.5;
  const std::size_t skip_kind = rng.categorical(P::skip);
  const double uniform_strength = rng.uniform();
  const SkipStart start = rng.uniform() < 0.5 ? SkipStart::after_linear : SkipStart::after_normalization;
  const bool post_pick_batchnorm = rng.uniform() < 0.5;

  spec.skip.enabled = skip_kind != 0;
  spec.skip.strength = skip_kind == 0 ? 0.0 : (skip_kind == 1 ? 1.0 : uniform_strength);
  spec.skip.start = start;

  const bool unstable = base == ActivationBase::square || base == ActivationBase::odd_square || spec.skip.enabled;
  if (unstable && norm == Normalization::none)
    norm = post_pick_batchnorm ? Normalization::batchnorm : Normalization::layernorm;

  spec.width = solve_width(spec.depth, budget, d_in, d_out);
  if (spec.width < 1) throw CapacityError("sample_architecture: budget too small");
  const double achieved = static_cast<double>(parameter_count(spec.depth, spec.width, d_in, d_out));
  if (std::abs(achieved - static_cast<double>(budget)) > 0.05 * static_cast<double>(budget))
    throw CapacityError("sample_architecture: no width within 5% of the parameter budget at depth " +
                        std::to_string(spec.depth));

  const ActivationConfig act = calibrated_activation(base, dilation, shift, debias);
  const double weight_multiplier = (bias_on ? std::sqrt(0.95) : 1.0) * global;
  const double bias_variance = bias_on ? kBiasVariance * global * global : 0.0;
  for (Index i = 0; i < spec.depth; ++i) {
    LayerSpec l;
    l.fan_in = i == 0 ? d_in : spec.width;
    l.fan_out = i == spec.depth - 1 ? d_out : spec.width;
    if (i < spec.depth - 1) {
      l.normalization = norm;
      l.activation = act;
    }
    l.weight_multiplier = weight_multiplier;
    l.bias_variance = bias_variance;
    spec.layers.push_back(l);
  }
  validate(spec);
  return spec;
}

/// Draws parameters for `spec`. Every layer uses its own substream, so the result
/// depends only on (spec, rng seed).
inline Network instantiate(const ArchitectureSpec& spec, const Rng& rng) {
  Network net = make_network(spec);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    Rng wr = rng.substream("weights/" + std::to_string(i));
    net.weights[i] = orthogonal_submatrix_init(l.fan_out, l.fan_in, forward_gain(l.fan_out, l.fan_in) * l.weight_multiplier, wr);
    if (l.bias_variance > 0) {
      Rng br = rng.substream("biases/" + std::to_string(i));
      const double sd = std::sqrt(l.bias_variance);
      for (Index k = 0; k < l.fan_out; ++k) net.biases[i](k) = sd * br.normal();
    }
  }
  if (spec.skip.enabled) {
    Rng pr = rng.substream("skip_projection");
    const Index w = spec.layers.front().fan_out;
    net.skip_projection = orthogonal_submatrix_init(spec.d_out, w, forward_gain(spec.d_out, w), pr);
  }
  return net;
}

/// sqrt(E ||f(x)||^2 / d_out) over the given columns, evaluated batch-wise.
inline double output_scale(const Network& net, const Matrix& X, Index batch_size) {
  const bool coupled = net.spec.has_batchnorm();
  double total = 0;
  Index count = 0;
  for (auto [b, e] : batch_ranges(X.cols(), batch_size, coupled)) {
    const Matrix F = evaluate(net, X.middleCols(b, e - b));
    total += F.squaredNorm();
    count += e - b;
  }
  return std::sqrt(total / static_cast<double>(count) / static_cast<double>(net.d_out()));
}

/// Sets net.c_loss from the training split and returns it; c_loss stays fixed afterwards.
inline double calibrate_loss_scale(Network& net, const Dataset& data, Index batch_size = 250) {
  const double c = output_scale(net, data.columns(data.splits.train), batch_size);
  if (!(c > 0) || !std::isfinite(c)) throw DegenerateError("calibrate_loss_scale: network output is zero or non-finite");
  net.c_loss = c;
  return c;
}

}  // namespace nlc
