#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "nlc/error.hpp"
#include "nlc/quadrature.hpp"
#include "nlc/tensor.hpp"

namespace nlc {

enum class ActivationBase {
  relu,
  selu,
  tanh,
  sigmoid,
  even_tanh,
  gaussian,
  square,
  odd_square,
  sawtooth,
  identity,
};

inline constexpr std::array<ActivationBase, 8> kStudyActivations = {
    ActivationBase::relu,      ActivationBase::selu,     ActivationBase::tanh,   ActivationBase::sigmoid,
    ActivationBase::even_tanh, ActivationBase::gaussian, ActivationBase::square, ActivationBase::odd_square,
};

inline std::string to_string(ActivationBase b) {
  switch (b) {
    case ActivationBase::relu: return "relu";
    case ActivationBase::selu: return "selu";
    case ActivationBase::tanh: return "tanh";
    case ActivationBase::sigmoid: return "sigmoid";
    case ActivationBase::even_tanh: return "even_tanh";
    case ActivationBase::gaussian: return "gaussian";
    case ActivationBase::square: return "square";
    case ActivationBase::odd_square: return "odd_square";
    case ActivationBase::sawtooth: return "sawtooth";
    case ActivationBase::identity: return "identity";
  }
  return "?";
}

inline ActivationBase parse_activation(std::string_view name) {
  for (auto b : {ActivationBase::relu, ActivationBase::selu, ActivationBase::tanh, ActivationBase::sigmoid,
                 ActivationBase::even_tanh, ActivationBase::gaussian, ActivationBase::square,
                 ActivationBase::odd_square, ActivationBase::sawtooth, ActivationBase::identity})
    if (to_string(b) == name) return b;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

/// The applied nonlinearity is scale * (tau(dilation * s + shift) + debias).
struct ActivationConfig {
  ActivationBase base = ActivationBase::identity;
  double dilation = 1.0;
  double shift = 0.0;
  double debias = 0.0;
  double scale = 1.0;
  double period = 1.0;  // sawtooth only

  friend bool operator==(const ActivationConfig&, const ActivationConfig&) = default;
};

inline void validate(const ActivationConfig& cfg) {
  if (!(cfg.dilation > 0) || !(cfg.scale > 0)) throw ParameterError("activation dilation and scale must be positive");
  if (cfg.base == ActivationBase::sawtooth && !(cfg.period > 0))
    throw ParameterError("sawtooth period must be positive");
}

namespace detail {

inline constexpr double kSeluSlope = 1.0507;
inline constexpr double kSeluSaturation = 1.75814;

inline double sigmoid(double u) {
  if (u >= 0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

inline double sawtooth_phase(double u, double p) { return u / p - std::floor(u / p); }

}  // namespace detail

inline double raw_activation(ActivationBase base, double u, double period = 1.0) {
  switch (base) {
    case ActivationBase::relu: return u > 0 ? u : 0.0;
    case ActivationBase::selu: return u > 0 ? detail::kSeluSlope * u : detail::kSeluSaturation * std::expm1(u);
    case ActivationBase::tanh: return std::tanh(u);
    case ActivationBase::sigmoid: return detail::sigmoid(u);
    case ActivationBase::even_tanh: return std::tanh(std::abs(u));
    case ActivationBase::gaussian: return standard_normal_pdf(u);
    case ActivationBase::square: return u * u;
    case ActivationBase::odd_square: return u * std::abs(u);
    case ActivationBase::sawtooth: {
      const double f = detail::sawtooth_phase(u, period);
      if (f < 0.25) return period * f;
      if (f > 0.75) return period * (f - 1.0);
      return period * (0.5 - f);
    }
    case ActivationBase::identity: return u;
  }
  return u;
}

/// Derivative of the raw nonlinearity; the right derivative at kinks.
inline double raw_derivative(ActivationBase base, double u, double period = 1.0) {
  switch (base) {
    case ActivationBase::relu: return u >= 0 ? 1.0 : 0.0;
    case ActivationBase::selu: return u >= 0 ? detail::kSeluSlope : detail::kSeluSaturation * std::exp(u);
    case ActivationBase::tanh: {
      const double t = std::tanh(u);
      return 1.0 - t * t;
    }
    case ActivationBase::sigmoid: {
      const double s = detail::sigmoid(u);
      return s * (1.0 - s);
    }
    case ActivationBase::even_tanh: {
      const double t = std::tanh(std::abs(u));
      return (u >= 0 ? 1.0 : -1.0) * (1.0 - t * t);
    }
    case ActivationBase::gaussian: return -u * standard_normal_pdf(u);
    case ActivationBase::square: return 2.0 * u;
    case ActivationBase::odd_square: return 2.0 * std::abs(u);
    case ActivationBase::sawtooth: {
      const double f = detail::sawtooth_phase(u, period);
      return (f >= 0.25 && f < 0.75) ? -1.0 : 1.0;
    }
    case ActivationBase::identity: return 1.0;
  }
  return 1.0;
}

inline double activation_eval(const ActivationConfig& cfg, double s) {
  return cfg.scale * (raw_activation(cfg.base, cfg.dilation * s + cfg.shift, cfg.period) + cfg.debias);
}

inline double activation_grad(const ActivationConfig& cfg, double s) {
  return cfg.scale * cfg.dilation * raw_derivative(cfg.base, cfg.dilation * s + cfg.shift, cfg.period);
}

/// Elementwise application over a whole batch. The switch sits outside the loop.
inline void apply_activation(const ActivationConfig& cfg, const Matrix& in, Matrix& out) {
  out.resize(in.rows(), in.cols());
  const double d = cfg.dilation, t = cfg.shift, b = cfg.debias, c = cfg.scale, p = cfg.period;
  auto run = [&](auto tau) {
    const double* src = in.data();
    double* dst = out.data();
    for (Index i = 0, n = in.size(); i < n; ++i) dst[i] = c * (tau(d * src[i] + t) + b);
  };
  switch (cfg.base) {
    case ActivationBase::relu: run([](double u) { return u > 0 ? u : 0.0; }); break;
    case ActivationBase::tanh: run([](double u) { return std::tanh(u); }); break;
    case ActivationBase::identity: run([](double u) { return u; }); break;
    default: run([&](double u) { return raw_activation(cfg.base, u, p); }); break;
  }
}

inline void apply_activation_grad(const ActivationConfig& cfg, const Matrix& in, Matrix& out) {
  out.resize(in.rows(), in.cols());
  const double d = cfg.dilation, t = cfg.shift, cd = cfg.scale * cfg.dilation, p = cfg.period;
  auto run = [&](auto dtau) {
    const double* src = in.data();
    double* dst = out.data();
    for (Index i = 0, n = in.size(); i < n; ++i) dst[i] = cd * dtau(d * src[i] + t);
  };
  switch (cfg.base) {
    case ActivationBase::relu: run([](double u) { return u >= 0 ? 1.0 : 0.0; }); break;
    case ActivationBase::identity: run([](double) { return 1.0; }); break;
    default: run([&](double u) { return raw_derivative(cfg.base, u, p); }); break;
  }
}

/// Points (in the pre-dilation coordinate s) where the activation or its derivative
/// is not smooth, restricted to |s| < bound.
inline std::vector<double> activation_kinks(const ActivationConfig& cfg, double bound = kGaussianSupport) {
  std::vector<double> raw;
  switch (cfg.base) {
    case ActivationBase::relu:
    case ActivationBase::selu:
    case ActivationBase::even_tanh:
    case ActivationBase::odd_square: raw.push_back(0.0); break;
    case ActivationBase::sawtooth: {
      const double p = cfg.period;
      const double reach = cfg.dilation * bound + std::abs(cfg.shift);
      const auto m_max = static_cast<long long>(std::ceil(reach / p)) + 1;
      for (long long m = -m_max; m <= m_max; ++m) {
        raw.push_back(p * (static_cast<double>(m) + 0.25));
        raw.push_back(p * (static_cast<double>(m) + 0.75));
      }
      break;
    }
    default: break;
  }
  std::vector<double> s;
  for (double u : raw) {
    const double x = (u - cfg.shift) / cfg.dilation;
    if (std::abs(x) < bound) s.push_back(x);
  }
  return s;
}

/// Moments of g(s) = activation(s) under s ~ N(0,1).
struct GaussianMoments {
  double mean = 0;         // E g
  double second = 0;       // E g^2
  double grad_second = 0;  // E g'^2
  double slope = 0;        // E s g(s), i.e. Cov(g(s), s)
  double variance() const { return second - mean * mean; }
};

inline GaussianMoments gaussian_moments(const ActivationConfig& cfg) {
  validate(cfg);
  const auto kinks = activation_kinks(cfg);
  GaussianMoments m;
  m.mean = gaussian_expectation([&](double s) { return activation_eval(cfg, s); }, kinks);
  m.second = gaussian_expectation(
      [&](double s) {
        const double g = activation_eval(cfg, s);
        return g * g;
      },
      kinks);
  m.grad_second = gaussian_expectation(
      [&](double s) {
        const double g = activation_grad(cfg, s);
        return g * g;
      },
      kinks);
  m.slope = gaussian_expectation([&](double s) { return s * activation_eval(cfg, s); }, kinks);
  return m;
}

/// Per-activation nonlinearity sqrt(E g'^2 / Var g) under unit Gaussian input.
inline double nlc_tau(const ActivationConfig& cfg) {
  const auto m = gaussian_moments(cfg);
  const double var = m.variance();
  if (!(var > 1e-14 * std::max(m.second, 1e-300)))
    throw DegenerateError("nlc_tau: activation has zero variance under N(0,1)");
  return std::sqrt(m.grad_second / var);
}

/// Relative power of the residual after the best affine fit under N(0,1):
/// E(g - fit)^2 / E fit^2 with fit(s) = E g + Cov(g, s) s.
inline double linear_approx_error(const ActivationConfig& cfg) {
  const auto m = gaussian_moments(cfg);
  const double fit_power = m.mean * m.mean + m.slope * m.slope;
  if (!(fit_power > 0)) throw DegenerateError("linear_approx_error: best affine fit is identically zero");
  const double residual = std::max(0.0, m.variance() - m.slope * m.slope);
  return residual / fit_power;
}

}  // namespace nlc
