#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "nlc/dataset.hpp"
#include "nlc/error.hpp"
#include "nlc/metrics.hpp"
#include "nlc/network.hpp"
#include "nlc/sampler.hpp"
#include "nlc/trainer.hpp"

namespace nlc {

enum class Scenario { input_scale, loss_scale, duplication, input_bias, relu_depth, sawtooth_period };

inline std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::input_scale: return "input_scale";
    case Scenario::loss_scale: return "loss_scale";
    case Scenario::duplication: return "duplication";
    case Scenario::input_bias: return "input_bias";
    case Scenario::relu_depth: return "relu_depth";
    case Scenario::sawtooth_period: return "sawtooth_period";
  }
  return "?";
}

inline Scenario parse_scenario(std::string_view s) {
  for (auto v : {Scenario::input_scale, Scenario::loss_scale, Scenario::duplication, Scenario::input_bias,
                 Scenario::relu_depth, Scenario::sawtooth_period})
    if (to_string(v) == s) return v;
  // Single-letter aliases follow the panel order A-F.
  if (s.size() == 1 && s[0] >= 'A' && s[0] <= 'F') return static_cast<Scenario>(s[0] - 'A');
  throw ConfigError("unknown confounder scenario '" + std::string(s) + "'");
}

inline std::vector<double> default_grid(Scenario s) {
  switch (s) {
    case Scenario::input_scale:
    case Scenario::loss_scale: return {0.01, 0.1, 1, 10, 100};
    case Scenario::duplication: return {1, 2, 4, 8};
    case Scenario::input_bias: return {0, 1, 10, 100};
    case Scenario::relu_depth: return {2, 5, 10, 20, 30};
    case Scenario::sawtooth_period: return {4, 2, 1, 0.5, 0.25};
  }
  return {};
}

inline constexpr double kHeGain = 1.4142135623730951;

/// Orthogonally initialized stack with the He factor sqrt(2) on every weight matrix,
/// zero biases and unit loss scale.
inline Network he_network(Index d_in, Index width, Index d_out, Index depth, const ActivationConfig& act,
                          Normalization norm, const Rng& rng, double gain = kHeGain) {
  return instantiate(make_mlp_spec(d_in, width, d_out, depth, act, norm, gain), rng);
}

/// The template of the invariance scenarios: 5-layer batchnorm-relu, width 100.
inline Network confounder_template(Index d_in, Index d_out, const Rng& rng, Index width = 100, Index depth = 5) {
  return he_network(d_in, width, d_out, depth, ActivationConfig{ActivationBase::relu}, Normalization::batchnorm, rng);
}

namespace detail {

inline Dataset with_inputs(const Dataset& d, Matrix inputs) {
  Dataset out = d;
  out.inputs = std::move(inputs);
  out.stats = input_stats(out);
  return out;
}

/// cd x d matrix with orthonormal columns whose c-fold block sum is the identity:
/// M = D / c + sqrt(1 - 1/c) Q with D the stacked identities and Q orthonormal, Q^T D = 0.
inline Matrix duplication_embedding(Index d, Index c, Rng& rng) {
  Matrix D(c * d, d);
  for (Index k = 0; k < c; ++k) D.block(k * d, 0, d, d).setIdentity();
  if (c == 1) return D;
  Matrix basis(c * d, 2 * d);
  basis.leftCols(d) = D / std::sqrt(static_cast<double>(c));
  basis.rightCols(d) = gaussian_matrix(c * d, d, rng);
  Eigen::HouseholderQR<Matrix> qr(basis);
  const Matrix q = qr.householderQ() * Matrix::Identity(c * d, 2 * d);
  const Matrix Q = q.rightCols(d);
  return D / static_cast<double>(c) + std::sqrt(1.0 - 1.0 / static_cast<double>(c)) * Q;
}

inline bool batchnorm_first(const Network& net) {
  return net.depth() >= 2 && net.spec.layers.front().normalization == Normalization::batchnorm;
}

}  // namespace detail

/// Input dimensions each repeated c times (block layout [x; x; ...]).
inline Matrix duplicate_dimensions(const Matrix& x, Index c) {
  Matrix out(x.rows() * c, x.cols());
  for (Index k = 0; k < c; ++k) out.middleRows(k * x.rows(), x.rows()) = x;
  return out;
}

struct ConfounderOptions {
  EstimatorConfig estimator;
  std::uint64_t seed = 0;
  std::optional<double> train_lr;  // when set, each grid point is also trained from this rate
  TrainConfig train;
  Index width = 100;
};

struct ConfounderRow {
  double c = 0;
  MetricReport report;
  std::optional<double> test_error;
};

/// One network/dataset/loss variant of a scenario at grid value c, with the
/// learning-rate compensation that keeps the training trajectory comparable.
struct ConfounderCase {
  Network net;
  Dataset data;
  double loss_multiplier = 1.0;
  double lr_multiplier = 1.0;
  std::vector<double> layer_lr_scale;
};

inline ConfounderCase confounder_case(Scenario s, const Network& tmpl, const Dataset& data, double c,
                                      const ConfounderOptions& opt) {
  ConfounderCase k{tmpl, data, 1.0, 1.0, {}};
  const Rng rng = Rng(opt.seed).substream(to_string(s));
  switch (s) {
    case Scenario::input_scale:
      if (!detail::batchnorm_first(tmpl)) throw ConfigError("input_scale needs a batchnorm-first network");
      if (!(c > 0)) throw ConfigError("input_scale needs positive grid values");
      k.data = detail::with_inputs(data, c * data.inputs);
      break;
    case Scenario::loss_scale:
      if (!(c > 0)) throw ConfigError("loss_scale needs positive grid values");
      k.loss_multiplier = c;
      k.lr_multiplier = 1.0 / c;
      break;
    case Scenario::duplication: {
      const auto reps = static_cast<Index>(std::llround(c));
      if (reps < 1 || std::abs(c - static_cast<double>(reps)) > 1e-12)
        throw ConfigError("duplication needs positive integer grid values");
      Rng er = rng.substream(static_cast<std::uint64_t>(reps));
      const Matrix M = detail::duplication_embedding(data.d_in(), reps, er);
      k.data = detail::with_inputs(data, duplicate_dimensions(data.inputs, reps));
      auto spec = tmpl.spec;
      spec.d_in = data.d_in() * reps;
      spec.layers.front().fan_in = spec.d_in;
      k.net = make_network(spec);
      k.net.weights = tmpl.weights;
      k.net.biases = tmpl.biases;
      k.net.skip_projection = tmpl.skip_projection;
      k.net.c_loss = tmpl.c_loss;
      k.net.norm_epsilon = tmpl.norm_epsilon;
      k.net.weights.front() = tmpl.weights.front() * M.transpose();
      k.layer_lr_scale.assign(tmpl.weights.size(), 1.0);
      k.layer_lr_scale.front() = 1.0 / static_cast<double>(reps);
      break;
    }
    case Scenario::input_bias:
      if (!detail::batchnorm_first(tmpl)) throw ConfigError("input_bias needs a batchnorm-first network");
      k.data = detail::with_inputs(data, data.inputs.array() + c);
      k.layer_lr_scale.assign(tmpl.weights.size(), 1.0);
      k.layer_lr_scale.front() = 0.0;
      break;
    case Scenario::relu_depth: {
      const auto depth = static_cast<Index>(std::llround(c));
      if (depth < 1) throw ConfigError("relu_depth needs positive integer depths");
      k.net = he_network(data.d_in(), opt.width, tmpl.d_out(), depth, ActivationConfig{ActivationBase::relu},
                         Normalization::none, rng.substream(static_cast<std::uint64_t>(depth)));
      break;
    }
    case Scenario::sawtooth_period: {
      if (!(c > 0)) throw ConfigError("sawtooth_period needs positive periods");
      const ActivationConfig saw{ActivationBase::sawtooth, 1, 0, 0, 1, c};
      k.net = he_network(data.d_in(), opt.width, tmpl.d_out(), 2, saw, Normalization::none, rng.substream("sawtooth"),
                         1.0);
      break;
    }
  }
  return k;
}

/// Metrics (and optionally the trained test error) of every grid variant of a scenario.
inline std::vector<ConfounderRow> confounder_suite(Scenario s, const Network& tmpl, const Dataset& data,
                                                   const std::vector<double>& grid, const ConfounderOptions& opt = {}) {
  if (tmpl.d_in() != data.d_in()) throw ConfigError("confounder_suite: template does not match the dataset");
  std::vector<ConfounderRow> rows;
  for (double c : grid) {
    auto k = confounder_case(s, tmpl, data, c, opt);
    ConfounderRow row;
    row.c = c;
    MeasureOptions mo;
    mo.loss_multiplier = k.loss_multiplier;
    row.report = measure(k.net, k.data, opt.estimator, mo);
    if (opt.train_lr) {
      TrainConfig tc = opt.train;
      tc.loss_multiplier = k.loss_multiplier;
      if (!k.layer_lr_scale.empty()) tc.layer_lr_scale = k.layer_lr_scale;
      row.test_error = train_run(k.net, k.data, *opt.train_lr * k.lr_multiplier, tc).test_error;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace nlc
