#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nlc/activation.hpp"
#include "nlc/error.hpp"
#include "nlc/tensor.hpp"

namespace nlc {

enum class Normalization { none, batchnorm, layernorm };
enum class SkipStart { after_linear, after_normalization };

inline std::string to_string(Normalization n) {
  switch (n) {
    case Normalization::none: return "none";
    case Normalization::batchnorm: return "batchnorm";
    case Normalization::layernorm: return "layernorm";
  }
  return "?";
}

inline Normalization parse_normalization(std::string_view s) {
  if (s == "none") return Normalization::none;
  if (s == "batchnorm") return Normalization::batchnorm;
  if (s == "layernorm") return Normalization::layernorm;
  throw ConfigError("unknown normalization '" + std::string(s) + "'");
}

inline std::string to_string(SkipStart s) {
  return s == SkipStart::after_linear ? "after_linear" : "after_normalization";
}

inline SkipStart parse_skip_start(std::string_view s) {
  if (s == "after_linear") return SkipStart::after_linear;
  if (s == "after_normalization") return SkipStart::after_normalization;
  throw ConfigError("unknown skip start '" + std::string(s) + "'");
}

struct LayerSpec {
  Index fan_in = 0;
  Index fan_out = 0;
  Normalization normalization = Normalization::none;
  std::optional<ActivationConfig> activation;  // absent on the last layer
  double weight_multiplier = 1.0;
  double bias_variance = 0.0;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Skip k adds strength * (source of layer 2k) to the linear output of layer 2k+2
/// (0-based). The skip into the last layer goes through a fixed projection.
struct SkipConfig {
  bool enabled = false;
  double strength = 0.0;
  SkipStart start = SkipStart::after_linear;

  friend bool operator==(const SkipConfig&, const SkipConfig&) = default;
};

struct ArchitectureSpec {
  Index depth = 0;
  Index width = 0;
  Index d_in = 0;
  Index d_out = 0;
  std::vector<LayerSpec> layers;
  SkipConfig skip;
  std::uint64_t seed = 0;
  Index budget = 0;

  bool has_batchnorm() const {
    for (const auto& l : layers)
      if (l.normalization == Normalization::batchnorm) return true;
    return false;
  }
  bool has_skip() const { return skip.enabled && skip.strength != 0.0; }

  friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) = default;
};

/// Weights plus biases of a fully-connected stack; skip projections are not trainable.
inline Index parameter_count(Index depth, Index width, Index d_in, Index d_out) {
  if (depth < 2) return d_in * d_out + d_out;
  return d_in * width + width + (depth - 2) * (width * width + width) + width * d_out + d_out;
}

inline void validate(const ArchitectureSpec& spec) {
  const auto L = static_cast<Index>(spec.layers.size());
  if (L < 1 || L != spec.depth) throw ConfigError("architecture: layer count does not match depth");
  if (spec.layers.front().fan_in != spec.d_in || spec.layers.back().fan_out != spec.d_out)
    throw ConfigError("architecture: input/output dimensions do not match layers");
  for (Index i = 0; i < L; ++i) {
    const auto& l = spec.layers[static_cast<std::size_t>(i)];
    if (l.fan_in < 1 || l.fan_out < 1) throw ConfigError("architecture: layer dimensions must be positive");
    if (i > 0 && l.fan_in != spec.layers[static_cast<std::size_t>(i - 1)].fan_out)
      throw ConfigError("architecture: consecutive layer dimensions do not chain");
    const bool last = i == L - 1;
    if (last && (l.activation || l.normalization != Normalization::none))
      throw ConfigError("architecture: the last layer is purely linear");
    if (!last && !l.activation) throw ConfigError("architecture: hidden layer without activation");
    if (l.activation) validate(*l.activation);
    if (!(l.weight_multiplier > 0) || l.bias_variance < 0) throw ConfigError("architecture: invalid init scales");
  }
  if (spec.skip.enabled) {
    if (spec.skip.strength < 0 || spec.skip.strength > 1) throw ConfigError("architecture: skip strength outside [0,1]");
    if (L < 3 || L % 2 == 0) throw ConfigError("architecture: skips need an odd depth of at least 3");
    for (Index i = 1; i < L - 1; ++i)
      if (spec.layers[static_cast<std::size_t>(i)].fan_out != spec.layers[0].fan_out)
        throw ConfigError("architecture: skips need uniform hidden width");
  }
}

/// Uniform-width stack: `depth` linear layers, hidden ones followed by `norm` and `act`.
inline ArchitectureSpec make_mlp_spec(Index d_in, Index width, Index d_out, Index depth, const ActivationConfig& act,
                                      Normalization norm = Normalization::none, double weight_multiplier = 1.0) {
  if (depth < 1) throw ConfigError("make_mlp_spec: depth must be at least 1");
  ArchitectureSpec spec;
  spec.depth = depth;
  spec.width = depth > 1 ? width : 0;
  spec.d_in = d_in;
  spec.d_out = d_out;
  for (Index i = 0; i < depth; ++i) {
    LayerSpec l;
    l.fan_in = i == 0 ? d_in : width;
    l.fan_out = i == depth - 1 ? d_out : width;
    if (i < depth - 1) {
      l.normalization = norm;
      l.activation = act;
    }
    l.weight_multiplier = weight_multiplier;
    spec.layers.push_back(l);
  }
  spec.budget = parameter_count(depth, width, d_in, d_out);
  return spec;
}

struct Network {
  ArchitectureSpec spec;
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
  Matrix skip_projection;  // d_out x width; empty unless skips are enabled
  double c_loss = 1.0;
  double norm_epsilon = 1e-16;

  Index depth() const { return static_cast<Index>(weights.size()); }
  Index d_in() const { return spec.d_in; }
  Index d_out() const { return spec.d_out; }

  Index parameter_count() const {
    Index n = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) n += weights[i].size() + biases[i].size();
    return n;
  }
};

/// Zero-parameter network with shapes taken from `spec`.
inline Network make_network(const ArchitectureSpec& spec) {
  validate(spec);
  Network net;
  net.spec = spec;
  for (const auto& l : spec.layers) {
    net.weights.push_back(Matrix::Zero(l.fan_out, l.fan_in));
    net.biases.push_back(Vector::Zero(l.fan_out));
  }
  if (spec.skip.enabled) net.skip_projection = Matrix::Zero(spec.d_out, spec.layers.front().fan_out);
  return net;
}

struct ForwardTrace {
  struct Layer {
    Matrix input;      // h_{i-1}
    Matrix pre;        // linear output plus incoming skip
    Matrix normed;     // normalization output (aliases pre when absent)
    Vector inv_std;    // per row (batchnorm) or per column (layernorm)
    Matrix output;     // h_i
  };
  std::vector<Layer> layers;
  Index batch = 0;

  const Matrix& output() const { return layers.back().output; }
};

struct ParamGradients {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
};

namespace detail {

inline bool skip_into(const Network& net, Index i) {
  return net.spec.has_skip() && i >= 2 && i % 2 == 0;
}

inline bool skip_from(const Network& net, Index i) {
  return net.spec.has_skip() && i % 2 == 0 && i + 2 < net.depth();
}

inline const Matrix& skip_source(const Network& net, const ForwardTrace::Layer& layer) {
  return net.spec.skip.start == SkipStart::after_linear ? layer.pre : layer.normed;
}

/// Normalizes rows (batchnorm) or columns (layernorm) to zero mean, unit population variance.
inline void normalize(Normalization kind, double eps, const Matrix& x, Matrix& y, Vector& inv_std) {
  if (kind == Normalization::batchnorm) {
    const auto n = static_cast<double>(x.cols());
    const Vector mean = x.rowwise().sum() / n;
    y = x.colwise() - mean;
    inv_std = ((y.array().square().rowwise().sum() / n) + eps).rsqrt().matrix();
    y = inv_std.asDiagonal() * y;
  } else {
    const auto n = static_cast<double>(x.rows());
    const Eigen::RowVectorXd mean = x.colwise().sum() / n;
    y = x.rowwise() - mean;
    inv_std = ((y.array().square().colwise().sum() / n) + eps).rsqrt().matrix().transpose();
    y = y * inv_std.asDiagonal();
  }
}

/// Exact reverse pass of `normalize`: r * (g - mean(g) - y * mean(g .* y)) along the
/// normalized axis. Holds for any epsilon because y already carries the factor r.
inline Matrix normalize_backward(Normalization kind, const Matrix& y, const Vector& inv_std, const Matrix& g) {
  if (kind == Normalization::batchnorm) {
    const auto n = static_cast<double>(g.cols());
    const Vector mg = g.rowwise().sum() / n;
    const Vector mgy = g.cwiseProduct(y).rowwise().sum() / n;
    Matrix d = g.colwise() - mg;
    d -= mgy.asDiagonal() * y;
    return inv_std.asDiagonal() * d;
  }
  const auto n = static_cast<double>(g.rows());
  const Eigen::RowVectorXd mg = g.colwise().sum() / n;
  const Eigen::RowVectorXd mgy = g.cwiseProduct(y).colwise().sum() / n;
  Matrix d = g.rowwise() - mg;
  d -= y * mgy.asDiagonal();
  return d * inv_std.asDiagonal();
}

}  // namespace detail

/// Evaluates the network on a batch (one example per column). Batchnorm couples
/// the columns through batch statistics; everything else acts per column.
inline ForwardTrace forward(const Network& net, const Matrix& X) {
  const Index L = net.depth();
  if (L < 1) throw ConsistencyError("forward: network has no layers");
  if (X.rows() != net.d_in()) throw DimensionError("forward: input has wrong dimension");
  if (X.cols() < 1) throw DimensionError("forward: empty batch");
  if (net.spec.has_batchnorm() && X.cols() < 2) throw BatchSizeError("forward: batchnorm needs a batch of at least 2");
  if (!X.allFinite()) throw ParameterError("forward: input contains non-finite entries");

  ForwardTrace t;
  t.batch = X.cols();
  t.layers.resize(static_cast<std::size_t>(L));
  for (Index i = 0; i < L; ++i) {
    auto& cur = t.layers[static_cast<std::size_t>(i)];
    const auto& spec = net.spec.layers[static_cast<std::size_t>(i)];
    cur.input = i == 0 ? X : t.layers[static_cast<std::size_t>(i - 1)].output;
    cur.pre.noalias() = net.weights[static_cast<std::size_t>(i)] * cur.input;
    cur.pre.colwise() += net.biases[static_cast<std::size_t>(i)];
    if (detail::skip_into(net, i)) {
      const Matrix& src = detail::skip_source(net, t.layers[static_cast<std::size_t>(i - 2)]);
      if (i == L - 1)
        cur.pre.noalias() += net.spec.skip.strength * (net.skip_projection * src);
      else
        cur.pre += net.spec.skip.strength * src;
    }
    if (spec.normalization != Normalization::none)
      detail::normalize(spec.normalization, net.norm_epsilon, cur.pre, cur.normed, cur.inv_std);
    else
      cur.normed = cur.pre;
    if (spec.activation)
      apply_activation(*spec.activation, cur.normed, cur.output);
    else
      cur.output = cur.normed;
    if (!cur.output.allFinite()) throw OverflowError(static_cast<std::size_t>(i), "forward pass");
  }
  return t;
}

inline Matrix evaluate(const Network& net, const Matrix& X) { return std::move(forward(net, X).layers.back().output); }

/// Reverse pass: returns dL/dX for upstream gradient dF = dL/dF and, if requested,
/// the parameter gradients.
inline Matrix backward(const Network& net, const ForwardTrace& t, const Matrix& dF, ParamGradients* grads = nullptr) {
  const Index L = net.depth();
  if (static_cast<Index>(t.layers.size()) != L) throw ConsistencyError("backward: trace does not belong to network");
  for (Index i = 0; i < L; ++i) {
    const auto& layer = t.layers[static_cast<std::size_t>(i)];
    if (layer.pre.rows() != net.weights[static_cast<std::size_t>(i)].rows() || layer.pre.cols() != t.batch)
      throw ConsistencyError("backward: trace does not belong to network");
  }
  if (dF.rows() != net.d_out() || dF.cols() != t.batch) throw DimensionError("backward: gradient has wrong shape");
  if (grads) {
    grads->weights.resize(static_cast<std::size_t>(L));
    grads->biases.resize(static_cast<std::size_t>(L));
  }

  std::vector<Matrix> skip_grad(static_cast<std::size_t>(L));  // dL/d(skip source of layer i)
  Matrix gh = dF;  // dL/dh_i
  for (Index i = L - 1; i >= 0; --i) {
    const auto& layer = t.layers[static_cast<std::size_t>(i)];
    const auto& spec = net.spec.layers[static_cast<std::size_t>(i)];
    Matrix gz;
    if (spec.activation) {
      Matrix da;
      apply_activation_grad(*spec.activation, layer.normed, da);
      gz = gh.cwiseProduct(da);
    } else {
      gz = std::move(gh);
    }
    const bool has_norm = spec.normalization != Normalization::none;
    const bool feeds_skip = detail::skip_from(net, i);
    if (feeds_skip && has_norm && net.spec.skip.start == SkipStart::after_normalization)
      gz += skip_grad[static_cast<std::size_t>(i)];
    Matrix gpre = has_norm ? detail::normalize_backward(spec.normalization, layer.normed, layer.inv_std, gz) : std::move(gz);
    if (feeds_skip && !(has_norm && net.spec.skip.start == SkipStart::after_normalization))
      gpre += skip_grad[static_cast<std::size_t>(i)];
    if (detail::skip_into(net, i)) {
      const double s = net.spec.skip.strength;
      skip_grad[static_cast<std::size_t>(i - 2)] =
          i == L - 1 ? Matrix(s * (net.skip_projection.transpose() * gpre)) : Matrix(s * gpre);
    }
    if (grads) {
      grads->weights[static_cast<std::size_t>(i)].noalias() = gpre * layer.input.transpose();
      grads->biases[static_cast<std::size_t>(i)] = gpre.rowwise().sum();
    }
    gh.noalias() = net.weights[static_cast<std::size_t>(i)].transpose() * gpre;
  }
  return gh;
}

/// V contracted with the batch Jacobian of the forward pass recorded in `t`.
inline Matrix vjp(const Network& net, const ForwardTrace& t, const Matrix& V) { return backward(net, t, V); }

/// Full batch Jacobian: entry (k*d_out + j, l*d_in + i) = dF_{jk} / dX_{il}. Oracle use only.
inline Matrix exact_jacobian(const Network& net, const Matrix& X, Index max_entries = 1'000'000) {
  const Index B = X.cols(), dout = net.d_out(), din = net.d_in();
  if (B * dout * B * din > max_entries) throw CapacityError("exact_jacobian: tensor exceeds size guard");
  const ForwardTrace t = forward(net, X);
  Matrix J(B * dout, B * din);
  Matrix V = Matrix::Zero(dout, B);
  for (Index k = 0; k < B; ++k)
    for (Index j = 0; j < dout; ++j) {
      V(j, k) = 1.0;
      const Matrix G = vjp(net, t, V);
      V(j, k) = 0.0;
      for (Index l = 0; l < B; ++l) J.block(k * dout + j, l * din, 1, din) = G.col(l).transpose();
    }
  return J;
}

}  // namespace nlc
