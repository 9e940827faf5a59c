#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "nlc/dataset.hpp"
#include "nlc/error.hpp"
#include "nlc/loss.hpp"
#include "nlc/network.hpp"
#include "nlc/tensor.hpp"

namespace nlc {

enum class Split { train, val, test };

inline const std::vector<Index>& split_indices(const Dataset& d, Split s) {
  switch (s) {
    case Split::train: return d.splits.train;
    case Split::val: return d.splits.val;
    case Split::test: return d.splits.test;
  }
  return d.splits.train;
}

struct EstimatorConfig {
  Index batch_size = 250;
  Index batches = 20;
  std::uint64_t seed = 0;
  Split split = Split::train;
};

struct NonlinearityProbeConfig {
  double tolerance = 2.0;
  double c_start = 1e-9;
  double spacing = 1.2589254117941673;  // 10^(1/10)
  double c_cap = 1.0;
  double g_floor = 1e-12;  // relative to ||V|| ||U||
  Index batches = 10;
  Index u_draws = 10;
  Index v_draws = 10;
};

struct MetricReport {
  double nlc = 0;
  double output_bias = 0;
  double gvcs = 0;
  double gvl = 0;
  double input_correlation = 0;
  double output_correlation = 0;
  std::optional<double> nonlinearity_median;
  std::optional<double> perturbation_radius;
};

namespace detail {

/// Neumaier-compensated vector sum; keeps the mean exact to rounding even when
/// the stream carries a bias many orders of magnitude above its spread.
struct CompensatedSum {
  Vector sum, comp;
  explicit CompensatedSum(Index d) : sum(Vector::Zero(d)), comp(Vector::Zero(d)) {}
  template <typename Derived>
  void add(const Eigen::MatrixBase<Derived>& v) {
    for (Index i = 0; i < sum.size(); ++i) {
      const double x = v(i), t = sum(i) + x;
      comp(i) += std::abs(sum(i)) >= std::abs(x) ? (sum(i) - t) + x : (x - t) + sum(i);
      sum(i) = t;
    }
  }
  Vector value() const { return sum + comp; }
};

inline std::vector<Index> draw_batch(std::span<const Index> pool, Index B, Rng& rng) {
  return rng.sample_without_replacement(pool, std::min<Index>(B, static_cast<Index>(pool.size())));
}

}  // namespace detail

/// Two-pass population moments of the columns of F: exact mean first, then centered
/// squares with a first-order correction for any residual mean error.
struct OutputMoments {
  Vector mean;
  double second_moment = 0;  // E ||f||^2
  double trace_cov = 0;      // E ||f - mean||^2
};

inline OutputMoments output_moments(const Matrix& F) {
  if (F.cols() < 2) throw StatisticsError("output_moments: need at least two outputs");
  const auto n = static_cast<double>(F.cols());
  detail::CompensatedSum s(F.rows());
  for (Index j = 0; j < F.cols(); ++j) s.add(F.col(j));
  OutputMoments m;
  m.mean = s.value() / n;
  Vector resid = Vector::Zero(F.rows());
  double centered = 0;
  for (Index j = 0; j < F.cols(); ++j) {
    const Vector c = F.col(j) - m.mean;
    resid += c;
    centered += c.squaredNorm();
  }
  m.trace_cov = std::max(0.0, (centered - resid.squaredNorm() / n) / n);
  m.second_moment = m.trace_cov + m.mean.squaredNorm();
  return m;
}

/// sqrt(E||f||^2 / E||f - fbar||^2) from a matrix of outputs.
inline double output_bias_of(const Matrix& F) {
  const auto m = output_moments(F);
  if (!(m.trace_cov > 0)) throw InfiniteBiasError("output bias: network output is constant");
  const double ob = std::sqrt(m.second_moment / m.trace_cov);
  if (!(ob >= 1.0 - 1e-12)) throw ConsistencyError("output bias below 1");
  return std::max(1.0, ob);
}

/// The same quantity with the cancelling single-pass variance. Kept only to show where it breaks.
inline double one_pass_output_bias(const Matrix& F) {
  const auto n = static_cast<double>(F.cols());
  Vector sum = Vector::Zero(F.rows());
  double squares = 0;
  for (Index j = 0; j < F.cols(); ++j) {
    sum += F.col(j);
    squares += F.col(j).squaredNorm();
  }
  const double second = squares / n;
  const double trace = second - (sum / n).squaredNorm();
  return trace > 0 ? std::sqrt(second / trace) : std::numeric_limits<double>::infinity();
}

/// Outputs for a split, evaluated batch-wise in a random partition (which matters
/// only when batchnorm couples the columns). `cols` maps output columns to dataset rows.
struct OutputPass {
  Matrix F;
  std::vector<Index> cols;
};

inline OutputPass batched_outputs(const Network& net, const Dataset& data, std::span<const Index> pool, Index B,
                                  Rng rng) {
  std::vector<Index> order(pool.begin(), pool.end());
  if (net.spec.has_batchnorm()) std::shuffle(order.begin(), order.end(), rng.engine());
  OutputPass out;
  const auto ranges = batch_ranges(static_cast<Index>(order.size()), B, net.spec.has_batchnorm());
  const Index n = ranges.empty() ? 0 : ranges.back().second;
  out.F.resize(net.d_out(), n);
  out.cols.assign(order.begin(), order.begin() + n);
  for (auto [b, e] : ranges) {
    const std::span<const Index> idx(out.cols.data() + b, static_cast<std::size_t>(e - b));
    out.F.middleCols(b, e - b) = evaluate(net, data.columns(idx));
  }
  return out;
}

inline double output_bias(const Network& net, const Dataset& data, const EstimatorConfig& cfg = {}) {
  const auto pass = batched_outputs(net, data, split_indices(data, cfg.split), cfg.batch_size,
                                    Rng(cfg.seed).substream("partition"));
  return output_bias_of(pass.F);
}

/// E_{X,X',U} of the squared per-column inner products (U^T J(X))_l . (x'_l - xbar):
/// a forward pass, one vjp with a clamped Gaussian U, and fresh inputs X'.
inline double nlc_numerator(const Network& net, const Dataset& data, const EstimatorConfig& cfg) {
  const auto& pool = split_indices(data, cfg.split);
  Rng rng = Rng(cfg.seed).substream("nlc_numerator");
  double total = 0;
  Index count = 0;
  for (Index b = 0; b < cfg.batches; ++b) {
    const auto xi = detail::draw_batch(pool, cfg.batch_size, rng);
    const auto xpi = detail::draw_batch(pool, static_cast<Index>(xi.size()), rng);
    const Matrix X = data.columns(xi);
    Matrix D = data.columns(xpi);
    D.colwise() -= data.stats.mean;
    const auto trace = forward(net, X);
    const Matrix U = gaussian_matrix(net.d_out(), X.cols(), rng);
    const Matrix G = vjp(net, trace, U);
    total += G.cwiseProduct(D).colwise().sum().array().square().sum();
    count += X.cols();
  }
  return total / static_cast<double>(count);
}

inline double nlc(const Network& net, const Dataset& data, const EstimatorConfig& cfg = {}) {
  const auto pass = batched_outputs(net, data, split_indices(data, cfg.split), cfg.batch_size,
                                    Rng(cfg.seed).substream("partition"));
  const auto m = output_moments(pass.F);
  if (!(m.trace_cov > 0)) throw DegenerateError("nlc: network output is constant");
  return std::sqrt(nlc_numerator(net, data, cfg) / m.trace_cov);
}

/// Per-column input gradients of the summed loss over a split, batch-wise.
inline Matrix input_gradients(const Network& net, const Dataset& data, const EstimatorConfig& cfg,
                              double loss_multiplier = 1.0) {
  const auto& pool = split_indices(data, cfg.split);
  std::vector<Index> order(pool.begin(), pool.end());
  Rng rng = Rng(cfg.seed).substream("partition");
  if (net.spec.has_batchnorm()) std::shuffle(order.begin(), order.end(), rng.engine());
  const auto ranges = batch_ranges(static_cast<Index>(order.size()), cfg.batch_size, net.spec.has_batchnorm());
  Matrix G(net.d_in(), ranges.empty() ? 0 : ranges.back().second);
  for (auto [b, e] : ranges) {
    const std::span<const Index> idx(order.data() + b, static_cast<std::size_t>(e - b));
    const auto trace = forward(net, data.columns(idx));
    const auto labels = data.labels_of(idx);
    // Scaling the mean-loss gradient by B gives the gradient of the per-example sum.
    auto loss = softmax_cross_entropy(trace.output(), labels, net.c_loss, loss_multiplier * static_cast<double>(e - b));
    G.middleCols(b, e - b) = backward(net, trace, loss.grad);
  }
  return G;
}

/// sqrt(E ||dl/dx||^2 / d_in).
inline double gvcs(const Network& net, const Dataset& data, const EstimatorConfig& cfg = {}, double loss_multiplier = 1.0) {
  const Matrix G = input_gradients(net, data, cfg, loss_multiplier);
  return std::sqrt(G.squaredNorm() / static_cast<double>(G.cols()) / static_cast<double>(net.d_in()));
}

/// sqrt(E ||dl/dx||^2).
inline double gvl(const Network& net, const Dataset& data, const EstimatorConfig& cfg = {}, double loss_multiplier = 1.0) {
  const Matrix G = input_gradients(net, data, cfg, loss_multiplier);
  return std::sqrt(G.squaredNorm() / static_cast<double>(G.cols()));
}

/// Quadratic mean of squared centered cosine similarity over sampled column pairs.
inline double centered_correlation(const Matrix& Z, const Vector& center, Index pairs, Rng& rng) {
  if (Z.cols() < 2) throw StatisticsError("correlation: need at least two vectors");
  double total = 0;
  Index used = 0;
  for (Index p = 0; p < pairs; ++p) {
    const Index a = rng.index(Z.cols());
    Index b = rng.index(Z.cols() - 1);
    if (b >= a) ++b;
    const Vector u = Z.col(a) - center, v = Z.col(b) - center;
    const double nu = u.squaredNorm(), nv = v.squaredNorm();
    if (!(nu > 0) || !(nv > 0)) continue;
    const double dot = u.dot(v);
    total += dot * dot / (nu * nv);
    ++used;
  }
  if (used == 0) throw DegenerateError("correlation: all sampled vectors coincide with the mean");
  return std::sqrt(total / static_cast<double>(used));
}

struct Correlations {
  double input = 0;
  double output = 0;
};

inline Correlations io_correlation(const Network& net, const Dataset& data, const EstimatorConfig& cfg = {},
                                   Index pairs = 10'000) {
  const auto& pool = split_indices(data, cfg.split);
  Rng rng = Rng(cfg.seed).substream("correlation");
  Correlations c;
  // Inputs are measured about the origin, the mean of preprocessed data, so an added
  // constant vector shows up as correlation.
  const Matrix X = data.columns(pool);
  c.input = centered_correlation(X, Vector::Zero(X.rows()), pairs, rng);
  const auto pass = batched_outputs(net, data, pool, cfg.batch_size, Rng(cfg.seed).substream("partition"));
  const auto m = output_moments(pass.F);
  c.output = centered_correlation(pass.F, m.mean, pairs, rng);
  return c;
}

/// Probe step sizes c_start * spacing^k, k = 0, 1, ..., up to and including the cap.
inline std::vector<double> probe_grid(const NonlinearityProbeConfig& p) {
  if (!(p.tolerance > 1) || !(p.spacing > 1) || !(p.c_start > 0) || !(p.c_cap >= p.c_start))
    throw ParameterError("probe configuration: need tolerance > 1, spacing > 1, 0 < c_start <= c_cap");
  std::vector<double> g;
  for (int k = 0;; ++k) {
    const double c = p.c_start * std::pow(p.spacing, k);
    if (c > p.c_cap * (1 + 1e-9)) break;
    g.push_back(std::min(c, p.c_cap));
  }
  return g;
}

struct NonlinearitySamples {
  std::vector<double> C;
  Index discarded = 0;   // |V^T J U| below the floor
  Index floor_hits = 0;  // failed already at c_start
  double median = 0;
};

/// Samples of the nonlinearity distribution at batch level. For each (X, U, V) the
/// step c grows geometrically while the finite difference V.(f(X+cU)-f(X)) stays
/// within a factor T of c V^T J(X) U; the sample is 1 / (last passing c).
inline NonlinearitySamples nonlinearity_samples(const Network& net, const Dataset& data,
                                                const NonlinearityProbeConfig& probe, const EstimatorConfig& cfg = {}) {
  const auto grid = probe_grid(probe);
  const auto& pool = split_indices(data, cfg.split);
  Rng rng = Rng(cfg.seed).substream("nonlinearity");
  NonlinearitySamples out;
  for (Index b = 0; b < probe.batches; ++b) {
    const Matrix X = data.columns(detail::draw_batch(pool, cfg.batch_size, rng));
    const auto trace = forward(net, X);
    const Matrix& F0 = trace.output();
    std::vector<Matrix> Vs, Gs;
    for (Index v = 0; v < probe.v_draws; ++v) {
      Vs.push_back(gaussian_matrix(net.d_out(), X.cols(), rng));
      Gs.push_back(vjp(net, trace, Vs.back()));
    }
    for (Index u = 0; u < probe.u_draws; ++u) {
      const Matrix U = data.stats.factor * gaussian_matrix(net.d_in(), X.cols(), rng);
      const double un = U.norm();
      std::vector<double> g(Vs.size());
      std::vector<int> last(Vs.size(), -1);
      std::vector<bool> active(Vs.size(), true);
      std::size_t n_active = 0;
      for (std::size_t v = 0; v < Vs.size(); ++v) {
        g[v] = Gs[v].cwiseProduct(U).sum();
        if (std::abs(g[v]) < probe.g_floor * Vs[v].norm() * un) {
          active[v] = false;
          ++out.discarded;
        } else {
          ++n_active;
        }
      }
      for (std::size_t k = 0; k < grid.size() && n_active > 0; ++k) {
        const double c = grid[k];
        const Matrix delta = evaluate(net, X + c * U) - F0;
        for (std::size_t v = 0; v < Vs.size(); ++v) {
          if (!active[v]) continue;
          const double ratio = Vs[v].cwiseProduct(delta).sum() / (c * g[v]);
          if (ratio >= 1.0 / probe.tolerance && ratio <= probe.tolerance) {
            last[v] = static_cast<int>(k);
          } else {
            active[v] = false;
            --n_active;
          }
        }
      }
      for (std::size_t v = 0; v < Vs.size(); ++v) {
        if (std::abs(g[v]) < probe.g_floor * Vs[v].norm() * un) continue;
        if (last[v] < 0) {
          ++out.floor_hits;
          out.C.push_back(1.0 / probe.c_start);
        } else {
          out.C.push_back(std::max(1.0, 1.0 / grid[static_cast<std::size_t>(last[v])]));
        }
      }
    }
  }
  if (out.C.empty()) throw DegenerateError("nonlinearity_samples: every sample was discarded");
  out.median = median(out.C);
  return out;
}

/// Largest probe step c for which the fraction of columns misclassified anywhere on the
/// path X -> X + cU stays within `threshold` of the error at X; median over draws.
inline double error_preserving_perturbation(const Network& net, const Dataset& data, double threshold,
                                            const NonlinearityProbeConfig& probe, EstimatorConfig cfg) {
  const auto grid = probe_grid(probe);
  const auto& pool = split_indices(data, cfg.split);
  Rng rng = Rng(cfg.seed).substream("perturbation");
  std::vector<double> radii;
  auto wrong = [&](const Matrix& F, const std::vector<int>& y, std::vector<char>& flag) {
    for (Index j = 0; j < F.cols(); ++j) {
      Index arg;
      F.col(j).maxCoeff(&arg);
      if (arg != y[static_cast<std::size_t>(j)]) flag[static_cast<std::size_t>(j)] = 1;
    }
  };
  for (Index b = 0; b < probe.batches; ++b) {
    const auto idx = detail::draw_batch(pool, cfg.batch_size, rng);
    const Matrix X = data.columns(idx);
    const auto y = data.labels_of(idx);
    std::vector<char> base(idx.size(), 0);
    wrong(evaluate(net, X), y, base);
    const auto n = static_cast<double>(idx.size());
    const double e0 = static_cast<double>(std::count(base.begin(), base.end(), 1)) / n;
    for (Index u = 0; u < probe.u_draws; ++u) {
      const Matrix U = data.stats.factor * gaussian_matrix(net.d_in(), X.cols(), rng);
      std::vector<char> path = base;
      double radius = probe.c_start / probe.spacing;
      for (double c : grid) {
        wrong(evaluate(net, X + c * U), y, path);
        const double e = static_cast<double>(std::count(path.begin(), path.end(), 1)) / n;
        if (e > e0 + threshold + 1e-12) break;
        radius = c;
      }
      radii.push_back(radius);
    }
  }
  return median(radii);
}

struct MeasureOptions {
  bool nonlinearity = false;
  bool perturbation = false;
  double perturbation_threshold = 0.05;
  NonlinearityProbeConfig probe;
  double loss_multiplier = 1.0;
};

inline MetricReport measure(const Network& net, const Dataset& data, const EstimatorConfig& cfg = {},
                            const MeasureOptions& opt = {}) {
  MetricReport r;
  r.nlc = nlc(net, data, cfg);
  r.output_bias = output_bias(net, data, cfg);
  const Matrix G = input_gradients(net, data, cfg, opt.loss_multiplier);
  const double mean_sq = G.squaredNorm() / static_cast<double>(G.cols());
  r.gvl = std::sqrt(mean_sq);
  r.gvcs = std::sqrt(mean_sq / static_cast<double>(net.d_in()));
  const auto corr = io_correlation(net, data, cfg);
  r.input_correlation = corr.input;
  r.output_correlation = corr.output;
  if (opt.nonlinearity) r.nonlinearity_median = nonlinearity_samples(net, data, opt.probe, cfg).median;
  if (opt.perturbation) {
    EstimatorConfig test_cfg = cfg;
    test_cfg.split = Split::test;
    r.perturbation_radius = error_preserving_perturbation(net, data, opt.perturbation_threshold, opt.probe, test_cfg);
  }
  return r;
}

}  // namespace nlc
