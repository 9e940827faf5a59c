#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "nlc/dataset.hpp"
#include "nlc/error.hpp"
#include "nlc/loss.hpp"
#include "nlc/metrics.hpp"
#include "nlc/network.hpp"

namespace nlc {

enum class Optimizer { sgd, adam };
enum class StopCriterion { validation_error, training_error };

struct TrainConfig {
  Optimizer optimizer = Optimizer::sgd;
  Index n_runs = 40;
  double lr_spacing = 3.0;
  double decay_factor = 3.0;
  Index decay_count = 10;
  Index patience_initial = 10;
  Index patience_after_decay = 5;
  StopCriterion criterion = StopCriterion::validation_error;
  double smallest_lr_epsilon = 1e-8;
  Index batch_size = 250;
  Index max_epochs_per_stage = 500;
  Index adam_warmup_epochs = 4;
  std::uint64_t shuffle_seed = 0;
  std::vector<double> layer_lr_scale;  // per layer; empty means 1 everywhere
  double loss_multiplier = 1.0;
};

inline void validate(const TrainConfig& c) {
  if (!(c.lr_spacing > 1) || !(c.decay_factor > 1)) throw ConfigError("train config: spacing and decay must exceed 1");
  if (c.patience_initial < 1 || c.patience_after_decay < 1) throw ConfigError("train config: patience must be >= 1");
  if (c.n_runs < 1 || c.batch_size < 1 || c.max_epochs_per_stage < 1) throw ConfigError("train config: counts must be positive");
  if (!(c.smallest_lr_epsilon > 0)) throw ConfigError("train config: smallest-lr epsilon must be positive");
  for (double s : c.layer_lr_scale)
    if (s < 0) throw ConfigError("train config: negative layer learning-rate scale");
}

/// First/second-moment Adam state with conventional constants.
struct AdamState {
  static constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<Matrix> mW, vW;
  std::vector<Vector> mb, vb;
  long long t = 0;

  static AdamState zeros(const Network& net) {
    AdamState s;
    for (std::size_t i = 0; i < net.weights.size(); ++i) {
      s.mW.push_back(Matrix::Zero(net.weights[i].rows(), net.weights[i].cols()));
      s.vW.push_back(s.mW.back());
      s.mb.push_back(Vector::Zero(net.biases[i].size()));
      s.vb.push_back(s.mb.back());
    }
    return s;
  }
};

/// Advances the moment estimates and returns the bias-corrected step directions
/// (the update at learning rate 1).
inline ParamGradients adam_direction(AdamState& s, const ParamGradients& g) {
  ++s.t;
  const double c1 = 1.0 - std::pow(AdamState::beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(AdamState::beta2, static_cast<double>(s.t));
  ParamGradients d;
  auto step = [&](auto& m, auto& v, const auto& grad) {
    m = AdamState::beta1 * m + (1 - AdamState::beta1) * grad;
    v = AdamState::beta2 * v + (1 - AdamState::beta2) * grad.cwiseProduct(grad);
    return ((m.array() / c1) / ((v.array() / c2).sqrt() + AdamState::eps)).matrix().eval();
  };
  for (std::size_t i = 0; i < g.weights.size(); ++i) {
    d.weights.push_back(step(s.mW[i], s.vW[i], g.weights[i]));
    d.biases.push_back(step(s.mb[i], s.vb[i], g.biases[i]));
  }
  return d;
}

/// One Adam update in place.
inline void adam_step(Network& net, AdamState& s, const ParamGradients& g, double lr,
                      std::span<const double> layer_scale = {}) {
  const auto d = adam_direction(s, g);
  for (std::size_t i = 0; i < d.weights.size(); ++i) {
    const double r = lr * (layer_scale.empty() ? 1.0 : layer_scale[i]);
    net.weights[i] -= r * d.weights[i];
    net.biases[i] -= r * d.biases[i];
  }
}

inline void sgd_step(Network& net, const ParamGradients& g, double lr, std::span<const double> layer_scale = {}) {
  for (std::size_t i = 0; i < g.weights.size(); ++i) {
    const double r = lr * (layer_scale.empty() ? 1.0 : layer_scale[i]);
    net.weights[i] -= r * g.weights[i];
    net.biases[i] -= r * g.biases[i];
  }
}

/// Classification error and mean loss on a split, evaluated in fixed batch order.
struct SplitEval {
  double error = 0;
  double loss = 0;
};

inline SplitEval evaluate_split(const Network& net, const Dataset& data, std::span<const Index> idx, Index B) {
  if (idx.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  const bool coupled = net.spec.has_batchnorm();
  const Index step = coupled ? B : std::max<Index>(B, static_cast<Index>(idx.size()));
  double wrong = 0, loss = 0;
  Index count = 0;
  for (auto [b, e] : batch_ranges(static_cast<Index>(idx.size()), step, coupled)) {
    const auto part = idx.subspan(static_cast<std::size_t>(b), static_cast<std::size_t>(e - b));
    Matrix F;
    try {
      F = evaluate(net, data.columns(part));
    } catch (const OverflowError&) {
      return {1.0, std::numeric_limits<double>::infinity()};
    }
    const auto y = data.labels_of(part);
    wrong += classification_error(F, y) * static_cast<double>(e - b);
    loss += softmax_cross_entropy(F, y, net.c_loss).loss * static_cast<double>(e - b);
    count += e - b;
  }
  return {wrong / static_cast<double>(count), loss / static_cast<double>(count)};
}

namespace detail {

inline std::vector<std::pair<Index, Index>> epoch_batches(const Network& net, Index n, Index B) {
  return batch_ranges(n, B, net.spec.has_batchnorm());
}

inline std::vector<Index> shuffled(const std::vector<Index>& pool, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<Index> order = pool;
  Rng rng = Rng(seed).substream(epoch);
  std::shuffle(order.begin(), order.end(), rng.engine());
  return order;
}

inline bool finite_params(const Network& net) {
  for (std::size_t i = 0; i < net.weights.size(); ++i)
    if (!net.weights[i].allFinite() || !net.biases[i].allFinite()) return false;
  return true;
}

/// Gradients of the (scaled) batch loss; returns false on a non-finite loss.
inline bool batch_gradients(const Network& net, const Dataset& data, std::span<const Index> idx, double multiplier,
                            ParamGradients& g, double& loss) {
  ForwardTrace t;
  try {
    t = forward(net, data.columns(idx));
  } catch (const OverflowError&) {
    return false;
  }
  const auto r = softmax_cross_entropy(t.output(), data.labels_of(idx), net.c_loss, multiplier);
  loss = r.loss;
  if (!std::isfinite(r.loss)) return false;
  backward(net, t, r.grad, &g);
  return true;
}

}  // namespace detail

/// epsilon * sum_l sqrt(E_b ||dW_lb||_F^2) / ||W_l||_F, where dW_lb is the update the
/// optimizer would make at learning rate 1 on batch b of one epoch. Updates are not applied.
/// For Adam the running averages are first warmed up for `adam_warmup_epochs`; the
/// warmed state is returned through `adam_out` when given.
inline double smallest_lr(const Network& net, const Dataset& data, double epsilon, const TrainConfig& cfg,
                          AdamState* adam_out = nullptr) {
  if (!(epsilon > 0)) throw ParameterError("smallest_lr: epsilon must be positive");
  const auto& pool = data.splits.train;
  AdamState adam = AdamState::zeros(net);
  const Index warm = cfg.optimizer == Optimizer::adam ? cfg.adam_warmup_epochs : 0;
  std::vector<double> sq(net.weights.size(), 0.0);
  Index batches = 0;
  for (Index epoch = 0; epoch <= warm; ++epoch) {
    const auto order = detail::shuffled(pool, cfg.shuffle_seed ^ 0x5eedull, static_cast<std::uint64_t>(epoch));
    for (auto [b, e] : detail::epoch_batches(net, static_cast<Index>(order.size()), cfg.batch_size)) {
      const std::span<const Index> idx(order.data() + b, static_cast<std::size_t>(e - b));
      ParamGradients g;
      double loss = 0;
      if (!detail::batch_gradients(net, data, idx, cfg.loss_multiplier, g, loss))
        throw DegenerateError("smallest_lr: non-finite loss at initialization");
      ParamGradients d = cfg.optimizer == Optimizer::adam ? adam_direction(adam, g) : std::move(g);
      if (epoch < warm) continue;
      for (std::size_t l = 0; l < sq.size(); ++l) sq[l] += d.weights[l].squaredNorm();
      ++batches;
    }
  }
  if (batches == 0) throw DegenerateError("smallest_lr: no training batches");
  double sum = 0;
  bool any = false;
  for (std::size_t l = 0; l < sq.size(); ++l) {
    const double wn = net.weights[l].norm();
    if (!(wn > 0)) throw DegenerateError("smallest_lr: zero weight matrix");
    if (sq[l] > 0) any = true;
    sum += std::sqrt(sq[l] / static_cast<double>(batches)) / wn;
  }
  if (!any) throw DegenerateError("smallest_lr: all gradients are zero");
  if (adam_out) *adam_out = adam;
  return epsilon * sum;
}

struct EpochRecord {
  Index stage = 0;
  double lr = 0;
  double train_loss = 0;  // mean minibatch loss during the epoch
  double train_error = 0;
  double val_error = 0;
  bool diverged = false;
};

struct RunRecord {
  double lr0 = 0;
  std::vector<EpochRecord> curve;
  double best_criterion = std::numeric_limits<double>::infinity();
  double best_loss = std::numeric_limits<double>::infinity();  // tie-break, on the criterion split
  double train_error = 0, val_error = 0, test_error = 0;       // at the final snapshot
  bool diverged = false;        // the starting learning rate produced a non-finite loss
  Index divergence_events = 0;  // over all stages
  Network snapshot;
};

struct TrainResult {
  double smallest_lr = 0;
  std::vector<RunRecord> runs;
  Index selected = -1;
  double selected_lr = 0;

  const RunRecord& best() const { return runs.at(static_cast<std::size_t>(selected)); }
};

namespace detail {

inline const std::vector<Index>& criterion_split(const Dataset& d, StopCriterion c) {
  return c == StopCriterion::validation_error ? d.splits.val : d.splits.train;
}

}  // namespace detail

/// Trains from `net` at lr0 until the criterion stalls for the stage patience, rewinds to
/// the best state, divides the learning rate by the decay factor, and repeats
/// `decay_count` times; the run ends on the best state seen.
inline RunRecord train_run(const Network& initial, const Dataset& data, double lr0, const TrainConfig& cfg,
                           const AdamState* adam_init = nullptr) {
  validate(cfg);
  if (!(lr0 > 0) || !std::isfinite(lr0)) throw ParameterError("train_run: starting learning rate must be positive");
  if (!cfg.layer_lr_scale.empty() && cfg.layer_lr_scale.size() != initial.weights.size())
    throw ConfigError("train_run: layer_lr_scale must have one entry per layer");

  const auto& crit_idx = detail::criterion_split(data, cfg.criterion);
  const Index B = cfg.batch_size;
  RunRecord rec;
  rec.lr0 = lr0;

  Network net = initial;
  AdamState adam = adam_init ? *adam_init : AdamState::zeros(net);
  Network best_net = net;
  AdamState best_adam = adam;
  {
    const auto e = evaluate_split(net, data, crit_idx, B);
    rec.best_criterion = e.error;
    rec.best_loss = e.loss;
  }

  std::uint64_t epoch_counter = 0;
  double lr = lr0;
  for (Index stage = 0; stage <= cfg.decay_count; ++stage) {
    const Index patience = stage == 0 ? cfg.patience_initial : cfg.patience_after_decay;
    Index stale = 0;
    for (Index epoch = 0; epoch < cfg.max_epochs_per_stage && stale < patience; ++epoch) {
      EpochRecord er;
      er.stage = stage;
      er.lr = lr;
      const auto order = detail::shuffled(data.splits.train, cfg.shuffle_seed, epoch_counter++);
      double loss_sum = 0;
      Index loss_n = 0;
      for (auto [b, e] : detail::epoch_batches(net, static_cast<Index>(order.size()), B)) {
        const std::span<const Index> idx(order.data() + b, static_cast<std::size_t>(e - b));
        ParamGradients g;
        double loss = 0;
        if (!detail::batch_gradients(net, data, idx, cfg.loss_multiplier, g, loss)) {
          er.diverged = true;
          break;
        }
        loss_sum += loss * static_cast<double>(e - b);
        loss_n += e - b;
        if (cfg.optimizer == Optimizer::adam)
          adam_step(net, adam, g, lr, cfg.layer_lr_scale);
        else
          sgd_step(net, g, lr, cfg.layer_lr_scale);
        if (!detail::finite_params(net)) {
          er.diverged = true;
          break;
        }
      }
      er.train_loss = loss_n ? loss_sum / static_cast<double>(loss_n) : std::numeric_limits<double>::quiet_NaN();
      if (er.diverged) {
        rec.curve.push_back(er);
        ++rec.divergence_events;
        if (stage == 0 && epoch == 0) rec.diverged = true;
        break;
      }
      const auto tr = evaluate_split(net, data, data.splits.train, B);
      er.train_error = tr.error;
      er.val_error = evaluate_split(net, data, data.splits.val, B).error;
      rec.curve.push_back(er);
      const auto crit = cfg.criterion == StopCriterion::validation_error ? evaluate_split(net, data, crit_idx, B) : tr;
      if (crit.error < rec.best_criterion || (crit.error == rec.best_criterion && crit.loss < rec.best_loss)) {
        if (crit.error < rec.best_criterion) stale = 0;
        else ++stale;
        rec.best_criterion = crit.error;
        rec.best_loss = crit.loss;
        best_net = net;
        best_adam = adam;
      } else {
        ++stale;
      }
    }
    net = best_net;
    adam = best_adam;
    lr /= cfg.decay_factor;
  }

  rec.train_error = evaluate_split(net, data, data.splits.train, B).error;
  rec.val_error = evaluate_split(net, data, data.splits.val, B).error;
  rec.test_error = evaluate_split(net, data, data.splits.test, B).error;
  rec.snapshot = std::move(net);
  return rec;
}

/// Runs the starting-learning-rate grid smallest_lr * spacing^k and selects the run
/// with the best stopping criterion (ties: lower loss on the same split, then smaller k).
inline TrainResult lr_search(const Network& net, const Dataset& data, const TrainConfig& cfg) {
  validate(cfg);
  TrainResult res;
  AdamState adam;
  res.smallest_lr = smallest_lr(net, data, cfg.smallest_lr_epsilon, cfg, &adam);
  for (Index k = 0; k < cfg.n_runs; ++k) {
    const double lr0 = res.smallest_lr * std::pow(cfg.lr_spacing, static_cast<double>(k));
    res.runs.push_back(train_run(net, data, lr0, cfg, cfg.optimizer == Optimizer::adam ? &adam : nullptr));
  }
  bool any = false;
  for (std::size_t k = 0; k < res.runs.size(); ++k) {
    const auto& r = res.runs[k];
    if (r.diverged) continue;
    if (!any || r.best_criterion < res.runs[static_cast<std::size_t>(res.selected)].best_criterion ||
        (r.best_criterion == res.runs[static_cast<std::size_t>(res.selected)].best_criterion &&
         r.best_loss < res.runs[static_cast<std::size_t>(res.selected)].best_loss)) {
      res.selected = static_cast<Index>(k);
      any = true;
    }
  }
  if (!any) throw Error("lr_search: every run diverged at its starting learning rate");
  res.selected_lr = res.runs[static_cast<std::size_t>(res.selected)].lr0;
  return res;
}

/// Expected error of a uniform random guess over k balanced classes.
inline double random_error(int n_classes) { return 1.0 - 1.0 / static_cast<double>(n_classes); }

}  // namespace nlc
