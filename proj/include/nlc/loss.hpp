#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "nlc/error.hpp"
#include "nlc/tensor.hpp"

namespace nlc {

struct LossResult {
  double loss = 0;  // batch mean
  Matrix grad;      // dLoss/dF
};

/// Mean softmax cross-entropy of the logits F / c_loss, times `multiplier`.
inline LossResult softmax_cross_entropy(const Matrix& F, std::span<const int> labels, double c_loss,
                                        double multiplier = 1.0) {
  if (static_cast<Index>(labels.size()) != F.cols()) throw DimensionError("softmax_cross_entropy: label count mismatch");
  if (!(c_loss > 0)) throw ParameterError("softmax_cross_entropy: c_loss must be positive");
  const Index k = F.rows(), B = F.cols();
  LossResult r;
  r.grad.resize(k, B);
  double total = 0;
  for (Index j = 0; j < B; ++j) {
    const int y = labels[static_cast<std::size_t>(j)];
    if (y < 0 || y >= k) throw DimensionError("softmax_cross_entropy: label out of range");
    const auto z = F.col(j) / c_loss;
    const double m = z.maxCoeff();
    double sum = 0;
    for (Index i = 0; i < k; ++i) {
      r.grad(i, j) = std::exp(z(i) - m);
      sum += r.grad(i, j);
    }
    total += std::log(sum) + m - z(y);
    r.grad.col(j) /= sum;
    r.grad(y, j) -= 1.0;
  }
  r.loss = multiplier * total / static_cast<double>(B);
  r.grad *= multiplier / (static_cast<double>(B) * c_loss);
  return r;
}

/// Fraction of columns whose argmax differs from the label.
inline double classification_error(const Matrix& F, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != F.cols() || F.cols() == 0)
    throw DimensionError("classification_error: label count mismatch");
  Index wrong = 0;
  for (Index j = 0; j < F.cols(); ++j) {
    Index arg;
    F.col(j).maxCoeff(&arg);
    if (arg != labels[static_cast<std::size_t>(j)]) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(F.cols());
}

}  // namespace nlc
