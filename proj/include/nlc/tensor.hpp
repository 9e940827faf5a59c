#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "nlc/error.hpp"

namespace nlc {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Dense 64-bit matrix. Batches are stored one example per column.
using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* what) {
  if (!m.allFinite()) throw ParameterError(std::string(what) + " contains non-finite entries");
}

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

/// Deterministic random source. A given seed always yields the same stream, and
/// independent substreams are derived from (seed, key) without consuming state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(detail::splitmix64(seed)) {}

  std::uint64_t seed() const noexcept { return seed_; }

  Rng substream(std::uint64_t key) const {
    return Rng(detail::splitmix64(seed_ ^ detail::splitmix64(key + 0x632BE59BD9B4E019ull)));
  }
  Rng substream(std::string_view key) const { return substream(detail::fnv1a(key)); }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }

  /// Uniform integer in [0, n).
  Index index(Index n) {
    return static_cast<Index>(std::uniform_int_distribution<std::uint64_t>(0, static_cast<std::uint64_t>(n - 1))(engine_));
  }

  /// Draws an index with probability proportional to `weights`.
  std::size_t categorical(std::span<const double> weights) {
    double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    double u = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (u < weights[i]) return i;
      u -= weights[i];
    }
    return weights.size() - 1;
  }

  std::vector<Index> permutation(Index n) {
    std::vector<Index> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), Index{0});
    std::shuffle(p.begin(), p.end(), engine_);
    return p;
  }

  /// k distinct elements of `pool`, in random order.
  std::vector<Index> sample_without_replacement(std::span<const Index> pool, Index k) {
    if (k > static_cast<Index>(pool.size())) throw DimensionError("sample larger than pool");
    std::vector<Index> v(pool.begin(), pool.end());
    for (Index i = 0; i < k; ++i) {
      Index j = i + index(static_cast<Index>(v.size()) - i);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
    v.resize(static_cast<std::size_t>(k));
    return v;
  }

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

inline Matrix gaussian_matrix(Index rows, Index cols, Rng& rng) {
  if (rows < 1 || cols < 1) throw DimensionError("gaussian_matrix: dimensions must be positive");
  Matrix m(rows, cols);
  // Column-major fill order is part of the reproducibility contract.
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = rng.normal();
  return m;
}

/// Haar-distributed n x n orthogonal matrix: QR of a Gaussian matrix with the
/// columns of Q sign-corrected so that R has a positive diagonal.
inline Matrix haar_orthogonal(Index n, Rng& rng) {
  if (n < 1) throw DimensionError("haar_orthogonal: n must be at least 1");
  Matrix g = gaussian_matrix(n, n, rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const auto& r = qr.matrixQR();
  for (Index j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return q;
}

/// gain * top-left (d_out x d_in) block of a Haar orthogonal matrix of size max(d_in, d_out).
inline Matrix orthogonal_submatrix_init(Index d_out, Index d_in, double gain, Rng& rng) {
  if (d_out < 1 || d_in < 1) throw DimensionError("orthogonal_submatrix_init: dimensions must be positive");
  if (!(gain > 0) || !std::isfinite(gain)) throw ParameterError("orthogonal_submatrix_init: gain must be positive");
  Matrix q = haar_orthogonal(std::max(d_out, d_in), rng);
  return gain * q.topLeftCorner(d_out, d_in);
}

/// The scale that keeps signal size roughly constant through a fan_in -> fan_out map.
inline double forward_gain(Index fan_out, Index fan_in) {
  return std::max(1.0, std::sqrt(static_cast<double>(fan_out) / static_cast<double>(fan_in)));
}

template <typename Scalar>
struct MeanTrace {
  VectorX<Scalar> mean;
  Scalar trace_cov;
};

/// Two-pass moments of a vector stream: the exact mean is fixed by the first pass,
/// the second pass accumulates squared distances to it.
template <typename Scalar = double>
class StreamingMoments {
 public:
  explicit StreamingMoments(Index dim) : sum_(VectorX<Scalar>::Zero(dim)) {
    if (dim < 1) throw DimensionError("StreamingMoments: dimension must be positive");
  }

  Index dim() const noexcept { return sum_.size(); }
  Index count() const noexcept { return count_; }
  bool in_second_pass() const noexcept { return second_pass_; }

  template <typename Derived>
  void observe_first(const Eigen::MatrixBase<Derived>& v) {
    if (second_pass_) throw StatisticsError("StreamingMoments: first pass already finished");
    check_dim(v.size());
    sum_ += v;
    ++count_;
  }

  /// Freezes the mean; subsequent observations must replay the same stream.
  void begin_second_pass() {
    if (count_ < 2) throw StatisticsError("StreamingMoments: need at least two observations");
    mean_ = sum_ / static_cast<Scalar>(count_);
    second_pass_ = true;
    squares_ = Scalar(0);
    second_count_ = 0;
  }

  template <typename Derived>
  void observe_second(const Eigen::MatrixBase<Derived>& v) {
    if (!second_pass_) throw StatisticsError("StreamingMoments: second pass not started");
    check_dim(v.size());
    squares_ += (v - mean_).squaredNorm();
    ++second_count_;
  }

  const VectorX<Scalar>& mean() const {
    if (!second_pass_) throw StatisticsError("StreamingMoments: mean not available before second pass");
    return mean_;
  }

  /// Population trace of the covariance, (1/N) sum ||v - mean||^2.
  Scalar trace() const {
    if (!second_pass_ || second_count_ != count_)
      throw StatisticsError("StreamingMoments: second pass incomplete");
    return squares_ / static_cast<Scalar>(count_);
  }

 private:
  void check_dim(Index n) const {
    if (n != sum_.size()) throw DimensionError("StreamingMoments: dimension mismatch");
  }

  VectorX<Scalar> sum_;
  VectorX<Scalar> mean_;
  Scalar squares_{0};
  Index count_ = 0;
  Index second_count_ = 0;
  bool second_pass_ = false;
};

/// Mean and population covariance trace of the columns of `columns`.
template <typename Scalar>
MeanTrace<Scalar> two_pass_mean_and_trace(const MatrixX<Scalar>& columns) {
  if (columns.cols() < 2) throw StatisticsError("two_pass_mean_and_trace: need at least two vectors");
  StreamingMoments<Scalar> m(columns.rows());
  for (Index j = 0; j < columns.cols(); ++j) m.observe_first(columns.col(j));
  m.begin_second_pass();
  for (Index j = 0; j < columns.cols(); ++j) m.observe_second(columns.col(j));
  return {m.mean(), m.trace()};
}

inline MeanTrace<double> two_pass_mean_and_trace(std::span<const Vector> stream) {
  if (stream.size() < 2) throw StatisticsError("two_pass_mean_and_trace: need at least two vectors");
  StreamingMoments<double> m(stream.front().size());
  for (const auto& v : stream) m.observe_first(v);
  m.begin_second_pass();
  for (const auto& v : stream) m.observe_second(v);
  return {m.mean(), m.trace()};
}

/// The cancelling form E||v||^2 - ||mean||^2. Only here to demonstrate its failure
/// at large bias; never used by the estimators.
template <typename Scalar>
MeanTrace<Scalar> one_pass_mean_and_trace(const MatrixX<Scalar>& columns) {
  if (columns.cols() < 2) throw StatisticsError("one_pass_mean_and_trace: need at least two vectors");
  VectorX<Scalar> sum = VectorX<Scalar>::Zero(columns.rows());
  Scalar squares(0);
  for (Index j = 0; j < columns.cols(); ++j) {
    sum += columns.col(j);
    squares += columns.col(j).squaredNorm();
  }
  const auto n = static_cast<Scalar>(columns.cols());
  VectorX<Scalar> mean = sum / n;
  return {mean, squares / n - mean.squaredNorm()};
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw StatisticsError("median of empty sample");
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  double hi = *mid;
  if (v.size() % 2 == 1) return hi;
  double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw StatisticsError("pearson: need two equal-length samples");
  const auto n = static_cast<double>(a.size());
  double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) throw StatisticsError("pearson: constant sample");
  return sab / std::sqrt(saa * sbb);
}

}  // namespace nlc
