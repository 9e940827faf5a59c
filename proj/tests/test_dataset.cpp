#include <catch_amalgamated.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <sstream>

#include "nlc/dataset.hpp"

using namespace nlc;

namespace {

// Nearest-class-mean rule fitted on the training split; a linear classifier.
double nearest_mean_test_error(const Dataset& d) {
  Matrix means = Matrix::Zero(d.d_in(), d.n_classes);
  std::vector<double> count(static_cast<std::size_t>(d.n_classes), 0);
  for (Index j : d.splits.train) {
    const int y = d.labels[static_cast<std::size_t>(j)];
    means.col(y) += d.inputs.col(j);
    ++count[static_cast<std::size_t>(y)];
  }
  for (int c = 0; c < d.n_classes; ++c) means.col(c) /= count[static_cast<std::size_t>(c)];
  Index wrong = 0;
  for (Index j : d.splits.test) {
    Index best;
    (means.colwise() - d.inputs.col(j)).colwise().squaredNorm().minCoeff(&best);
    wrong += best != d.labels[static_cast<std::size_t>(j)];
  }
  return static_cast<double>(wrong) / static_cast<double>(d.splits.test.size());
}

template <typename F>
ParseError parse_error_of(F&& f) {
  try {
    f();
  } catch (const ParseError& e) {
    return e;
  }
  FAIL("expected a ParseError");
  return ParseError(0, 0, "");
}

}  // namespace

TEST_CASE("preprocessing normalizes the second moment") {
  Rng rng(1);
  const Matrix raw = 5 * gaussian_matrix(20, 300, rng).array() + 3;
  Rng p(2);
  const auto r = preprocess(raw, 0.99, p);
  CHECK(std::abs(r.inputs.squaredNorm() / static_cast<double>(r.inputs.size()) - 1) < 1e-9);
  // Re-running the final rescale changes nothing.
  Matrix again = r.inputs;
  normalize_second_moment(again);
  CHECK((again - r.inputs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("a five-dimensional spectrum keeps five components") {
  Rng rng(3);
  const Index d = 30, n = 2000;
  // Five orthonormal directions orthogonal to the all-ones vector, so per-input
  // centering and scaling keep the data inside their span.
  Matrix basis(d, 6);
  basis.col(0).setOnes();
  basis.rightCols(5) = gaussian_matrix(d, 5, rng);
  Eigen::HouseholderQR<Matrix> qr(basis);
  const Matrix V = (qr.householderQ() * Matrix::Identity(d, 6)).rightCols(5);
  Vector scales(5);
  scales << 3, 2.5, 2, 1.5, 1;
  const Matrix raw = V * scales.asDiagonal() * gaussian_matrix(5, n, rng);

  // Eigen-decomposition oracle on the output of the two normalization steps.
  Matrix x = raw;
  for (Index j = 0; j < n; ++j) {
    x.col(j).array() -= x.col(j).mean();
    x.col(j) /= std::sqrt(x.col(j).squaredNorm() / static_cast<double>(d));
  }
  x.colwise() -= x.rowwise().mean();
  Eigen::SelfAdjointEigenSolver<Matrix> es(x * x.transpose() / static_cast<double>(n));
  const Vector ev = es.eigenvalues().reverse();
  Index nonzero = 0;
  for (Index i = 0; i < d; ++i) nonzero += ev(i) > 1e-10 * ev(0);
  REQUIRE(nonzero == 5);
  Index oracle = 0;
  double acc = 0;
  while (acc < 0.99 * ev.sum()) acc += ev(oracle++);

  Rng p(4);
  const auto r = preprocess(raw, 0.99, p);
  CHECK(oracle == 5);
  CHECK(r.components == 5);
  CHECK(r.inputs.rows() == 5);

  // The projection is the transpose of the leading columns of a Haar matrix drawn from the same stream.
  Rng q(4);
  const Matrix Q = haar_orthogonal(d, q).leftCols(5);
  CHECK((Q.transpose() * Q - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-9);
  Matrix expected = Q.transpose() * x;
  normalize_second_moment(expected);
  CHECK((expected - r.inputs).cwiseAbs().maxCoeff() < 1e-9);
  // Orthonormal columns preserve inner products of k-dimensional coordinates.
  const Matrix z = gaussian_matrix(5, 4, rng);
  CHECK(((Q * z).transpose() * (Q * z) - z.transpose() * z).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("preprocessing rejects degenerate inputs") {
  Rng rng(5);
  Matrix raw = gaussian_matrix(4, 10, rng);
  raw.col(3).setConstant(2.0);
  CHECK_THROWS_AS(preprocess(raw, 0.99, rng), DegenerateError);
  CHECK_THROWS_AS(preprocess(Matrix::Ones(1, 5), 0.99, rng), DimensionError);
  Matrix bad = gaussian_matrix(4, 10, rng);
  bad(0, 0) = std::nan("");
  CHECK_THROWS_AS(preprocess(bad, 0.99, rng), ParameterError);
}

TEST_CASE("splits are disjoint, covering and deterministic") {
  Rng a(6), b(6);
  const auto s = make_splits(5000, 0.6, 0.2, a);
  const auto t = make_splits(5000, 0.6, 0.2, b);
  CHECK(s.train.size() == 3000);
  CHECK(s.val.size() == 1000);
  CHECK(s.test.size() == 1000);
  CHECK(s.train == t.train);
  CHECK(s.val == t.val);
  CHECK(s.test == t.test);
  std::set<Index> all;
  for (const auto* part : {&s.train, &s.val, &s.test}) all.insert(part->begin(), part->end());
  CHECK(all.size() == 5000);
  CHECK(*all.begin() == 0);
  CHECK(*all.rbegin() == 4999);
}

TEST_CASE("stratified splits keep class frequencies in every split") {
  Rng rng(16);
  std::vector<int> labels(2003);
  for (auto& y : labels) y = static_cast<int>(rng.index(4));
  std::array<Index, 4> total{};
  for (int y : labels) ++total[static_cast<std::size_t>(y)];
  Rng a(7), b(7);
  const auto s = make_stratified_splits(labels, 0.6, 0.2, a);
  const auto t = make_stratified_splits(labels, 0.6, 0.2, b);
  CHECK(s.train == t.train);
  CHECK(s.test == t.test);
  std::set<Index> all;
  for (const auto* part : {&s.train, &s.val, &s.test}) all.insert(part->begin(), part->end());
  CHECK(all.size() == labels.size());
  CHECK(s.train.size() + s.val.size() + s.test.size() == labels.size());
  const std::pair<const std::vector<Index>*, double> parts[] = {{&s.train, 0.6}, {&s.val, 0.2}, {&s.test, 0.2}};
  for (const auto& [part, frac] : parts) {
    std::array<Index, 4> count{};
    for (Index j : *part) ++count[static_cast<std::size_t>(labels[static_cast<std::size_t>(j)])];
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(static_cast<double>(count[c]) - frac * static_cast<double>(total[c])) <= 1.0);
  }
  // Not grouped by class: the first 20 test labels are mixed.
  std::set<int> head;
  for (std::size_t k = 0; k < 20; ++k) head.insert(labels[static_cast<std::size_t>(s.test[k])]);
  CHECK(head.size() > 1);
  CHECK_THROWS_AS(make_stratified_splits(labels, 0.9, 0.2, a), ParameterError);
}

TEST_CASE("input statistics") {
  SECTION("two points +-e1") {
    Matrix x(3, 2);
    x << 1, -1, 0, 0, 0, 0;
    const std::vector<Index> idx{0, 1};
    const auto s = input_stats(x, idx);
    CHECK(s.mean.isZero(0));
    Matrix e = Matrix::Zero(3, 3);
    e(0, 0) = 1;
    CHECK((s.cov - e).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((s.factor * s.factor.transpose() - s.cov).cwiseAbs().maxCoeff() < 1e-12);
  }
  SECTION("factor reproduces the covariance and generates it") {
    Rng rng(7);
    Matrix mix = gaussian_matrix(6, 6, rng);
    mix.col(5).setZero();  // rank-deficient covariance
    const Matrix x = mix * gaussian_matrix(6, 400, rng);
    std::vector<Index> idx(400);
    for (Index i = 0; i < 400; ++i) idx[static_cast<std::size_t>(i)] = i;
    const auto s = input_stats(x, idx);
    CHECK((s.cov - s.cov.transpose()).cwiseAbs().maxCoeff() == 0);
    Eigen::SelfAdjointEigenSolver<Matrix> es(s.cov);
    CHECK(es.eigenvalues().minCoeff() > -1e-9);
    CHECK((s.factor * s.factor.transpose() - s.cov).cwiseAbs().maxCoeff() < 1e-9);
    const Index draws = 1'000'000;
    Matrix acc = Matrix::Zero(6, 6);
    Vector g(6);
    for (Index k = 0; k < draws; ++k) {
      for (Index i = 0; i < 6; ++i) g(i) = rng.normal();
      const Vector v = s.factor * g;
      acc.noalias() += v * v.transpose();
    }
    acc /= static_cast<double>(draws);
    // Entry sd is at most sqrt(2) * max variance / sqrt(draws).
    const double tol = 5 * std::sqrt(2.0) * s.cov.diagonal().maxCoeff() / std::sqrt(static_cast<double>(draws));
    CHECK((acc - s.cov).cwiseAbs().maxCoeff() < tol);
  }
  SECTION("too few points") {
    const std::vector<Index> one{0};
    CHECK_THROWS_AS(input_stats(Matrix::Ones(2, 2), one), StatisticsError);
  }
}

TEST_CASE("synthetic Gaussian classes") {
  SECTION("balanced labels and unit second moment") {
    Rng rng(8);
    const auto d = synth_gaussian_classes(10, 3, 1001, 2.0, rng);
    std::vector<Index> hist(3, 0);
    for (int y : d.labels) ++hist[static_cast<std::size_t>(y)];
    CHECK(*std::max_element(hist.begin(), hist.end()) - *std::min_element(hist.begin(), hist.end()) <= 1);
    CHECK(std::abs(d.inputs.squaredNorm() / static_cast<double>(d.inputs.size()) - 1) < 1e-9);
    CHECK(d.n_classes == 3);
  }
  SECTION("separation 0 leaves chance-level error") {
    Rng rng(9);
    const auto d = synth_gaussian_classes(10, 3, 6000, 0.0, rng);
    const double e = nearest_mean_test_error(d);
    const double n = static_cast<double>(d.splits.test.size());
    CHECK(std::abs(e - 2.0 / 3.0) < 5 * std::sqrt(2.0 / 9.0 / n));
  }
  SECTION("separation 6 is linearly separable up to the Gaussian tail") {
    Rng rng(10);
    const auto d = synth_gaussian_classes(10, 2, 4000, 6.0, rng);
    CHECK(nearest_mean_test_error(d) < 0.02);
  }
  SECTION("deterministic in the seed") {
    Rng a(11), b(11);
    CHECK(synth_gaussian_classes(5, 2, 100, 1.0, a).inputs == synth_gaussian_classes(5, 2, 100, 1.0, b).inputs);
  }
  SECTION("invalid arguments") {
    Rng rng(12);
    CHECK_THROWS_AS(synth_gaussian_classes(5, 1, 100, 1.0, rng), ParameterError);
  }
}

TEST_CASE("waveform-noise generator shape and standardization") {
  Rng rng(13);
  const auto raw = synth_waveform_noise(5000, rng);
  CHECK(raw.inputs.rows() == 40);
  CHECK(raw.inputs.cols() == 5000);
  DatasetOptions opt;
  opt.preprocessing = Preprocessing::standardize;
  Rng p(14);
  const auto d = make_dataset(raw, opt, p, "waveform");
  CHECK(d.n_classes == 3);
  CHECK(d.d_in() == 40);
  CHECK(d.splits.train.size() == 3000);
  CHECK(d.splits.val.size() == 1000);
  CHECK(d.splits.test.size() == 1000);
  for (Index i = 0; i < 40; ++i) {
    CHECK(std::abs(d.inputs.row(i).mean()) < 1e-12);
    CHECK(std::abs(d.inputs.row(i).squaredNorm() / 5000 - 1) < 1e-12);
  }
}

TEST_CASE("CSV parsing") {
  SECTION("three rows, two features and a label") {
    std::istringstream in("1,2,a\n3,4,b\n5,6,a\n");
    const auto r = parse_csv(in);
    CHECK(r.inputs.rows() == 2);
    CHECK(r.inputs.cols() == 3);
    CHECK(r.inputs(1, 2) == 6);
    CHECK(r.labels == std::vector<int>{0, 1, 0});
    CHECK(r.label_names == std::vector<std::string>{"a", "b"});
  }
  SECTION("header with a named label column") {
    std::istringstream in("class,f1,f2\n2,0.5,1e3\n10,-1,2\n");
    CsvOptions opt;
    opt.label = std::string("class");
    const auto r = parse_csv(in, opt);
    CHECK(r.inputs(1, 0) == 1000);
    CHECK(r.labels == std::vector<int>{0, 1});  // numeric order: 2 < 10
  }
  SECTION("header auto-detection") {
    std::istringstream in("x,y,label\n1,2,0\n");
    CHECK(parse_csv(in).inputs.cols() == 1);
  }
  SECTION("ragged row names its line") {
    std::istringstream in("1,2,0\n3,0\n");
    const auto e = parse_error_of([&] { parse_csv(in); });
    CHECK(e.line() == 2);
  }
  SECTION("non-numeric cell names line and column") {
    std::istringstream in("1,2,0\n3,abc,1\n");
    const auto e = parse_error_of([&] { parse_csv(in); });
    CHECK(e.line() == 2);
    CHECK(e.column() == 2);
  }
  SECTION("unknown label") {
    std::istringstream in("1,2,0\n3,4,7\n");
    CsvOptions opt;
    opt.allowed_labels = {"0", "1", "2"};
    const auto e = parse_error_of([&] { parse_csv(in, opt); });
    CHECK(e.line() == 2);
    CHECK(e.column() == 3);
  }
  SECTION("round trip through write_csv") {
    Rng rng(15);
    const auto raw = synth_waveform_noise(20, rng);
    std::stringstream s;
    write_csv(s, raw);
    const auto back = parse_csv(s);
    CHECK(back.inputs == raw.inputs);
    CHECK(back.labels == raw.labels);
  }
  SECTION("missing file") { CHECK_THROWS_AS(load_csv("/nonexistent/data.csv"), ConfigError); }
}

TEST_CASE("batch ranges") {
  CHECK(batch_ranges(10, 4, false).size() == 3);
  CHECK(batch_ranges(10, 4, true).size() == 2);
  CHECK(batch_ranges(3, 4, true).size() == 1);
  CHECK_THROWS_AS(batch_ranges(3, 0, false), ParameterError);
}
