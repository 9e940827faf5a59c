#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nlc/metrics.hpp"
#include "nlc/precision.hpp"
#include "nlc/sampler.hpp"

using namespace nlc;

namespace {

// Every column in every split; stats over all columns.
Dataset plain_dataset(Matrix X, std::vector<int> labels, int n_classes) {
  Dataset d;
  d.inputs = std::move(X);
  d.labels = std::move(labels);
  d.n_classes = n_classes;
  for (Index i = 0; i < d.size(); ++i) {
    d.splits.train.push_back(i);
    d.splits.val.push_back(i);
    d.splits.test.push_back(i);
  }
  d.stats = input_stats(d);
  return d;
}

Dataset gaussian_dataset(Index d_in, Index n, int n_classes, Rng& rng) {
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Index j = 0; j < n; ++j) labels[static_cast<std::size_t>(j)] = static_cast<int>(j % n_classes);
  return plain_dataset(gaussian_matrix(d_in, n, rng), std::move(labels), n_classes);
}

Network affine_net(Index d_in, Index width, Index d_out, Index depth, Rng& rng) {
  auto spec = make_mlp_spec(d_in, width, d_out, depth, ActivationConfig{ActivationBase::identity});
  for (auto& l : spec.layers) l.bias_variance = 1.0;
  Network net = instantiate(spec, rng.substream("net"));
  // Anisotropic first layer so the map is not a similarity.
  net.weights[0] = gaussian_matrix(net.weights[0].rows(), net.weights[0].cols(), rng);
  return net;
}

// sqrt(E_x Tr(J(x) Cov_x J(x)^T) / Tr Cov_f) from per-column exact Jacobians over the whole pool.
double exact_nlc_pointwise(const Network& net, const Dataset& d) {
  double num = 0;
  Matrix F(net.d_out(), d.size());
  for (Index j = 0; j < d.size(); ++j) {
    const Matrix J = exact_jacobian(net, d.inputs.col(j));
    num += (J * d.stats.cov * J.transpose()).trace();
    F.col(j) = evaluate(net, d.inputs.col(j));
  }
  num /= static_cast<double>(d.size());
  const Vector mean = F.rowwise().mean();
  const double den = (F.colwise() - mean).squaredNorm() / static_cast<double>(d.size());
  return std::sqrt(num / den);
}

// Batch-generalized form: average over random batches of Tr(J (I_B x Cov_x) J^T) / B, and the
// centered output power of outputs propagated in random batches.
double exact_nlc_batched(const Network& net, const Dataset& d, Index B, Index batches, Rng& rng) {
  const auto& pool = d.splits.train;
  double num = 0;
  Matrix blockcov = Matrix::Zero(B * d.d_in(), B * d.d_in());
  for (Index l = 0; l < B; ++l) blockcov.block(l * d.d_in(), l * d.d_in(), d.d_in(), d.d_in()) = d.stats.cov;
  std::vector<Vector> outs;
  for (Index b = 0; b < batches; ++b) {
    const auto idx = rng.sample_without_replacement(pool, B);
    const Matrix X = d.columns(idx);
    const Matrix J = exact_jacobian(net, X);
    num += (J * blockcov * J.transpose()).trace() / static_cast<double>(B);
    const Matrix F = evaluate(net, X);
    for (Index k = 0; k < B; ++k) outs.push_back(F.col(k));
  }
  num /= static_cast<double>(batches);
  Vector mean = Vector::Zero(net.d_out());
  for (const auto& o : outs) mean += o;
  mean /= static_cast<double>(outs.size());
  double den = 0;
  for (const auto& o : outs) den += (o - mean).squaredNorm();
  den /= static_cast<double>(outs.size());
  return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("affine nets have NLC one") {
  Rng rng(1);
  std::vector<Dataset> datasets;
  datasets.push_back(gaussian_dataset(12, 3000, 3, rng));
  datasets.push_back(synth_gaussian_classes(12, 3, 3000, 3.0, rng));
  {
    Matrix X = gaussian_matrix(12, 3000, rng);
    X.row(0) *= 10;  // strongly anisotropic covariance
    X.row(1) = X.row(1).array().cube();
    std::vector<int> labels(3000, 0);
    datasets.push_back(plain_dataset(X, labels, 3));
  }
  EstimatorConfig cfg;
  cfg.batches = 200;  // 5e4 probe samples
  for (std::size_t di = 0; di < datasets.size(); ++di)
    for (int k = 0; k < 20; ++k) {
      Rng nr = rng.substream(static_cast<std::uint64_t>(100 * di + k));
      const Network net = affine_net(datasets[di].d_in(), 16, 4, 1 + 2 * (k % 3), nr);
      cfg.seed = static_cast<std::uint64_t>(k);
      INFO("dataset " << di << " net " << k);
      CHECK(std::abs(nlc::nlc(net, datasets[di], cfg) - 1) < 0.02);
    }
}

TEST_CASE("stochastic NLC matches the exact-Jacobian value") {
  Rng rng(2);
  const Dataset d = gaussian_dataset(5, 2000, 3, rng);
  SECTION("pointwise nets") {
    for (auto base : {ActivationBase::tanh, ActivationBase::relu, ActivationBase::even_tanh, ActivationBase::square}) {
      const auto spec = make_mlp_spec(5, 8, 3, 3, calibrated_activation(base));
      const Network net = instantiate(spec, rng.substream(static_cast<std::uint64_t>(base)));
      EstimatorConfig cfg;
      cfg.batches = 400;  // 1e5 probe samples
      const double exact = exact_nlc_pointwise(net, d);
      INFO(to_string(base) << " exact " << exact);
      CHECK(std::abs(nlc::nlc(net, d, cfg) / exact - 1) < 0.02);
    }
  }
  SECTION("batchnorm nets") {
    for (auto base : {ActivationBase::tanh, ActivationBase::relu}) {
      const auto spec = make_mlp_spec(5, 8, 3, 3, calibrated_activation(base), Normalization::batchnorm);
      const Network net = instantiate(spec, rng.substream(10 + static_cast<std::uint64_t>(base)));
      EstimatorConfig cfg;
      cfg.batch_size = 10;
      cfg.batches = 10000;  // 1e5 probe samples
      Rng orng(3);
      const double exact = exact_nlc_batched(net, d, 10, 4000, orng);
      INFO(to_string(base) << " exact " << exact);
      CHECK(std::abs(nlc::nlc(net, d, cfg) / exact - 1) < 0.02);
    }
  }
}

TEST_CASE("NLC of degenerate outputs") {
  Rng rng(4);
  const Dataset d = gaussian_dataset(3, 100, 2, rng);
  Network net = make_network(make_mlp_spec(3, 0, 2, 1, ActivationConfig{}));
  net.biases[0].setOnes();
  CHECK_THROWS_AS(nlc::nlc(net, d), DegenerateError);
  CHECK_THROWS_AS(output_bias(net, d), InfiniteBiasError);
}

TEST_CASE("output bias closed forms") {
  // 2048 values +-k/1024: exactly zero mean, exactly representable at 1e12 + x.
  const Index n = 2048;
  Matrix x(1, n);
  for (Index j = 0; j < n / 2; ++j) {
    x(0, 2 * j) = static_cast<double>(j + 1) / 1024.0;
    x(0, 2 * j + 1) = -static_cast<double>(j + 1) / 1024.0;
  }
  const double var = x.squaredNorm() / static_cast<double>(n);
  x /= std::sqrt(var);  // unit variance; rounding keeps the mean exactly zero by symmetry
  const double v = x.squaredNorm() / static_cast<double>(n);
  auto shifted = [&](double beta) { return Matrix(x.array() + beta); };
  auto closed = [&](double beta) { return std::sqrt((v + beta * beta) / v); };

  CHECK(std::abs(output_bias_of(x) - 1) < 1e-12);
  CHECK(std::abs(output_bias_of(shifted(10)) - std::sqrt(101.0)) < 1e-9);
  CHECK(std::abs(output_bias_of(shifted(1e8)) / closed(1e8) - 1) < 1e-6);
  CHECK(std::abs(one_pass_output_bias(shifted(1e3)) / closed(1e3) - 1) < 1e-6);

  // Multiples of 2^-10 stay exact after adding 1e12.
  Matrix q(1, n);
  for (Index j = 0; j < n / 2; ++j) {
    q(0, 2 * j) = static_cast<double>(j + 1) / 1024.0;
    q(0, 2 * j + 1) = -static_cast<double>(j + 1) / 1024.0;
  }
  const double qv = q.squaredNorm() / static_cast<double>(n);
  const Matrix q12 = q.array() + 1e12;
  const double truth = std::sqrt((qv + 1e24) / qv);
  CHECK(std::abs(output_bias_of(q12) / truth - 1) < 1e-6);
  CHECK(std::abs(one_pass_output_bias(q12) / truth - 1) > 0.1);
}

TEST_CASE("output bias is at least one on random nets") {
  Rng rng(5);
  const Dataset d = gaussian_dataset(6, 600, 3, rng);
  for (int k = 0; k < 20; ++k) {
    Rng r = rng.substream(static_cast<std::uint64_t>(k));
    const auto spec = sample_architecture(r, 3000, 6, 3, DepthRange{3, 9});
    const Network net = instantiate(spec, r);
    try {
      CHECK(output_bias(net, d) >= 1.0);
    } catch (const OverflowError&) {
      SUCCEED("overflow surfaces as a typed error");
    }
  }
}

TEST_CASE("output bias through a network uses batches") {
  Rng rng(6);
  const Dataset d = gaussian_dataset(1, 1000, 2, rng);
  Network net = make_network(make_mlp_spec(1, 0, 1, 1, ActivationConfig{}));
  net.weights[0](0, 0) = 1;
  net.biases[0](0) = 10;
  const auto& x = d.inputs;
  const double mean = x.mean();
  const double tr = (x.array() - mean).square().mean();
  const double second = (x.array() + 10).square().mean();
  CHECK(std::abs(output_bias(net, d) - std::sqrt(second / tr)) < 1e-9);
}

TEST_CASE("reduced-precision sweep shows the one-pass and two-pass thresholds") {
  // One-pass breaks near bias 2^(b/2), two-pass near 2^b, for b mantissa bits.
  Rng rng(7);
  const auto rows = precision_sweep(4096, 60, rng);
  for (const auto& r : rows) {
    INFO("bits " << r.bits << " bias " << r.bias);
    const double b = r.bits;
    if (r.bias <= std::exp2(b / 2 - 8)) CHECK(r.one_pass_rel_error < 1e-2);
    if (r.bias >= std::exp2(b / 2 + 2)) CHECK(!(r.one_pass_rel_error <= 0.1));
    if (r.bias <= std::exp2(b - 4)) CHECK(r.two_pass_rel_error < 1e-2);
    if (r.bias >= std::exp2(b + 2)) CHECK(!(r.two_pass_rel_error <= 0.1));
  }
}

TEST_CASE("affine nets have every nonlinearity sample equal to one") {
  Rng rng(8);
  const Dataset d = gaussian_dataset(6, 500, 3, rng);
  for (int k = 0; k < 5; ++k) {
    Rng r = rng.substream(static_cast<std::uint64_t>(k));
    const Network net = affine_net(6, 10, 3, 3, r);
    NonlinearityProbeConfig probe;
    probe.batches = 2;
    EstimatorConfig cfg;
    cfg.batch_size = 50;
    const auto s = nonlinearity_samples(net, d, probe, cfg);
    CHECK(s.C.size() == 200);
    CHECK(s.floor_hits == 0);
    for (double c : s.C) CHECK(c == 1.0);
  }
}

TEST_CASE("1-d tanh net nonlinearity median matches a brute-force sweep") {
  // f(x) = tanh(x): one hidden unit with unit weights and an identity readout.
  Rng rng(9);
  auto spec = make_mlp_spec(1, 1, 1, 2, ActivationConfig{ActivationBase::tanh});
  Network net = make_network(spec);
  net.weights[0](0, 0) = 1;
  net.weights[1](0, 0) = 1;
  const Dataset d = gaussian_dataset(1, 4000, 2, rng);
  const double sd = std::sqrt(d.stats.cov(0, 0));

  NonlinearityProbeConfig probe;
  probe.batches = 40;
  EstimatorConfig cfg;
  cfg.batch_size = 1;
  const auto s = nonlinearity_samples(net, d, probe, cfg);

  // Dense sweep with 100 sub-steps per probe step, closed-form f and f'.
  const double fine = std::pow(probe.spacing, 0.01);
  std::vector<double> brute;
  Rng br(10);
  for (int i = 0; i < 20000; ++i) {
    const double x = d.inputs(0, br.index(d.size()));
    const double u = sd * br.normal(), v = br.normal();
    const double g = v * (1 - std::tanh(x) * std::tanh(x)) * u;
    if (std::abs(g) < probe.g_floor * std::abs(u) * std::abs(v)) continue;
    double last = -1;
    for (double c = probe.c_start; c <= 1.0 * (1 + 1e-12); c *= fine) {
      const double ratio = v * (std::tanh(x + c * u) - std::tanh(x)) / (c * g);
      if (ratio < 0.5 || ratio > 2) break;
      last = c;
    }
    brute.push_back(last < 0 ? 1 / probe.c_start : std::max(1.0, 1 / last));
  }
  const double bm = median(brute);
  INFO("estimator " << s.median << " brute force " << bm);
  CHECK(s.median <= bm * probe.spacing * 1.05);
  CHECK(s.median >= bm / (probe.spacing * 1.05));
}

TEST_CASE("error-preserving perturbation") {
  SECTION("constant prediction keeps the cap") {
    Rng rng(11);
    const Dataset d = gaussian_dataset(4, 400, 2, rng);
    Network net = make_network(make_mlp_spec(4, 0, 2, 1, ActivationConfig{}));
    net.biases[0](0) = 1;
    NonlinearityProbeConfig probe;
    probe.batches = 2;
    EstimatorConfig cfg;
    cfg.batch_size = 100;
    CHECK(error_preserving_perturbation(net, d, 0.05, probe, cfg) == probe_grid(probe).back());
  }
  SECTION("1-d linear classifier matches the closed-form crossing sweep") {
    std::vector<double> radii;
    for (double m : {0.05, 0.25, 1.0}) {
      Rng rng(12);
      // Points at +-(m + |z|) labelled by sign; classifier scores (x, -x).
      const Index n = 2000;
      Matrix X(1, n);
      std::vector<int> labels(static_cast<std::size_t>(n));
      for (Index j = 0; j < n; ++j) {
        const double s = j % 2 ? 1.0 : -1.0;
        X(0, j) = s * (m + std::abs(rng.normal()));
        labels[static_cast<std::size_t>(j)] = s > 0 ? 0 : 1;
      }
      const Dataset d = plain_dataset(X, labels, 2);
      Network net = make_network(make_mlp_spec(1, 0, 2, 1, ActivationConfig{}));
      net.weights[0] << 1, -1;
      NonlinearityProbeConfig probe;
      probe.batches = 20;
      EstimatorConfig cfg;
      cfg.batch_size = 100;
      const double est = error_preserving_perturbation(net, d, 0.05, probe, cfg);

      // Oracle: column k flips once c >= |x_k| / |u_k| with u_k pointing toward zero; the
      // radius is the last grid step before more than 5 of 100 columns have flipped.
      const auto grid = probe_grid(probe);
      const double sd = std::sqrt(d.stats.cov(0, 0));
      Rng orng(13);
      std::vector<double> oracle;
      for (int t = 0; t < 4000; ++t) {
        std::vector<double> cross;
        for (int k = 0; k < 100; ++k) {
          const double x = X(0, orng.index(n)), u = sd * orng.normal();
          cross.push_back(x * u < 0 ? std::abs(x / u) : std::numeric_limits<double>::infinity());
        }
        std::sort(cross.begin(), cross.end());
        double r = probe.c_start / probe.spacing;
        for (double c : grid)
          if (cross[5] > c) r = c;
        oracle.push_back(r);
      }
      const double om = median(oracle);
      INFO("margin " << m << " estimator " << est << " oracle " << om);
      CHECK(est <= om * probe.spacing * 1.001);
      CHECK(est >= om / (probe.spacing * 1.001));
      radii.push_back(est);
    }
    CHECK(radii[0] < radii[1]);
    CHECK(radii[1] < radii[2]);
  }
}

TEST_CASE("gradient metrics") {
  Rng rng(14);
  const Dataset d = gaussian_dataset(10, 600, 3, rng);
  const auto spec = make_mlp_spec(10, 20, 3, 3, calibrated_activation(ActivationBase::tanh), Normalization::batchnorm);
  const Network net = instantiate(spec, rng);
  SECTION("gvl = gvcs sqrt(d_in)") { CHECK(std::abs(gvl(net, d) - gvcs(net, d) * std::sqrt(10.0)) < 1e-12); }
  SECTION("loss multiplier scales gradients exactly") {
    CHECK(std::abs(gvcs(net, d, {}, 4.0) / gvcs(net, d) - 4) < 1e-12);
  }
  SECTION("input gradients match finite differences of the summed loss") {
    Network lin = instantiate(make_mlp_spec(10, 20, 3, 3, calibrated_activation(ActivationBase::tanh)), rng);
    EstimatorConfig cfg;
    const Matrix G = input_gradients(lin, d, cfg);
    const double h = 1e-6;
    for (Index j : {Index{0}, Index{17}})
      for (Index i : {Index{0}, Index{5}}) {
        Matrix xp = d.inputs.col(j), xm = d.inputs.col(j);
        xp(i) += h;
        xm(i) -= h;
        const std::vector<int> y{d.labels[static_cast<std::size_t>(j)]};
        const double lp = softmax_cross_entropy(evaluate(lin, xp), y, lin.c_loss).loss;
        const double lm = softmax_cross_entropy(evaluate(lin, xm), y, lin.c_loss).loss;
        CHECK(std::abs((lp - lm) / (2 * h) - G(i, j)) < 1e-6);
      }
  }
}

TEST_CASE("correlations") {
  Rng rng(15);
  SECTION("identical centered directions give one, orthogonal give zero") {
    Matrix Z(2, 4);
    Z << 1, 2, -1, -2, 0, 0, 0, 0;
    CHECK(std::abs(centered_correlation(Z, Vector::Zero(2), 100, rng) - 1) < 1e-12);
    Matrix O(2, 2);
    O << 1, 0, 0, 1;
    CHECK(centered_correlation(O, Vector::Zero(2), 100, rng) < 1e-12);
  }
  SECTION("a constant input offset drives input correlation up, batchnorm-first outputs are unchanged") {
    const Dataset d = gaussian_dataset(8, 500, 2, rng);
    Dataset shifted = d;
    shifted.inputs.array() += 100.0;
    const auto spec = make_mlp_spec(8, 16, 3, 3, calibrated_activation(ActivationBase::relu), Normalization::batchnorm);
    const Network net = instantiate(spec, rng);
    const auto a = io_correlation(net, d), b = io_correlation(net, shifted);
    CHECK(a.input < 0.5);  // about 1/sqrt(8) for isotropic inputs
    CHECK(b.input > 0.999);
    CHECK(std::abs(a.output - b.output) < 1e-6);
  }
}

TEST_CASE("measure fills the report") {
  Rng rng(16);
  const Dataset d = synth_gaussian_classes(8, 3, 900, 2.0, rng);
  const auto spec = make_mlp_spec(d.d_in(), 16, 3, 3, calibrated_activation(ActivationBase::tanh));
  const Network net = instantiate(spec, rng);
  MeasureOptions opt;
  opt.nonlinearity = true;
  opt.perturbation = true;
  opt.probe.batches = 2;
  opt.probe.u_draws = 3;
  opt.probe.v_draws = 3;
  EstimatorConfig cfg;
  cfg.batch_size = 100;
  cfg.batches = 5;
  const auto r = measure(net, d, cfg, opt);
  CHECK(r.nlc > 0);
  CHECK(r.output_bias >= 1);
  CHECK(r.nonlinearity_median.has_value());
  CHECK(r.perturbation_radius.has_value());
  CHECK(std::abs(r.gvl - r.gvcs * std::sqrt(static_cast<double>(d.d_in()))) < 1e-12);
  const auto again = measure(net, d, cfg, opt);
  CHECK(again.nlc == r.nlc);
  CHECK(*again.nonlinearity_median == *r.nonlinearity_median);
}

TEST_CASE("probe grid") {
  NonlinearityProbeConfig p;
  const auto g = probe_grid(p);
  CHECK(g.front() == p.c_start);
  CHECK(g.size() == 91);  // 1e-9 .. 1 in steps of 10^(1/10)
  CHECK(std::abs(g.back() - 1) < 1e-9);
  p.tolerance = 1;
  CHECK_THROWS_AS(probe_grid(p), ParameterError);
}
