#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

#include "nlc/sampler.hpp"
#include "nlc/serialize.hpp"

using namespace nlc;

namespace {

/// Serialized text, parsed back: the same path a file round trip takes.
Json reparse(const Json& j) { return Json::parse(j.dump()); }

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::size_t fields(const std::string& line) { return static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1; }

}  // namespace

TEST_CASE("format_double round-trips every finite double") {
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const double v = std::ldexp(rng.normal(), static_cast<int>(rng.index(2001)) - 1000);
    CHECK(std::stod(format_double(v)) == v);
  }
  for (double v : {0.0, -0.0, std::numeric_limits<double>::min(), std::numeric_limits<double>::max(),
                   std::numeric_limits<double>::denorm_min(), 0.1, 1.0 / 3.0})
    CHECK(std::strtod(format_double(v).c_str(), nullptr) == v);
}

TEST_CASE("architecture specs round-trip exactly") {
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    Rng draw = rng.substream(static_cast<std::uint64_t>(i));
    const auto spec = sample_architecture(draw, 20000, 40, 3);
    CHECK(architecture_from_json(reparse(to_json(spec))) == spec);
  }
}

TEST_CASE("networks round-trip bit for bit") {
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    Rng draw = rng.substream(static_cast<std::uint64_t>(i));
    const auto spec = sample_architecture(draw, 5000, 10, 3, DepthRange{3, 11});
    Network net = instantiate(spec, draw.substream("init"));
    net.c_loss = std::ldexp(rng.uniform(), -7) * 3.7;
    const Network back = network_from_json(reparse(to_json(net)));
    CHECK(back.spec == net.spec);
    CHECK(back.c_loss == net.c_loss);
    CHECK(back.norm_epsilon == net.norm_epsilon);
    CHECK(back.skip_projection == net.skip_projection);
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
      CHECK(back.weights[l] == net.weights[l]);
      CHECK(back.biases[l] == net.biases[l]);
    }
    const Matrix X = gaussian_matrix(10, 20, rng);
    CHECK(evaluate(back, X) == evaluate(net, X));
  }
}

TEST_CASE("datasets round-trip and recompute their statistics") {
  Rng rng(4);
  const Dataset d = synth_gaussian_classes(12, 3, 300, 2.0, rng);
  const Dataset back = dataset_from_json(reparse(to_json(d)));
  CHECK(back.name == d.name);
  CHECK(back.n_classes == d.n_classes);
  CHECK(back.pca_components == d.pca_components);
  CHECK(back.inputs == d.inputs);
  CHECK(back.labels == d.labels);
  CHECK(back.splits.train == d.splits.train);
  CHECK(back.splits.val == d.splits.val);
  CHECK(back.splits.test == d.splits.test);
  CHECK(back.stats.mean == d.stats.mean);
  CHECK(back.stats.cov == d.stats.cov);
}

TEST_CASE("documents with the wrong format, version or shapes are rejected") {
  Rng rng(5);
  const Network net = instantiate(make_mlp_spec(4, 6, 2, 3, calibrated_activation(ActivationBase::relu)), rng);
  Json j = to_json(net);

  Json wrong_format = j;
  wrong_format["format"] = "nlc-dataset";
  CHECK_THROWS_AS(network_from_json(wrong_format), ConsistencyError);
  CHECK_THROWS_AS(architecture_from_json(j), ConsistencyError);

  Json wrong_version = j;
  wrong_version["version"] = kFormatVersion + 1;
  CHECK_THROWS_AS(network_from_json(wrong_version), ConsistencyError);

  Json short_data = j;
  short_data["weights"][0]["data"].erase(0);
  CHECK_THROWS_AS(network_from_json(short_data), ConsistencyError);

  Json wrong_shape = j;
  wrong_shape["weights"][1] = detail::matrix_json(Matrix::Zero(3, 3));
  CHECK_THROWS_AS(network_from_json(wrong_shape), ConsistencyError);

  Json missing = j;
  missing.erase("c_loss");
  CHECK_THROWS_AS(network_from_json(missing), ParseError);

  Json bad_activation = j;
  bad_activation["spec"]["layers"][0]["activation"]["base"] = "swish";
  CHECK_THROWS_AS(network_from_json(bad_activation), Error);

  Rng drng(6);
  Json dj = to_json(synth_gaussian_classes(6, 2, 50, 1.0, drng));
  Json bad_label = dj;
  bad_label["labels"][0] = 7;
  CHECK_THROWS_AS(dataset_from_json(bad_label), ConsistencyError);
  Json bad_split = dj;
  bad_split["splits"]["test"].push_back(50);
  CHECK_THROWS_AS(dataset_from_json(bad_split), ConsistencyError);
}

TEST_CASE("files are written atomically and read back") {
  const auto dir = std::filesystem::temp_directory_path() / "nlc_serialize_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "spec.json").string();
  const auto spec = make_mlp_spec(3, 5, 2, 3, calibrated_activation(ActivationBase::tanh));
  write_json(path, to_json(spec));
  CHECK_FALSE(std::filesystem::exists(path + ".tmp"));
  CHECK(architecture_from_json(read_json(path)) == spec);
  {
    std::ofstream out(path);
    out << "{ \"format\": ";
  }
  CHECK_THROWS_AS(read_json(path), ParseError);
  CHECK_THROWS_AS(read_json((dir / "absent.json").string()), ConfigError);
  CHECK_THROWS_AS(write_text_atomic((dir / "no_such_dir" / "x.json").string(), "{}"), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("metric rows follow the header and leave absent metrics empty") {
  MetricReport r;
  r.nlc = 1.25;
  r.output_bias = 3;
  r.gvcs = 0.1;
  r.gvl = 2;
  r.input_correlation = 0.5;
  r.output_correlation = -0.25;
  std::ostringstream a;
  write_metric_row(a, "net7", r);
  CHECK(a.str() == "net7,1.25,3,0.10000000000000001,2,0.5,-0.25,,\n");
  CHECK(fields(kMetricCsvHeader) == fields(lines(a.str())[0]));
  r.nonlinearity_median = 4;
  r.perturbation_radius = 0.125;
  std::ostringstream b;
  write_metric_row(b, "net8", r);
  CHECK(lines(b.str())[0].substr(lines(b.str())[0].size() - 8) == ",4,0.125");
}

TEST_CASE("training CSVs carry one row per run and per epoch") {
  TrainResult t;
  t.selected = 1;
  for (int k = 0; k < 3; ++k) {
    RunRecord run;
    run.lr0 = 0.5 * (k + 1);
    for (int e = 0; e < k + 1; ++e) run.curve.push_back(EpochRecord{0, run.lr0, 1.0, 0.5, 0.25, false});
    t.runs.push_back(run);
  }
  std::ostringstream runs, curves;
  write_train_runs(runs, t);
  write_train_curves(curves, t);
  const auto rl = lines(runs.str()), cl = lines(curves.str());
  REQUIRE(rl.size() == 4);
  REQUIRE(cl.size() == 7);
  CHECK(rl[0] == kRunCsvHeader);
  CHECK(cl[0] == kCurveCsvHeader);
  for (std::size_t i = 1; i < rl.size(); ++i) CHECK(fields(rl[i]) == fields(kRunCsvHeader));
  for (std::size_t i = 1; i < cl.size(); ++i) CHECK(fields(cl[i]) == fields(kCurveCsvHeader));
  CHECK(rl[2].rfind("1,1,1,", 0) == 0);
  CHECK(rl[1].rfind("0,0.5,0,", 0) == 0);
}
