// nlc_cli: experiments over the library, each writing CSV artifacts and a replayable manifest.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nlc/confounders.hpp"
#include "nlc/nlc.hpp"
#include "nlc/precision.hpp"
#include "nlc/region_map.hpp"

using namespace nlc;
namespace fs = std::filesystem;

namespace {

constexpr const char* kToolVersion = "1.0.0";

/// Option values keyed by config name: "<flag>" for global flags and "<command>.<flag>" for
/// command flags. A config file fills every option not given on the command line.
class Bindings {
 public:
  template <typename T>
  CLI::Option* option(CLI::App& app, const std::string& scope, const std::string& flag, T& var, const std::string& help) {
    auto* o = app.add_option("--" + flag, var, help)->capture_default_str();
    add(scope, flag, o, var);
    return o;
  }

  CLI::Option* flag(CLI::App& app, const std::string& scope, const std::string& flag, bool& var, const std::string& help) {
    auto* o = app.add_flag("--" + flag + ",!--no-" + flag, var, help)->capture_default_str();
    add(scope, flag, o, var);
    return o;
  }

  void apply(const Json& config) const {
    for (const auto& b : items_)
      if (b.opt->count() == 0 && config.contains(b.key)) b.load(config.at(b.key));
  }

  /// Resolved values of the global flags and of one command's flags.
  Json resolved(const std::string& command) const {
    Json j = Json::object();
    for (const auto& b : items_)
      if (b.scope.empty() || b.scope == command) j[b.key] = b.save();
    return j;
  }

 private:
  struct Item {
    std::string scope, key;
    CLI::Option* opt;
    std::function<void(const Json&)> load;
    std::function<Json()> save;
  };

  template <typename T>
  void add(const std::string& scope, const std::string& flag, CLI::Option* o, T& var) {
    items_.push_back({scope, scope.empty() ? flag : scope + "." + flag, o, [&var](const Json& j) { var = j.get<T>(); },
                      [&var] { return Json(var); }});
  }

  std::vector<Item> items_;
};

struct Flags {
  std::string command;
  std::string config;
  std::uint64_t seed = 0;
  Index budget = 20000;
  std::string dataset = "synth:gaussian";
  Index batch_size = 250;
  Index batches = 20;
  std::string out = "nlc_out";
  bool precision_check = false;

  bool with_networks = false;
  Index tau_width = 100;
  int tau_seeds = 10;
  Index tau_deep = 49;

  Index sample_n = 20;
  Index affine_controls = 0;
  bool nonlinearity = true;
  bool perturbation = false;

  Index study_n = 30;
  Index runs = 15;
  double epsilon = 2e-5;
  Index max_epochs = 100;
  std::string optimizer = "sgd";
  std::string criterion = "validation";

  Index min_depth = 3;
  Index max_depth = 49;

  std::string scenario;
  std::vector<double> grid;
  double train_lr = 0;

  Index map_depth = 10;
  Index resolution = 100;
  Index map_width = 100;
  Index map_d_in = 100;
};

/// Artifacts written so far and per-item failures, reported in the manifest and on stderr.
struct Run {
  fs::path out;
  std::vector<std::string> artifacts;
  std::vector<std::string> failures;
  Json summary = Json::object();

  void write(const std::string& name, const std::string& text) {
    const fs::path p = out / name;
    fs::create_directories(p.parent_path());
    write_text_atomic(p.string(), text);
    artifacts.push_back(name);
  }
};

EstimatorConfig estimator(const Flags& f) {
  EstimatorConfig c;
  c.batch_size = f.batch_size;
  c.batches = f.batches;
  c.seed = f.seed;
  return c;
}

TrainConfig train_config(const Flags& f) {
  TrainConfig c;
  c.n_runs = f.runs;
  c.smallest_lr_epsilon = f.epsilon;
  c.max_epochs_per_stage = f.max_epochs;
  c.batch_size = f.batch_size;
  c.optimizer = f.optimizer == "adam" ? Optimizer::adam : Optimizer::sgd;
  c.criterion = f.criterion == "training" ? StopCriterion::training_error : StopCriterion::validation_error;
  return c;
}

void tau_table_cmd(const Flags& f, Run& run) {
  TauTableOptions o;
  o.with_networks = f.with_networks;
  o.width = f.tau_width;
  o.seeds = f.tau_seeds;
  o.deep = f.tau_deep;
  o.estimator = estimator(f);
  o.seed = f.seed;
  std::ostringstream csv;
  csv << kTauCsvHeader << '\n';
  for (const auto& r : tau_table(o)) write_tau_row(csv, r);
  run.write("tau_table.csv", csv.str());
}

void sample_measure_cmd(const Flags& f, Run& run) {
  const Dataset data = load_dataset(parse_dataset_source(f.dataset), f.seed);
  SampleOptions o;
  o.n = f.sample_n;
  o.budget = f.budget;
  o.seed = f.seed;
  o.depths = DepthRange{f.min_depth, f.max_depth};
  o.estimator = estimator(f);
  o.measure.nonlinearity = f.nonlinearity;
  o.measure.perturbation = f.perturbation;
  o.affine_controls = f.affine_controls;
  std::ostringstream csv;
  csv << kSampleCsvHeader << '\n';
  sample_and_measure(data, o, [&](const SampleRow& r) {
    write_sample_row(csv, r);
    if (r.spec) run.write("architectures/" + r.id + ".json", to_json(*r.spec).dump(1) + "\n");
    if (!r.failure.empty()) run.failures.push_back(r.id + ": " + r.failure);
  });
  run.write("sample_measure.csv", csv.str());
}

void mini_study_cmd(const Flags& f, Run& run) {
  const Dataset data = load_dataset(parse_dataset_source(f.dataset), f.seed);
  StudyOptions o;
  o.n = f.study_n;
  o.budget = f.budget;
  o.seed = f.seed;
  o.depths = DepthRange{f.min_depth, f.max_depth};
  o.estimator = estimator(f);
  o.train = train_config(f);
  std::ostringstream csv;
  csv << kStudyCsvHeader << '\n';
  mini_study(data, o, [&](const StudyRow& r, const TrainResult* res) {
    write_study_row(csv, r);
    if (res) {
      std::ostringstream runs, curves;
      write_train_runs(runs, *res);
      write_train_curves(curves, *res);
      run.write("runs/" + r.id + "_runs.csv", runs.str());
      run.write("runs/" + r.id + "_curves.csv", curves.str());
    }
    if (!r.failure.empty()) run.failures.push_back(r.id + ": " + r.failure);
  });
  run.write("mini_study.csv", csv.str());
}

void confounders_cmd(const Flags& f, Run& run) {
  const Scenario s = parse_scenario(f.scenario);
  const Dataset data = load_dataset(parse_dataset_source(f.dataset), f.seed);
  const Network tmpl = confounder_template(data.d_in(), data.n_classes, Rng(f.seed).substream("template"));
  ConfounderOptions o;
  o.estimator = estimator(f);
  o.seed = f.seed;
  if (f.train_lr > 0) {
    o.train_lr = f.train_lr;
    o.train = train_config(f);
    o.train.n_runs = 1;
  }
  const auto grid = f.grid.empty() ? default_grid(s) : f.grid;
  std::ostringstream csv;
  csv << "c,nlc,output_bias,gvcs,gvl,input_correlation,output_correlation,test_error\n";
  for (const auto& r : confounder_suite(s, tmpl, data, grid, o)) {
    const auto& m = r.report;
    csv << format_double(r.c) << ',' << format_double(m.nlc) << ',' << format_double(m.output_bias) << ','
        << format_double(m.gvcs) << ',' << format_double(m.gvl) << ',' << format_double(m.input_correlation) << ','
        << format_double(m.output_correlation) << ',' << (r.test_error ? format_double(*r.test_error) : "") << '\n';
  }
  run.write("confounders_" + to_string(s) + ".csv", csv.str());
}

void region_map_cmd(const Flags& f, Run& run) {
  const Rng base(f.seed);
  const Network net = he_network(f.map_d_in, f.map_width, 3, f.map_depth, ActivationConfig{ActivationBase::relu},
                                 Normalization::batchnorm, base.substream("net"));
  Rng anchors = base.substream("anchors");
  const auto m = output_region_map(net, anchors, f.resolution);
  std::ostringstream csv;
  for (Index r = 0; r < m.rows; ++r) {
    for (Index c = 0; c < m.cols; ++c) csv << (c ? "," : "") << m.at(r, c);
    csv << '\n';
  }
  const std::string name = "region_map_depth" + std::to_string(f.map_depth) + ".csv";
  run.write(name, csv.str());
  run.summary["regions"] = count_regions(m);
}

void precision_check(const Flags& f, Run& run) {
  Rng rng = Rng(f.seed).substream("precision");
  std::ostringstream csv;
  csv << "bits,bias,reference,two_pass_rel_error,one_pass_rel_error\n";
  for (const auto& r : precision_sweep(10000, 60, rng))
    csv << r.bits << ',' << format_double(r.bias) << ',' << format_double(r.reference) << ','
        << format_double(r.two_pass_rel_error) << ',' << format_double(r.one_pass_rel_error) << '\n';
  run.write("precision_check.csv", csv.str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nonlinearity coefficient experiments"};
  app.require_subcommand(0, 1);
  app.fallthrough();
  Flags f;
  Bindings b;
  app.add_option("--config", f.config, "JSON file of option values, or a manifest to replay");
  b.option(app, "", "seed", f.seed, "master seed");
  b.option(app, "", "budget", f.budget, "parameter budget of sampled architectures");
  b.option(app, "", "dataset", f.dataset, "csv:<path>[:label=<col>] or synth:gaussian[:k=v,...] or synth:waveform[:n=<n>]");
  b.option(app, "", "batch-size", f.batch_size, "batch size for estimators and training");
  b.option(app, "", "batches", f.batches, "batches per stochastic estimate");
  b.option(app, "", "out", f.out, "output directory");
  b.flag(app, "", "precision-check", f.precision_check, "also write the reduced-precision output-bias sweep");

  auto* tau = app.add_subcommand("tau-table", "activation table: NLC_tau, NLC_tau^48, linear approximation error");
  b.flag(*tau, "tau-table", "with-networks", f.with_networks, "also measure depth-2 and deep batchnorm nets");
  b.option(*tau, "tau-table", "width", f.tau_width, "width of the measured nets");
  b.option(*tau, "tau-table", "seeds", f.tau_seeds, "initializations per median");
  b.option(*tau, "tau-table", "deep-depth", f.tau_deep, "depth of the deep nets");

  auto* sample = app.add_subcommand("sample-measure", "sample architectures and measure them at initialization");
  b.option(*sample, "sample-measure", "n", f.sample_n, "architectures");
  b.option(*sample, "sample-measure", "affine-controls", f.affine_controls, "extra affine control networks");
  b.flag(*sample, "sample-measure", "nonlinearity", f.nonlinearity, "measure the nonlinearity distribution median");
  b.flag(*sample, "sample-measure", "perturbation", f.perturbation, "measure the error-preserving perturbation");
  b.option(*sample, "sample-measure", "min-depth", f.min_depth, "smallest sampled depth");
  b.option(*sample, "sample-measure", "max-depth", f.max_depth, "largest sampled depth");

  auto* study = app.add_subcommand("mini-study", "sample, measure, search the learning rate, re-measure");
  b.option(*study, "mini-study", "n", f.study_n, "architectures");
  b.option(*study, "mini-study", "runs", f.runs, "learning-rate runs per architecture");
  b.option(*study, "mini-study", "epsilon", f.epsilon, "relative update size of the smallest learning rate");
  b.option(*study, "mini-study", "max-epochs", f.max_epochs, "epoch cap per decay stage");
  b.option(*study, "mini-study", "optimizer", f.optimizer, "sgd or adam")->check(CLI::IsMember({"sgd", "adam"}));
  b.option(*study, "mini-study", "criterion", f.criterion, "stopping criterion")
      ->check(CLI::IsMember({"validation", "training"}));
  b.option(*study, "mini-study", "min-depth", f.min_depth, "smallest sampled depth");
  b.option(*study, "mini-study", "max-depth", f.max_depth, "largest sampled depth");

  auto* conf = app.add_subcommand("confounders", "metric behaviour under one confounder scenario");
  b.option(*conf, "confounders", "scenario", f.scenario, "input_scale, loss_scale, duplication, input_bias, relu_depth, "
                                                         "sawtooth_period, or A-F")
      ->check(CLI::IsMember({"input_scale", "loss_scale", "duplication", "input_bias", "relu_depth", "sawtooth_period", "A",
                             "B", "C", "D", "E", "F"}));
  b.option(*conf, "confounders", "grid", f.grid, "grid values of c (default: the scenario grid)");
  b.option(*conf, "confounders", "train-lr", f.train_lr, "when positive, also train every grid point from this rate");

  auto* region = app.add_subcommand("region-map", "argmax regions of a batchnorm-relu net over an input sphere");
  b.option(*region, "region-map", "depth", f.map_depth, "depth");
  b.option(*region, "region-map", "resolution", f.resolution, "latitude cells; longitude has twice as many");
  b.option(*region, "region-map", "width", f.map_width, "width");
  b.option(*region, "region-map", "d-in", f.map_d_in, "input dimension");

  try {
    app.parse(argc, argv);
    for (auto* sub : app.get_subcommands()) f.command = sub->get_name();
    if (!f.config.empty()) {
      const Json file = read_json(f.config);
      const Json& config = file.contains("config") ? file.at("config") : file;
      b.apply(config);
      if (f.command.empty() && file.contains("command")) f.command = file.at("command").get<std::string>();
    }
    if (f.command.empty()) throw CLI::CallForHelp();
    if (f.command == "confounders") parse_scenario(f.scenario);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const Error& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  }

  Run run;
  run.out = f.out;
  int status = 0;
  try {
    fs::create_directories(run.out);
    if (f.command == "tau-table") tau_table_cmd(f, run);
    else if (f.command == "sample-measure") sample_measure_cmd(f, run);
    else if (f.command == "mini-study") mini_study_cmd(f, run);
    else if (f.command == "confounders") confounders_cmd(f, run);
    else if (f.command == "region-map") region_map_cmd(f, run);
    else throw ConfigError("unknown command '" + f.command + "'");
    if (f.precision_check) precision_check(f, run);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    status = 1;
  }

  Json manifest{{"format", "nlc-manifest"},
                {"version", kFormatVersion},
                {"tool_version", kToolVersion},
                {"compiler", __VERSION__},
                {"command", f.command},
                {"seeds", {{"seed", f.seed}}},
                {"config", b.resolved(f.command)},
                {"artifacts", run.artifacts},
                {"failures", run.failures},
                {"summary", run.summary},
                {"complete", status == 0}};
  try {
    run.write("manifest.json", manifest.dump(1) + "\n");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    status = 1;
  }
  for (const auto& failure : run.failures) std::cerr << "failed: " << failure << '\n';
  return status;
}
