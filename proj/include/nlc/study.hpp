#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nlc/activation.hpp"
#include "nlc/dataset.hpp"
#include "nlc/error.hpp"
#include "nlc/metrics.hpp"
#include "nlc/network.hpp"
#include "nlc/sampler.hpp"
#include "nlc/serialize.hpp"
#include "nlc/trainer.hpp"

namespace nlc {

/// Unit-Gaussian inputs with cyclic labels; every column in every split.
inline Dataset gaussian_input_dataset(Index d_in, Index n, int n_classes, Rng& rng) {
  Dataset d;
  d.name = "unit_gaussian";
  d.inputs = gaussian_matrix(d_in, n, rng);
  d.n_classes = n_classes;
  d.labels.resize(static_cast<std::size_t>(n));
  for (Index j = 0; j < n; ++j) {
    d.labels[static_cast<std::size_t>(j)] = static_cast<int>(j % n_classes);
    d.splits.train.push_back(j);
  }
  d.splits.val = d.splits.train;
  d.splits.test = d.splits.train;
  d.stats = input_stats(d);
  return d;
}

/// Dataset sources: "synth:gaussian[:d=20,classes=3,n=5000,sep=3]",
/// "synth:waveform[:n=5000]" or "csv:<path>[:label=<index or name>]".
struct DatasetSource {
  std::string kind;  // gaussian, waveform or csv
  std::string path;
  std::string label = "-1";
  Index d = 20;
  int classes = 3;
  Index n = 5000;
  double sep = 3.0;
};

inline DatasetSource parse_dataset_source(const std::string& text) {
  DatasetSource s;
  auto options = [&](std::string_view rest) {
    std::stringstream ss{std::string(rest)};
    for (std::string kv; std::getline(ss, kv, ',');) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("dataset option '" + kv + "' is not key=value");
      const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
      try {
        if (k == "d") s.d = std::stol(v);
        else if (k == "classes") s.classes = std::stoi(v);
        else if (k == "n") s.n = std::stol(v);
        else if (k == "sep") s.sep = std::stod(v);
        else if (k == "label") s.label = v;
        else throw ConfigError("unknown dataset option '" + k + "'");
      } catch (const std::logic_error&) {
        throw ConfigError("bad value for dataset option '" + k + "'");
      }
    }
  };
  if (text.rfind("csv:", 0) == 0) {
    s.kind = "csv";
    std::string rest = text.substr(4);
    const auto opt = rest.rfind(":label=");
    if (opt != std::string::npos) {
      options(rest.substr(opt + 1));
      rest = rest.substr(0, opt);
    }
    if (rest.empty()) throw ConfigError("csv dataset needs a path");
    s.path = rest;
    return s;
  }
  if (text.rfind("synth:", 0) == 0) {
    const std::string rest = text.substr(6);
    const auto colon = rest.find(':');
    s.kind = rest.substr(0, colon);
    if (s.kind != "gaussian" && s.kind != "waveform") throw ConfigError("unknown synthetic dataset '" + s.kind + "'");
    if (colon != std::string::npos) options(std::string_view(rest).substr(colon + 1));
    return s;
  }
  throw ConfigError("dataset must be csv:<path> or synth:<kind>, got '" + text + "'");
}

/// Loads and preprocesses a source with stratified splits. Waveform and CSV features
/// are standardized; Gaussian classes go through the projection pipeline.
inline Dataset load_dataset(const DatasetSource& s, std::uint64_t seed) {
  Rng rng = Rng(seed).substream("dataset");
  DatasetOptions opt;
  opt.stratified = true;
  if (s.kind == "gaussian") return synth_gaussian_classes(s.d, s.classes, s.n, s.sep, rng, opt);
  opt.preprocessing = Preprocessing::standardize;
  Rng prep = rng.substream("preprocess");
  if (s.kind == "waveform") return make_dataset(synth_waveform_noise(s.n, rng), opt, prep, "waveform");
  CsvOptions csv;
  const bool numeric = !s.label.empty() && s.label.find_first_not_of("-0123456789") == std::string::npos;
  if (numeric) csv.label = std::stol(s.label);
  else csv.label = s.label;
  return make_dataset(load_csv(s.path, csv), opt, prep, s.path);
}

// ---------------------------------------------------------------------------------------
// Activation table

struct TauRow {
  ActivationBase base = ActivationBase::identity;
  double nlc_tau = 0;
  double nlc_tau_48 = 0;
  double linear_error = 0;
  std::optional<double> depth2_median;
  std::optional<double> depth49_median;
};

/// Width-`width` batchnorm stack on unit-Gaussian inputs with d_in = d_out = width.
inline Network batchnorm_probe_net(ActivationBase base, Index depth, Index width, const Rng& rng) {
  return instantiate(make_mlp_spec(width, width, width, depth, calibrated_activation(base), Normalization::batchnorm), rng);
}

inline double batchnorm_net_nlc_median(ActivationBase base, Index depth, Index width, int seeds, const Dataset& data,
                                       const EstimatorConfig& cfg, std::uint64_t seed) {
  std::vector<double> v;
  for (int k = 0; k < seeds; ++k) {
    const Rng r = Rng(seed).substream(to_string(base) + "/" + std::to_string(depth) + "/" + std::to_string(k));
    v.push_back(nlc(batchnorm_probe_net(base, depth, width, r), data, cfg));
  }
  return median(v);
}

struct TauTableOptions {
  bool with_networks = false;
  Index width = 100;
  int seeds = 10;
  Index deep = 49;
  EstimatorConfig estimator;
  std::uint64_t seed = 0;
};

/// Rows for the study activations followed by an identity debug row.
inline std::vector<TauRow> tau_table(const TauTableOptions& opt) {
  std::vector<TauRow> rows;
  std::optional<Dataset> data;
  if (opt.with_networks) {
    Rng rng = Rng(opt.seed).substream("tau_inputs");
    data = gaussian_input_dataset(opt.width, opt.estimator.batch_size * opt.estimator.batches + 1000, 2, rng);
  }
  std::vector<ActivationBase> bases(kStudyActivations.begin(), kStudyActivations.end());
  bases.push_back(ActivationBase::identity);
  for (auto b : bases) {
    const ActivationConfig a{b};
    TauRow r;
    r.base = b;
    r.nlc_tau = nlc_tau(a);
    r.nlc_tau_48 = std::pow(r.nlc_tau, 48);
    r.linear_error = linear_approx_error(a);
    if (data && b != ActivationBase::identity) {
      r.depth2_median = batchnorm_net_nlc_median(b, 2, opt.width, opt.seeds, *data, opt.estimator, opt.seed);
      r.depth49_median = batchnorm_net_nlc_median(b, opt.deep, opt.width, opt.seeds, *data, opt.estimator, opt.seed);
    }
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------------------
// Sampling and measuring

struct SampleRow {
  std::string id;
  std::optional<ArchitectureSpec> spec;
  std::optional<MetricReport> report;
  bool affine_control = false;
  std::string failure;  // empty on success
};

struct SampleOptions {
  Index n = 20;
  Index budget = 20000;
  std::uint64_t seed = 0;
  DepthRange depths;
  EstimatorConfig estimator;
  MeasureOptions measure;
  Index affine_controls = 0;
};

/// Draw k of a study uses Rng(seed).substream("arch/k") for the spec and its
/// "init" substream for the parameters, so each row is reproducible on its own.
inline Network sample_network(Index k, Index budget, const Dataset& data, std::uint64_t seed, DepthRange depths,
                              ArchitectureSpec* spec_out = nullptr) {
  Rng r = Rng(seed).substream("arch/" + std::to_string(k));
  const Rng init = r.substream("init");
  const auto spec = sample_architecture(r, budget, data.d_in(), data.n_classes, depths);
  if (spec_out) *spec_out = spec;
  Network net = instantiate(spec, init);
  calibrate_loss_scale(net, data);
  return net;
}

/// Affine control: identity activations, random biases, sampled depth.
inline Network affine_control_network(Index k, Index budget, const Dataset& data, std::uint64_t seed) {
  Rng r = Rng(seed).substream("affine/" + std::to_string(k));
  const Index depth = 1 + 2 * r.index(3);
  const Index width = depth > 1 ? solve_width(depth, budget, data.d_in(), data.n_classes) : 0;
  auto spec = make_mlp_spec(data.d_in(), width, data.n_classes, depth, ActivationConfig{ActivationBase::identity});
  for (auto& l : spec.layers) l.bias_variance = kBiasVariance;
  spec.seed = r.seed();
  Network net = instantiate(spec, r.substream("init"));
  calibrate_loss_scale(net, data);
  return net;
}

inline std::vector<SampleRow> sample_and_measure(const Dataset& data, const SampleOptions& opt,
                                                 const std::function<void(const SampleRow&)>& on_row = {}) {
  std::vector<SampleRow> rows;
  auto run = [&](std::string id, bool affine, auto&& make) {
    SampleRow row;
    row.id = std::move(id);
    row.affine_control = affine;
    try {
      ArchitectureSpec spec;
      const Network net = make(spec);
      row.spec = spec;
      row.report = measure(net, data, opt.estimator, opt.measure);
    } catch (const Error& e) {
      row.failure = e.what();
    }
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  };
  for (Index k = 0; k < opt.n; ++k)
    run("arch" + std::to_string(k), false,
        [&](ArchitectureSpec& s) { return sample_network(k, opt.budget, data, opt.seed, opt.depths, &s); });
  for (Index k = 0; k < opt.affine_controls; ++k)
    run("affine" + std::to_string(k), true, [&](ArchitectureSpec& s) {
      Network net = affine_control_network(k, opt.budget, data, opt.seed);
      s = net.spec;
      return net;
    });
  return rows;
}

// ---------------------------------------------------------------------------------------
// Mini-study: sample, measure, search the learning rate, re-measure

struct StudyOptions {
  Index n = 30;
  Index budget = 20000;
  std::uint64_t seed = 0;
  DepthRange depths;
  EstimatorConfig estimator;
  TrainConfig train;
};

struct StudyRow {
  std::string id;
  Index depth = 0, width = 0;
  bool skip = false;
  std::string activation, normalization;
  double initial_nlc = 0, initial_bias = 0;
  double smallest_lr = 0, selected_lr = 0;
  Index selected_run = -1, n_runs = 0;
  double train_error = 0, val_error = 0, test_error = 0;
  double final_nlc = 0;
  std::string failure;
};

inline StudyRow study_architecture(Index k, const Dataset& data, const StudyOptions& opt,
                                   TrainResult* result_out = nullptr) {
  StudyRow row;
  row.id = "arch" + std::to_string(k);
  row.n_runs = opt.train.n_runs;
  try {
    ArchitectureSpec spec;
    const Network net = sample_network(k, opt.budget, data, opt.seed, opt.depths, &spec);
    row.depth = spec.depth;
    row.width = spec.width;
    row.skip = spec.has_skip();
    row.activation = to_string(spec.layers.front().activation->base);
    row.normalization = to_string(spec.layers.front().normalization);
    row.initial_nlc = nlc(net, data, opt.estimator);
    row.initial_bias = output_bias(net, data, opt.estimator);
    TrainConfig tc = opt.train;
    tc.shuffle_seed = Rng(opt.seed).substream("shuffle/" + std::to_string(k)).seed();
    TrainResult res = lr_search(net, data, tc);
    const auto& best = res.best();
    row.smallest_lr = res.smallest_lr;
    row.selected_run = res.selected;
    row.selected_lr = res.selected_lr;
    row.train_error = best.train_error;
    row.val_error = best.val_error;
    row.test_error = best.test_error;
    row.final_nlc = nlc(best.snapshot, data, opt.estimator);
    if (result_out) *result_out = std::move(res);
  } catch (const Error& e) {
    row.failure = e.what();
  }
  return row;
}

inline std::vector<StudyRow> mini_study(const Dataset& data, const StudyOptions& opt,
                                        const std::function<void(const StudyRow&, const TrainResult*)>& on_row = {}) {
  std::vector<StudyRow> rows;
  for (Index k = 0; k < opt.n; ++k) {
    TrainResult res;
    rows.push_back(study_architecture(k, data, opt, &res));
    if (on_row) on_row(rows.back(), rows.back().failure.empty() ? &res : nullptr);
  }
  return rows;
}

/// Error thresholds for "better than random": 50% with 3 classes and 80% with 10,
/// otherwise three quarters of the chance error.
inline bool better_than_random(double error, int n_classes) {
  const double threshold = n_classes == 3 ? 0.5 : n_classes == 10 ? 0.8 : 0.75 * random_error(n_classes);
  return error < threshold;
}

// ---------------------------------------------------------------------------------------
// Result rows as CSV and JSON

namespace detail {

inline std::string csv_text(std::string s) {
  for (char& ch : s)
    if (ch == ',' || ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

inline std::string opt_double(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

}  // namespace detail

inline const char* kTauCsvHeader = "activation,nlc_tau,nlc_tau_pow48,linear_approx_error,depth2_median,deep_median";

inline void write_tau_row(std::ostream& out, const TauRow& r) {
  out << to_string(r.base) << ',' << format_double(r.nlc_tau) << ',' << format_double(r.nlc_tau_48) << ','
      << format_double(r.linear_error) << ',' << detail::opt_double(r.depth2_median) << ','
      << detail::opt_double(r.depth49_median) << '\n';
}

inline const char* kSampleCsvHeader =
    "id,affine_control,depth,width,activation,normalization,skip,nlc,output_bias,gvcs,gvl,input_correlation,"
    "output_correlation,nonlinearity_median,perturbation_radius,failure";

/// Architecture and metric cells are empty for rows that failed before measuring.
inline void write_sample_row(std::ostream& out, const SampleRow& r) {
  out << r.id << ',' << r.affine_control << ',';
  if (r.spec) {
    const auto& act = r.spec->layers.front().activation;
    out << r.spec->depth << ',' << r.spec->width << ',' << (act ? to_string(act->base) : std::string("identity")) << ','
        << to_string(r.spec->layers.front().normalization) << ',' << r.spec->has_skip() << ',';
  } else {
    out << ",,,,,";
  }
  if (r.report) {
    std::ostringstream m;
    write_metric_row(m, "", *r.report);
    std::string cells = m.str();
    out << cells.substr(1, cells.size() - 2) << ',';
  } else {
    out << ",,,,,,,,";
  }
  out << detail::csv_text(r.failure) << '\n';
}

inline const char* kStudyCsvHeader =
    "id,depth,width,skip,activation,normalization,initial_nlc,initial_bias,smallest_lr,selected_lr,selected_run,"
    "n_runs,train_error,val_error,test_error,final_nlc,failure";

inline void write_study_row(std::ostream& out, const StudyRow& r) {
  out << r.id << ',' << r.depth << ',' << r.width << ',' << r.skip << ',' << r.activation << ',' << r.normalization
      << ',' << format_double(r.initial_nlc) << ',' << format_double(r.initial_bias) << ','
      << format_double(r.smallest_lr) << ',' << format_double(r.selected_lr) << ',' << r.selected_run << ','
      << r.n_runs << ',' << format_double(r.train_error) << ',' << format_double(r.val_error) << ','
      << format_double(r.test_error) << ',' << format_double(r.final_nlc) << ',' << detail::csv_text(r.failure)
      << '\n';
}

inline Json to_json(const StudyRow& r) {
  return Json{{"id", r.id},
              {"depth", r.depth},
              {"width", r.width},
              {"skip", r.skip},
              {"activation", r.activation},
              {"normalization", r.normalization},
              {"initial_nlc", r.initial_nlc},
              {"initial_bias", r.initial_bias},
              {"smallest_lr", r.smallest_lr},
              {"selected_lr", r.selected_lr},
              {"selected_run", r.selected_run},
              {"n_runs", r.n_runs},
              {"train_error", r.train_error},
              {"val_error", r.val_error},
              {"test_error", r.test_error},
              {"final_nlc", r.final_nlc},
              {"failure", r.failure}};
}

inline StudyRow study_row_from_json(const Json& j) {
  // Non-finite values are written as null.
  auto num = [&](const char* key) {
    const Json& v = j.at(key);
    return v.is_null() ? std::nan("") : v.get<double>();
  };
  return detail::json_errors([&] {
    StudyRow r;
    r.id = j.at("id").get<std::string>();
    r.depth = j.at("depth").get<Index>();
    r.width = j.at("width").get<Index>();
    r.skip = j.at("skip").get<bool>();
    r.activation = j.at("activation").get<std::string>();
    r.normalization = j.at("normalization").get<std::string>();
    r.initial_nlc = num("initial_nlc");
    r.initial_bias = num("initial_bias");
    r.smallest_lr = num("smallest_lr");
    r.selected_lr = num("selected_lr");
    r.selected_run = j.at("selected_run").get<Index>();
    r.n_runs = j.at("n_runs").get<Index>();
    r.train_error = num("train_error");
    r.val_error = num("val_error");
    r.test_error = num("test_error");
    r.final_nlc = num("final_nlc");
    r.failure = j.at("failure").get<std::string>();
    return r;
  });
}

}  // namespace nlc
