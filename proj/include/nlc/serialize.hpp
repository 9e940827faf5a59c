#pragma once

#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nlc/activation.hpp"
#include "nlc/dataset.hpp"
#include "nlc/error.hpp"
#include "nlc/metrics.hpp"
#include "nlc/network.hpp"
#include "nlc/trainer.hpp"

namespace nlc {

using Json = nlohmann::json;

/// Bumped whenever a field changes meaning; readers reject other versions.
inline constexpr int kFormatVersion = 1;

/// 17 significant digits: every finite double survives a text round trip.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline Json matrix_json(const Matrix& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  return Json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};  // row-major
}

inline Matrix matrix_from(const Json& j) {
  const Index rows = j.at("rows").get<Index>(), cols = j.at("cols").get<Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || static_cast<Index>(data.size()) != rows * cols)
    throw ConsistencyError("matrix: data length does not match its shape");
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)];
  return m;
}

inline Json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector vector_from(const Json& j) {
  const auto data = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(data.data(), static_cast<Index>(data.size()));
}

inline void check_header(const Json& j, std::string_view format) {
  if (!j.contains("format") || j.at("format").get<std::string>() != format)
    throw ConsistencyError("expected a '" + std::string(format) + "' document");
  if (j.at("version").get<int>() != kFormatVersion)
    throw ConsistencyError("unsupported " + std::string(format) + " version " + j.at("version").dump());
}

template <typename F>
auto json_errors(F&& f) {
  try {
    return f();
  } catch (const Json::exception& e) {
    throw ParseError(0, 0, std::string("json: ") + e.what());
  }
}

}  // namespace detail

inline Json to_json(const ActivationConfig& a) {
  return Json{{"base", to_string(a.base)}, {"dilation", a.dilation}, {"shift", a.shift},
              {"debias", a.debias},        {"scale", a.scale},       {"period", a.period}};
}

inline ActivationConfig activation_from_json(const Json& j) {
  ActivationConfig a;
  a.base = parse_activation(j.at("base").get<std::string>());
  a.dilation = j.at("dilation").get<double>();
  a.shift = j.at("shift").get<double>();
  a.debias = j.at("debias").get<double>();
  a.scale = j.at("scale").get<double>();
  a.period = j.at("period").get<double>();
  return a;
}

inline Json to_json(const ArchitectureSpec& s) {
  Json layers = Json::array();
  for (const auto& l : s.layers)
    layers.push_back(Json{{"fan_in", l.fan_in},
                          {"fan_out", l.fan_out},
                          {"normalization", to_string(l.normalization)},
                          {"activation", l.activation ? to_json(*l.activation) : Json(nullptr)},
                          {"weight_multiplier", l.weight_multiplier},
                          {"bias_variance", l.bias_variance}});
  return Json{{"format", "nlc-architecture"},
              {"version", kFormatVersion},
              {"depth", s.depth},
              {"width", s.width},
              {"d_in", s.d_in},
              {"d_out", s.d_out},
              {"layers", std::move(layers)},
              {"skip", {{"enabled", s.skip.enabled}, {"strength", s.skip.strength}, {"start", to_string(s.skip.start)}}},
              {"seed", s.seed},
              {"budget", s.budget}};
}

inline ArchitectureSpec architecture_from_json(const Json& j) {
  return detail::json_errors([&] {
    detail::check_header(j, "nlc-architecture");
    ArchitectureSpec s;
    s.depth = j.at("depth").get<Index>();
    s.width = j.at("width").get<Index>();
    s.d_in = j.at("d_in").get<Index>();
    s.d_out = j.at("d_out").get<Index>();
    for (const auto& lj : j.at("layers")) {
      LayerSpec l;
      l.fan_in = lj.at("fan_in").get<Index>();
      l.fan_out = lj.at("fan_out").get<Index>();
      l.normalization = parse_normalization(lj.at("normalization").get<std::string>());
      if (!lj.at("activation").is_null()) l.activation = activation_from_json(lj.at("activation"));
      l.weight_multiplier = lj.at("weight_multiplier").get<double>();
      l.bias_variance = lj.at("bias_variance").get<double>();
      s.layers.push_back(l);
    }
    const auto& sk = j.at("skip");
    s.skip.enabled = sk.at("enabled").get<bool>();
    s.skip.strength = sk.at("strength").get<double>();
    s.skip.start = parse_skip_start(sk.at("start").get<std::string>());
    s.seed = j.at("seed").get<std::uint64_t>();
    s.budget = j.at("budget").get<Index>();
    validate(s);
    return s;
  });
}

inline Json to_json(const Network& net) {
  Json weights = Json::array(), biases = Json::array();
  for (const auto& w : net.weights) weights.push_back(detail::matrix_json(w));
  for (const auto& b : net.biases) biases.push_back(detail::vector_json(b));
  return Json{{"format", "nlc-network"},
              {"version", kFormatVersion},
              {"spec", to_json(net.spec)},
              {"c_loss", net.c_loss},
              {"norm_epsilon", net.norm_epsilon},
              {"weights", std::move(weights)},
              {"biases", std::move(biases)},
              {"skip_projection", detail::matrix_json(net.skip_projection)}};
}

inline Network network_from_json(const Json& j) {
  return detail::json_errors([&] {
    detail::check_header(j, "nlc-network");
    Network net = make_network(architecture_from_json(j.at("spec")));
    net.c_loss = j.at("c_loss").get<double>();
    net.norm_epsilon = j.at("norm_epsilon").get<double>();
    const auto& wj = j.at("weights");
    const auto& bj = j.at("biases");
    if (wj.size() != net.weights.size() || bj.size() != net.biases.size())
      throw ConsistencyError("network: layer count does not match the spec");
    for (std::size_t i = 0; i < net.weights.size(); ++i) {
      Matrix w = detail::matrix_from(wj[i]);
      Vector b = detail::vector_from(bj[i]);
      if (w.rows() != net.weights[i].rows() || w.cols() != net.weights[i].cols() || b.size() != net.biases[i].size())
        throw ConsistencyError("network: parameter shape does not match the spec in layer " + std::to_string(i));
      net.weights[i] = std::move(w);
      net.biases[i] = std::move(b);
    }
    Matrix p = detail::matrix_from(j.at("skip_projection"));
    if (p.rows() != net.skip_projection.rows() || p.cols() != net.skip_projection.cols())
      throw ConsistencyError("network: skip projection shape does not match the spec");
    net.skip_projection = std::move(p);
    return net;
  });
}

inline Json to_json(const Dataset& d) {
  return Json{{"format", "nlc-dataset"},
              {"version", kFormatVersion},
              {"name", d.name},
              {"n_classes", d.n_classes},
              {"pca_components", d.pca_components},
              {"inputs", detail::matrix_json(d.inputs)},
              {"labels", d.labels},
              {"splits", {{"train", d.splits.train}, {"val", d.splits.val}, {"test", d.splits.test}}}};
}

inline Dataset dataset_from_json(const Json& j) {
  return detail::json_errors([&] {
    detail::check_header(j, "nlc-dataset");
    Dataset d;
    d.name = j.at("name").get<std::string>();
    d.n_classes = j.at("n_classes").get<int>();
    d.pca_components = j.at("pca_components").get<Index>();
    d.inputs = detail::matrix_from(j.at("inputs"));
    d.labels = j.at("labels").get<std::vector<int>>();
    d.splits.train = j.at("splits").at("train").get<std::vector<Index>>();
    d.splits.val = j.at("splits").at("val").get<std::vector<Index>>();
    d.splits.test = j.at("splits").at("test").get<std::vector<Index>>();
    if (static_cast<Index>(d.labels.size()) != d.size()) throw ConsistencyError("dataset: label count mismatch");
    for (int l : d.labels)
      if (l < 0 || l >= d.n_classes) throw ConsistencyError("dataset: label out of range");
    for (const auto* s : {&d.splits.train, &d.splits.val, &d.splits.test})
      for (Index i : *s)
        if (i < 0 || i >= d.size()) throw ConsistencyError("dataset: split index out of range");
    if (d.splits.train.empty()) throw ConsistencyError("dataset: empty training split");
    d.stats = input_stats(d);
    return d;
  });
}

inline Json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  return detail::json_errors([&] { return Json::parse(in); });
}

/// Writes to a sibling temporary file and renames it into place.
inline void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw ConfigError("cannot write '" + tmp + "'");
    out << text;
    if (!out) throw ConfigError("write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw ConfigError("cannot move '" + tmp + "' into place");
}

inline void write_json(const std::string& path, const Json& j) { write_text_atomic(path, j.dump(1) + "\n"); }

inline const char* kMetricCsvHeader =
    "id,nlc,output_bias,gvcs,gvl,input_correlation,output_correlation,nonlinearity_median,perturbation_radius";

/// Absent optional metrics are written as empty cells.
inline void write_metric_row(std::ostream& out, const std::string& id, const MetricReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  out << id << ',' << format_double(r.nlc) << ',' << format_double(r.output_bias) << ',' << format_double(r.gvcs) << ','
      << format_double(r.gvl) << ',' << format_double(r.input_correlation) << ','
      << format_double(r.output_correlation) << ',' << opt(r.nonlinearity_median) << ','
      << opt(r.perturbation_radius) << '\n';
}

inline const char* kCurveCsvHeader = "run,lr0,selected,epoch,stage,lr,train_loss,train_error,val_error,diverged";

/// Per-epoch curves of every run of a learning-rate search.
inline void write_train_curves(std::ostream& out, const TrainResult& r) {
  out << kCurveCsvHeader << '\n';
  for (std::size_t k = 0; k < r.runs.size(); ++k) {
    const auto& run = r.runs[k];
    for (std::size_t e = 0; e < run.curve.size(); ++e) {
      const auto& ep = run.curve[e];
      out << k << ',' << format_double(run.lr0) << ',' << (static_cast<Index>(k) == r.selected) << ',' << e << ','
          << ep.stage << ',' << format_double(ep.lr) << ',' << format_double(ep.train_loss) << ','
          << format_double(ep.train_error) << ',' << format_double(ep.val_error) << ',' << ep.diverged << '\n';
    }
  }
}

inline const char* kRunCsvHeader = "run,lr0,selected,best_criterion,best_loss,train_error,val_error,test_error,diverged";

inline void write_train_runs(std::ostream& out, const TrainResult& r) {
  out << kRunCsvHeader << '\n';
  for (std::size_t k = 0; k < r.runs.size(); ++k) {
    const auto& run = r.runs[k];
    out << k << ',' << format_double(run.lr0) << ',' << (static_cast<Index>(k) == r.selected) << ','
        << format_double(run.best_criterion) << ',' << format_double(run.best_loss) << ','
        << format_double(run.train_error) << ',' << format_double(run.val_error) << ','
        << format_double(run.test_error) << ',' << run.diverged << '\n';
  }
}

}  // namespace nlc
