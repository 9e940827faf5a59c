#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Eigenvalues>

#include "nlc/error.hpp"
#include "nlc/tensor.hpp"

namespace nlc {

struct RawData {
  Matrix inputs;  // d_raw x N
  std::vector<int> labels;
  std::vector<std::string> label_names;  // label index -> original cell text
};

struct Splits {
  std::vector<Index> train, val, test;
};

struct InputStats {
  Vector mean;
  Matrix cov;
  Matrix factor;  // factor * factor^T == cov
};

struct Dataset {
  std::string name;
  Matrix inputs;  // d_in x N, preprocessed
  std::vector<int> labels;
  int n_classes = 0;
  Splits splits;
  InputStats stats;  // over the training split
  Index pca_components = 0;

  Index d_in() const { return inputs.rows(); }
  Index size() const { return inputs.cols(); }

  Matrix columns(std::span<const Index> idx) const {
    Matrix m(inputs.rows(), static_cast<Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) m.col(static_cast<Index>(j)) = inputs.col(idx[j]);
    return m;
  }
  std::vector<int> labels_of(std::span<const Index> idx) const {
    std::vector<int> out(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) out[j] = labels[static_cast<std::size_t>(idx[j])];
    return out;
  }
};

/// Contiguous [begin, end) ranges of size B covering n items. When the batch
/// couples its columns a short tail is dropped unless it is the only batch.
inline std::vector<std::pair<Index, Index>> batch_ranges(Index n, Index B, bool coupled) {
  if (B < 1) throw ParameterError("batch size must be positive");
  std::vector<std::pair<Index, Index>> out;
  for (Index s = 0; s < n; s += B) {
    const Index e = std::min(n, s + B);
    if (coupled && e - s < B && !out.empty()) break;
    out.emplace_back(s, e);
  }
  return out;
}

/// Random train/val/test split with the given fractions; the test split takes the rest.
inline Splits make_splits(Index n, double train_fraction, double val_fraction, Rng& rng) {
  if (train_fraction <= 0 || val_fraction < 0 || train_fraction + val_fraction > 1)
    throw ParameterError("make_splits: invalid fractions");
  auto perm = rng.permutation(n);
  const auto n_train = static_cast<Index>(std::llround(train_fraction * static_cast<double>(n)));
  const auto n_val = static_cast<Index>(std::llround(val_fraction * static_cast<double>(n)));
  if (n_train < 2 || n_train + n_val > n) throw ParameterError("make_splits: dataset too small for the split");
  Splits s;
  s.train.assign(perm.begin(), perm.begin() + n_train);
  s.val.assign(perm.begin() + n_train, perm.begin() + n_train + n_val);
  s.test.assign(perm.begin() + n_train + n_val, perm.end());
  return s;
}

/// Per-class random split: each class contributes its rounded share to every split,
/// so split class frequencies match the whole dataset to within one example per class.
inline Splits make_stratified_splits(const std::vector<int>& labels, double train_fraction, double val_fraction, Rng& rng) {
  if (train_fraction <= 0 || val_fraction < 0 || train_fraction + val_fraction > 1)
    throw ParameterError("make_stratified_splits: invalid fractions");
  int n_classes = 0;
  for (int y : labels) n_classes = std::max(n_classes, y + 1);
  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(n_classes));
  for (std::size_t j = 0; j < labels.size(); ++j) by_class[static_cast<std::size_t>(labels[j])].push_back(static_cast<Index>(j));
  Splits s;
  for (auto& members : by_class) {
    const auto perm = rng.permutation(static_cast<Index>(members.size()));
    const double n = static_cast<double>(members.size());
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * n));
    const auto n_val = std::min(members.size() - n_train, static_cast<std::size_t>(std::llround(val_fraction * n)));
    for (std::size_t k = 0; k < members.size(); ++k) {
      const Index j = members[static_cast<std::size_t>(perm[k])];
      (k < n_train ? s.train : k < n_train + n_val ? s.val : s.test).push_back(j);
    }
  }
  // Mixed order, so contiguous evaluation batches are not single-class.
  for (auto* part : {&s.train, &s.val, &s.test}) {
    const auto perm = rng.permutation(static_cast<Index>(part->size()));
    std::vector<Index> mixed(part->size());
    for (std::size_t k = 0; k < mixed.size(); ++k) mixed[k] = (*part)[static_cast<std::size_t>(perm[k])];
    *part = std::move(mixed);
  }
  if (s.train.size() < 2) throw ParameterError("make_stratified_splits: dataset too small for the split");
  return s;
}

/// Symmetric square root with negative eigenvalues clamped to zero.
inline Matrix psd_factor(const Matrix& cov) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  const Vector root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

inline InputStats input_stats(const Matrix& inputs, std::span<const Index> idx) {
  if (idx.size() < 2) throw StatisticsError("input_stats: need at least two training points");
  const auto n = static_cast<double>(idx.size());
  InputStats s;
  s.mean = Vector::Zero(inputs.rows());
  for (Index j : idx) s.mean += inputs.col(j);
  s.mean /= n;
  Matrix centered(inputs.rows(), static_cast<Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) centered.col(static_cast<Index>(j)) = inputs.col(idx[j]) - s.mean;
  s.cov = (centered * centered.transpose()) / n;
  s.cov = (0.5 * (s.cov + s.cov.transpose())).eval();
  s.factor = psd_factor(s.cov);
  return s;
}

inline InputStats input_stats(const Dataset& d) { return input_stats(d.inputs, d.splits.train); }

enum class Preprocessing {
  projection,   // per-input normalization, centering, PCA-sized random orthogonal projection, rescale
  standardize,  // per-feature mean/variance normalization only
};

struct PreprocessResult {
  Matrix inputs;
  Index components = 0;
};

/// Rescales so that the mean squared norm per dimension is one.
inline void normalize_second_moment(Matrix& x) {
  const double power = x.squaredNorm() / static_cast<double>(x.size());
  if (!(power > 0)) throw DegenerateError("preprocess: all inputs are zero");
  x /= std::sqrt(power);
}

inline PreprocessResult preprocess(const Matrix& raw, double variance_fraction, Rng& rng) {
  const Index d = raw.rows(), n = raw.cols();
  if (n < 2 || d < 2) throw DimensionError("preprocess: need at least two inputs of dimension two");
  if (!(variance_fraction > 0 && variance_fraction <= 1)) throw ParameterError("preprocess: invalid variance fraction");
  require_finite(raw, "preprocess input");

  Matrix x = raw;
  for (Index j = 0; j < n; ++j) {
    const double mu = x.col(j).mean();
    x.col(j).array() -= mu;
    const double sd = std::sqrt(x.col(j).squaredNorm() / static_cast<double>(d));
    if (!(sd > 0)) throw DegenerateError("preprocess: input " + std::to_string(j) + " has zero variance");
    x.col(j) /= sd;
  }
  const Vector feature_mean = x.rowwise().mean();
  x.colwise() -= feature_mean;

  const Matrix cov = (x * x.transpose()) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov, Eigen::EigenvaluesOnly);
  Vector ev = es.eigenvalues().reverse().cwiseMax(0.0);  // descending
  const double total = ev.sum();
  Index k = 0;
  double acc = 0;
  while (k < d && acc < variance_fraction * total * (1 - 1e-12)) acc += ev(k++);
  k = std::max<Index>(k, 1);

  const Matrix q = haar_orthogonal(d, rng);
  PreprocessResult r;
  r.inputs = q.leftCols(k).transpose() * x;
  r.components = k;
  normalize_second_moment(r.inputs);
  return r;
}

inline Matrix standardize_features(const Matrix& raw) {
  require_finite(raw, "standardize input");
  Matrix x = raw;
  const auto n = static_cast<double>(x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    x.row(i).array() -= mu;
    const double sd = std::sqrt(x.row(i).squaredNorm() / n);
    if (!(sd > 0)) throw DegenerateError("standardize: feature " + std::to_string(i) + " is constant");
    x.row(i) /= sd;
  }
  return x;
}

struct DatasetOptions {
  Preprocessing preprocessing = Preprocessing::projection;
  double variance_fraction = 0.99;
  double train_fraction = 0.6;
  double val_fraction = 0.2;
  bool stratified = false;
};

inline Dataset make_dataset(const RawData& raw, const DatasetOptions& opt, Rng& rng, std::string name = "dataset") {
  if (static_cast<Index>(raw.labels.size()) != raw.inputs.cols())
    throw DimensionError("make_dataset: label count does not match inputs");
  Dataset d;
  d.name = std::move(name);
  Rng proj = rng.substream("projection");
  Rng split = rng.substream("splits");
  if (opt.preprocessing == Preprocessing::projection) {
    auto r = preprocess(raw.inputs, opt.variance_fraction, proj);
    d.inputs = std::move(r.inputs);
    d.pca_components = r.components;
  } else {
    d.inputs = standardize_features(raw.inputs);
    d.pca_components = d.inputs.rows();
  }
  d.labels = raw.labels;
  d.n_classes = 0;
  for (int y : d.labels) {
    if (y < 0) throw DimensionError("make_dataset: negative label");
    d.n_classes = std::max(d.n_classes, y + 1);
  }
  d.n_classes = std::max<int>(d.n_classes, static_cast<int>(raw.label_names.size()));
  d.splits = opt.stratified ? make_stratified_splits(d.labels, opt.train_fraction, opt.val_fraction, split)
                            : make_splits(d.inputs.cols(), opt.train_fraction, opt.val_fraction, split);
  d.stats = input_stats(d);
  return d;
}

/// Class-conditional unit-covariance Gaussians whose means are pairwise `separation` apart.
inline RawData synth_gaussian_raw(Index d_in, int n_classes, Index n, double separation, Rng& rng) {
  if (n_classes < 2) throw ParameterError("synth_gaussian_classes: need at least two classes");
  if (d_in < n_classes) throw DimensionError("synth_gaussian_classes: need d_in >= n_classes");
  if (separation < 0) throw ParameterError("synth_gaussian_classes: negative separation");
  Rng dir_rng = rng.substream("directions");
  const Matrix dirs = haar_orthogonal(d_in, dir_rng).leftCols(n_classes);
  Rng noise = rng.substream("noise");
  RawData r;
  r.inputs = gaussian_matrix(d_in, n, noise);
  r.labels.resize(static_cast<std::size_t>(n));
  for (Index j = 0; j < n; ++j) {
    const int y = static_cast<int>(j % n_classes);
    r.labels[static_cast<std::size_t>(j)] = y;
    r.inputs.col(j) += (separation / std::numbers::sqrt2) * dirs.col(y);
  }
  for (int c = 0; c < n_classes; ++c) r.label_names.push_back(std::to_string(c));
  return r;
}

inline Dataset synth_gaussian_classes(Index d_in, int n_classes, Index n, double separation, Rng& rng,
                                      const DatasetOptions& opt = {}) {
  const RawData raw = synth_gaussian_raw(d_in, n_classes, n, separation, rng);
  Rng prep = rng.substream("preprocess");
  return make_dataset(raw, opt, prep, "gaussian_classes");
}

/// Breiman's waveform generator with 19 appended pure-noise features (40 inputs, 3 classes).
inline RawData synth_waveform_noise(Index n, Rng& rng) {
  auto h = [](int center, int i) { return std::max(6.0 - std::abs(i - center), 0.0); };
  static constexpr int kCenters[3] = {11, 15, 7};
  static constexpr int kPairs[3][2] = {{0, 1}, {0, 2}, {1, 2}};
  RawData r;
  r.inputs.resize(40, n);
  r.labels.resize(static_cast<std::size_t>(n));
  for (Index j = 0; j < n; ++j) {
    const int y = static_cast<int>(rng.index(3));
    const double u = rng.uniform();
    for (int i = 1; i <= 21; ++i)
      r.inputs(i - 1, j) = u * h(kCenters[kPairs[y][0]], i) + (1 - u) * h(kCenters[kPairs[y][1]], i) + rng.normal();
    for (int i = 21; i < 40; ++i) r.inputs(i, j) = rng.normal();
    r.labels[static_cast<std::size_t>(j)] = y;
  }
  r.label_names = {"0", "1", "2"};
  return r;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  cells.push_back(trim(cur));
  return cells;
}

inline std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  double v = 0;
  const char* b = s.data();
  const char* e = b + s.size();
  if (*b == '+') ++b;
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e) return std::nullopt;
  return v;
}

}  // namespace detail

/// Label column by zero-based index (negative counts from the end) or header name.
using LabelColumn = std::variant<long, std::string>;

struct CsvOptions {
  LabelColumn label = -1L;
  std::optional<bool> header;                   // auto-detected when unset
  std::vector<std::string> allowed_labels;      // empty: accept any
};

/// Rectangular numeric CSV with one label column. Labels map to indices in sorted
/// order (numeric order when every label is numeric).
inline RawData parse_csv(std::istream& in, const CsvOptions& opt = {}) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_no;
  std::string line;
  std::size_t ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (detail::trim(line).empty()) continue;
    rows.push_back(detail::split_csv_line(line));
    line_no.push_back(ln);
  }
  if (rows.empty()) throw ParseError(0, 0, "empty CSV");
  const std::size_t width = rows.front().size();
  if (width < 2) throw ParseError(line_no.front(), 1, "need at least one feature and one label column");

  bool header = false;
  if (opt.header) {
    header = *opt.header;
  } else if (std::holds_alternative<std::string>(opt.label)) {
    header = true;
  } else {
    for (const auto& c : rows.front())
      if (!detail::parse_number(c)) header = true;
    // A lone non-numeric label cell does not make a header.
    if (header) {
      const long li = std::get<long>(opt.label);
      const std::size_t lc = li < 0 ? width - static_cast<std::size_t>(-li) : static_cast<std::size_t>(li);
      std::size_t non_numeric = 0;
      for (std::size_t c = 0; c < width; ++c)
        if (c != lc && !detail::parse_number(rows.front()[c])) ++non_numeric;
      header = non_numeric > 0;
    }
  }

  std::size_t label_col = 0;
  if (const auto* name = std::get_if<std::string>(&opt.label)) {
    if (!header) throw ParseError(line_no.front(), 1, "label column given by name but the file has no header");
    auto it = std::find(rows.front().begin(), rows.front().end(), *name);
    if (it == rows.front().end()) throw ParseError(line_no.front(), 1, "no column named '" + *name + "'");
    label_col = static_cast<std::size_t>(it - rows.front().begin());
  } else {
    const long li = std::get<long>(opt.label);
    if (li >= static_cast<long>(width) || -li > static_cast<long>(width))
      throw ParseError(line_no.front(), 1, "label column index out of range");
    label_col = li < 0 ? width - static_cast<std::size_t>(-li) : static_cast<std::size_t>(li);
  }

  const std::size_t first = header ? 1 : 0;
  const std::size_t n = rows.size() - first;
  if (n == 0) throw ParseError(line_no.front(), 1, "no data rows");
  RawData r;
  r.inputs.resize(static_cast<Index>(width - 1), static_cast<Index>(n));
  std::vector<std::string> label_cells(n);
  const std::set<std::string> allowed(opt.allowed_labels.begin(), opt.allowed_labels.end());
  for (std::size_t k = 0; k < n; ++k) {
    const auto& row = rows[first + k];
    const std::size_t l = line_no[first + k];
    if (row.size() != width)
      throw ParseError(l, std::min(row.size(), width) + 1,
                       "expected " + std::to_string(width) + " cells, found " + std::to_string(row.size()));
    Index f = 0;
    for (std::size_t c = 0; c < width; ++c) {
      if (c == label_col) {
        if (!allowed.empty() && !allowed.count(row[c])) throw ParseError(l, c + 1, "unknown label '" + row[c] + "'");
        label_cells[k] = row[c];
        continue;
      }
      const auto v = detail::parse_number(row[c]);
      if (!v || !std::isfinite(*v)) throw ParseError(l, c + 1, "non-numeric cell '" + row[c] + "'");
      r.inputs(f++, static_cast<Index>(k)) = *v;
    }
  }

  std::vector<std::string> names(label_cells.begin(), label_cells.end());
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  const bool numeric = std::all_of(names.begin(), names.end(), [](const auto& s) { return detail::parse_number(s).has_value(); });
  if (numeric)
    std::sort(names.begin(), names.end(),
              [](const auto& a, const auto& b) { return *detail::parse_number(a) < *detail::parse_number(b); });
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < names.size(); ++i) index[names[i]] = static_cast<int>(i);
  r.labels.resize(n);
  for (std::size_t k = 0; k < n; ++k) r.labels[k] = index.at(label_cells[k]);
  r.label_names = std::move(names);
  return r;
}

inline RawData load_csv(const std::string& path, const CsvOptions& opt = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  return parse_csv(in, opt);
}

inline void write_csv(std::ostream& out, const RawData& raw) {
  out.precision(17);
  for (Index i = 0; i < raw.inputs.rows(); ++i) out << "x" << i << ",";
  out << "label\n";
  for (Index j = 0; j < raw.inputs.cols(); ++j) {
    for (Index i = 0; i < raw.inputs.rows(); ++i) out << raw.inputs(i, j) << ",";
    out << raw.label_names[static_cast<std::size_t>(raw.labels[static_cast<std::size_t>(j)])] << "\n";
  }
}

}  // namespace nlc
