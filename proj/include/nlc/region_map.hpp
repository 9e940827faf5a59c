#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "nlc/error.hpp"
#include "nlc/network.hpp"
#include "nlc/tensor.hpp"

namespace nlc {

/// Argmax output class over a latitude/longitude grid of the unit sphere of
/// input combinations a x1 + b x2 + c x3, with Gaussian anchors x1..x3.
struct RegionMap {
  Index rows = 0;  // latitude cells
  Index cols = 0;  // longitude cells, 2 * rows
  std::vector<int> label;  // row-major
  Matrix anchors;          // d_in x 3

  int at(Index r, Index c) const { return label[static_cast<std::size_t>(r * cols + c)]; }
};

/// Unit vector at the centre of grid cell (r, c).
inline Eigen::Vector3d sphere_point(Index r, Index c, Index rows, Index cols) {
  const double theta = std::numbers::pi * (static_cast<double>(r) + 0.5) / static_cast<double>(rows);
  const double phi = 2 * std::numbers::pi * (static_cast<double>(c) + 0.5) / static_cast<double>(cols);
  return {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
}

/// The whole grid is evaluated as one batch.
inline RegionMap output_region_map(const Network& net, Rng& rng, Index resolution) {
  if (net.d_out() < 2) throw DimensionError("output_region_map: need at least two outputs");
  if (resolution < 2) throw ParameterError("output_region_map: resolution must be at least 2");
  RegionMap m;
  m.rows = resolution;
  m.cols = 2 * resolution;
  m.anchors = gaussian_matrix(net.d_in(), 3, rng);
  Matrix X(net.d_in(), m.rows * m.cols);
  for (Index r = 0; r < m.rows; ++r)
    for (Index c = 0; c < m.cols; ++c) X.col(r * m.cols + c) = m.anchors * sphere_point(r, c, m.rows, m.cols);
  const Matrix F = evaluate(net, X);
  m.label.resize(static_cast<std::size_t>(F.cols()));
  for (Index j = 0; j < F.cols(); ++j) {
    Index arg;
    F.col(j).maxCoeff(&arg);
    m.label[static_cast<std::size_t>(j)] = static_cast<int>(arg);
  }
  return m;
}

/// Connected same-label regions under 4-neighbourhoods; longitude wraps around.
inline Index count_regions(const RegionMap& m) {
  std::vector<char> seen(m.label.size(), 0);
  std::vector<Index> stack;
  Index regions = 0;
  for (Index start = 0; start < m.rows * m.cols; ++start) {
    if (seen[static_cast<std::size_t>(start)]) continue;
    ++regions;
    const int lab = m.label[static_cast<std::size_t>(start)];
    stack.push_back(start);
    seen[static_cast<std::size_t>(start)] = 1;
    while (!stack.empty()) {
      const Index cur = stack.back();
      stack.pop_back();
      const Index r = cur / m.cols, c = cur % m.cols;
      const Index nbr[4][2] = {{r - 1, c}, {r + 1, c}, {r, (c + 1) % m.cols}, {r, (c + m.cols - 1) % m.cols}};
      for (const auto& n : nbr) {
        if (n[0] < 0 || n[0] >= m.rows) continue;
        const Index k = n[0] * m.cols + n[1];
        if (seen[static_cast<std::size_t>(k)] || m.label[static_cast<std::size_t>(k)] != lab) continue;
        seen[static_cast<std::size_t>(k)] = 1;
        stack.push_back(k);
      }
    }
  }
  return regions;
}

}  // namespace nlc
