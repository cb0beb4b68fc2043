#pragma once

#include <algorithm>
#include <vector>

#include "grappa/common.hpp"
#include "grappa/kmeans.hpp"  // detail::sqdist

namespace grappa {

// Exact Euclidean nearest neighbors per node, self excluded, ties broken by
// lower id. Refreshed wholesale between training epochs; immutable otherwise.
struct NeighborGraph {
  int k_nn = 0;
  std::vector<std::vector<int32_t>> neighbors;  // n entries of exactly k_nn ids
  int epoch = -1;
};

template <typename S>
NeighborGraph build_knn_graph(const Mat<S>& Z, int k_nn) {
  const Eigen::Index n = Z.rows();
  if (k_nn < 1) throw ConfigError("knn: k_nn must be >= 1");
  if (static_cast<Eigen::Index>(k_nn) >= n)
    throw ConfigError("knn: k_nn must be smaller than the number of points");

  NeighborGraph g;
  g.k_nn = k_nn;
  g.neighbors.assign(static_cast<size_t>(n), {});
  std::vector<std::pair<double, int32_t>> cand;
  cand.reserve(static_cast<size_t>(n) - 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    cand.clear();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      cand.emplace_back(detail::sqdist(Z.row(i), Z.row(j)), static_cast<int32_t>(j));
    }
    std::partial_sort(cand.begin(), cand.begin() + k_nn, cand.end());
    auto& out = g.neighbors[static_cast<size_t>(i)];
    out.resize(static_cast<size_t>(k_nn));
    for (int k = 0; k < k_nn; ++k) out[static_cast<size_t>(k)] = cand[static_cast<size_t>(k)].second;
  }
  return g;
}

}  // namespace grappa
