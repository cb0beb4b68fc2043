#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "grappa/checkpoint.hpp"
#include "grappa/common.hpp"
#include "grappa/rng.hpp"

namespace grappa {

// Frozen-model features for the unlabeled pool, with enough provenance to
// tie every downstream artifact back to the exact parameters that made it.
template <typename S>
struct FeatureStore {
  Mat<S> Z;                      // (n_images, D)
  std::vector<uint64_t> ids;     // stable image ids, no duplicates
  std::string model_fingerprint;
};

template <typename S>
struct PseudoLabelSet {
  int granularity = 0;  // position in the k ladder
  int k = 0;
  Mat<S> centroids;     // (k, D)
  std::vector<int32_t> assignment;
  double inertia = 0.0;
  int iterations = 0;
  uint64_t seed = 0;
  std::string model_fingerprint;
};

namespace detail {

// Distances are always accumulated in double, coordinate-by-coordinate, so
// results are reproducible across scalar types and trivially comparable with
// an elementwise oracle.
template <typename RowA, typename RowB>
double sqdist(const RowA& a, const RowB& b) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < a.size(); ++j) {
    const double d = static_cast<double>(a(j)) - static_cast<double>(b(j));
    s += d * d;
  }
  return s;
}

}  // namespace detail

// Nearest-centroid rule: Euclidean distance, ties broken by lowest index.
template <typename S>
std::vector<int32_t> assign(const Mat<S>& Z, const Mat<S>& centroids) {
  if (Z.cols() != centroids.cols())
    throw ShapeError("assign: feature/centroid dimension mismatch");
  std::vector<int32_t> labels(static_cast<size_t>(Z.rows()));
  for (Eigen::Index i = 0; i < Z.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int32_t arg = 0;
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
      const double d = detail::sqdist(Z.row(i), centroids.row(c));
      if (d < best) {
        best = d;
        arg = static_cast<int32_t>(c);
      }
    }
    labels[static_cast<size_t>(i)] = arg;
  }
  return labels;
}

// Lloyd's algorithm from k-means++ seeds.
//
// The per-iteration inertia sequence (measured at the assignment step) is
// asserted non-increasing — a genuine Lloyd invariant, checked with a 1-ulp
// style slack for floating-point summation.
template <typename S>
PseudoLabelSet<S> kmeans_fit(const Mat<S>& Z, int k, uint64_t seed, int max_iters = 100,
                             double tol = 1e-4) {
  const Eigen::Index n = Z.rows(), dim = Z.cols();
  if (k <= 0) throw ConfigError("kmeans: k must be positive");
  if (static_cast<Eigen::Index>(k) > n)
    throw ConfigError("kmeans: k exceeds number of points");
  if (max_iters < 1) throw ConfigError("kmeans: max_iters must be >= 1");
  check_finite(Z, "kmeans input");

  Mat<double> Zd = Z.template cast<double>();
  Rng rng = Rng::stream(seed, "kmeans++");

  // --- k-means++ seeding: D^2 sampling; if every remaining distance is zero
  // (duplicate points), fall back to a uniform draw over unchosen points.
  Mat<double> C(k, dim);
  std::vector<char> chosen(static_cast<size_t>(n), 0);
  {
    const Eigen::Index first = static_cast<Eigen::Index>(rng.uniform_int(static_cast<int64_t>(n)));
    C.row(0) = Zd.row(first);
    chosen[static_cast<size_t>(first)] = 1;
    std::vector<double> d2(static_cast<size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i)
      d2[static_cast<size_t>(i)] = detail::sqdist(Zd.row(i), C.row(0));
    for (int c = 1; c < k; ++c) {
      double total = 0.0;
      for (double v : d2) total += v;
      Eigen::Index pick = -1;
      if (total > 0.0) {
        const double r = rng.uniform() * total;
        double acc = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
          acc += d2[static_cast<size_t>(i)];
          if (r < acc) {
            pick = i;
            break;
          }
        }
        if (pick < 0) pick = n - 1;  // r landed on the boundary after rounding
      } else {
        std::vector<Eigen::Index> unchosen;
        for (Eigen::Index i = 0; i < n; ++i)
          if (!chosen[static_cast<size_t>(i)]) unchosen.push_back(i);
        pick = unchosen[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(unchosen.size())))];
      }
      C.row(c) = Zd.row(pick);
      chosen[static_cast<size_t>(pick)] = 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double d = detail::sqdist(Zd.row(i), C.row(c));
        if (d < d2[static_cast<size_t>(i)]) d2[static_cast<size_t>(i)] = d;
      }
    }
  }

  // --- Lloyd iterations.
  std::vector<int32_t> labels(static_cast<size_t>(n), 0);
  std::vector<double> dist(static_cast<size_t>(n), 0.0);
  double prev_inertia = std::numeric_limits<double>::infinity();
  int iters = 0;
  for (int it = 0; it < max_iters; ++it) {
    iters = it + 1;
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int32_t arg = 0;
      for (int c = 0; c < k; ++c) {
        const double d = detail::sqdist(Zd.row(i), C.row(c));
        if (d < best) {
          best = d;
          arg = static_cast<int32_t>(c);
        }
      }
      labels[static_cast<size_t>(i)] = arg;
      dist[static_cast<size_t>(i)] = best;
      inertia += best;
    }
    if (inertia > prev_inertia * (1.0 + 1e-12) + 1e-12)
      throw DivergenceError("kmeans: inertia increased at iteration " + std::to_string(it));
    prev_inertia = inertia;

    Mat<double> next = Mat<double>::Zero(k, dim);
    std::vector<int64_t> counts(static_cast<size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      next.row(labels[static_cast<size_t>(i)]) += Zd.row(i);
      counts[static_cast<size_t>(labels[static_cast<size_t>(i)])]++;
    }
    // Empty clusters are re-seeded from the point currently farthest from its
    // centroid; repeated empties take successively farther-ranked points.
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] > 0) {
        next.row(c) /= static_cast<double>(counts[static_cast<size_t>(c)]);
        continue;
      }
      Eigen::Index far = 0;
      double far_d = -1.0;
      for (Eigen::Index i = 0; i < n; ++i)
        if (dist[static_cast<size_t>(i)] > far_d) {
          far_d = dist[static_cast<size_t>(i)];
          far = i;
        }
      next.row(c) = Zd.row(far);
      dist[static_cast<size_t>(far)] = -1.0;  // spend this point
      labels[static_cast<size_t>(far)] = static_cast<int32_t>(c);
    }

    double max_shift = 0.0;
    for (int c = 0; c < k; ++c) {
      const double shift = std::sqrt(detail::sqdist(next.row(c), C.row(c)));
      if (shift > max_shift) max_shift = shift;
    }
    C = next;
    if (max_shift < tol) break;
  }

  // Store in the caller's scalar type and make the stored assignment exactly
  // the nearest-centroid rule on the stored values.
  PseudoLabelSet<S> out;
  out.k = k;
  out.seed = seed;
  out.iterations = iters;
  out.centroids = C.cast<S>();
  out.assignment = assign(Z, out.centroids);
  out.inertia = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    out.inertia += detail::sqdist(Z.row(i), out.centroids.row(out.assignment[static_cast<size_t>(i)]));
  return out;
}

// One independent k-means run per granularity; k list must be strictly
// increasing and fit the dataset.
template <typename S>
std::vector<PseudoLabelSet<S>> build_granularities(const Mat<S>& Z,
                                                   const std::vector<int>& k_list,
                                                   uint64_t seed, int max_iters = 100,
                                                   double tol = 1e-4) {
  if (k_list.empty()) throw ConfigError("build_granularities: empty k list");
  for (size_t i = 1; i < k_list.size(); ++i)
    if (k_list[i] <= k_list[i - 1])
      throw ConfigError("build_granularities: k list must be strictly increasing");
  if (static_cast<Eigen::Index>(k_list.back()) > Z.rows())
    throw ConfigError("build_granularities: largest k exceeds dataset size");
  std::vector<PseudoLabelSet<S>> out;
  out.reserve(k_list.size());
  for (size_t i = 0; i < k_list.size(); ++i) {
    uint64_t run_seed = Rng::stream(seed, "kmeans.k=" + std::to_string(k_list[i])).next_u64();
    PseudoLabelSet<S> set = kmeans_fit(Z, k_list[i], run_seed, max_iters, tol);
    set.granularity = static_cast<int>(i);
    out.push_back(std::move(set));
  }
  return out;
}

// ------------------------------------------------------------ artifact IO

template <typename S>
void save_pseudolabels(const std::string& path, const PseudoLabelSet<S>& set) {
  CheckpointWriter w("pseudolabels");
  w.manifest()["meta"] = {{"granularity", set.granularity}, {"k", set.k},
                          {"inertia", set.inertia},         {"iterations", set.iterations},
                          {"seed", set.seed},               {"model_fingerprint", set.model_fingerprint}};
  w.add_mat("centroids", set.centroids);
  w.add_i32("assignment", set.assignment);
  w.save(path);
}

template <typename S>
PseudoLabelSet<S> load_pseudolabels(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  if (ck.kind() != "pseudolabels") throw IoError("not a pseudolabel file: " + path);
  PseudoLabelSet<S> set;
  const auto& meta = ck.manifest().at("meta");
  set.granularity = meta.at("granularity");
  set.k = meta.at("k");
  set.inertia = meta.at("inertia");
  set.iterations = meta.at("iterations");
  set.seed = meta.at("seed");
  set.model_fingerprint = meta.value("model_fingerprint", "");
  set.centroids = ck.get_mat<S>("centroids");
  set.assignment = ck.get_i32("assignment");
  if (set.centroids.rows() != set.k) throw ShapeError("pseudolabel file: centroid count != k");
  return set;
}

template <typename S>
void save_features(const std::string& path, const FeatureStore<S>& store) {
  CheckpointWriter w("features");
  w.manifest()["meta"] = {{"model_fingerprint", store.model_fingerprint}};
  w.add_mat("Z", store.Z);
  w.add_u64("ids", store.ids);
  w.save(path);
}

template <typename S>
FeatureStore<S> load_features(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  if (ck.kind() != "features") throw IoError("not a feature file: " + path);
  FeatureStore<S> store;
  store.model_fingerprint = ck.manifest().at("meta").value("model_fingerprint", "");
  store.Z = ck.get_mat<S>("Z");
  store.ids = ck.get_u64("ids");
  if (store.ids.size() != static_cast<size_t>(store.Z.rows()))
    throw ShapeError("feature file: id count != row count");
  return store;
}

}  // namespace grappa
