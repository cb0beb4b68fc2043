#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "grappa/nn.hpp"

namespace grappa {

// Projection head used only while training the fusion attention; discarded
// afterwards. Two linear layers with a GELU, hidden = output = 4*D at the
// default scale.
template <typename S>
struct Projector {
  Linear<S> fc1;
  Linear<S> fc2;

  void setup(int in_dim, int out_dim, Rng& rng, double std_dev) {
    fc1.setup(in_dim, out_dim, rng, std_dev);
    fc2.setup(out_dim, out_dim, rng, std_dev);
  }

  Mat<S> forward(const Mat<S>& z, MlpCache<S>* cache = nullptr) const {
    Mat<S> pre = fc1.forward(z, cache ? &cache->fc1 : nullptr);
    if (cache) cache->pre = pre;
    return fc2.forward(gelu(pre), cache ? &cache->fc2 : nullptr);
  }

  Mat<S> backward(const Mat<S>& dy, const MlpCache<S>& cache) {
    Mat<S> dact = fc2.backward(dy, cache.fc2);
    return fc1.backward(gelu_backward(cache.pre, dact), cache.fc1);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

template <typename S>
struct BarlowCache {
  Mat<S> a_hat;  // centered, column-normalized view A
  Mat<S> b_hat;
  Vec<S> na;     // column norms of the centered views (clamped)
  Vec<S> nb;
  Mat<S> C;      // cross-correlation
};

// Redundancy-reduction loss on two batches of projector outputs:
//   C_nm  = <a_col_n - mean, b_col_m - mean> / (|a_col_n| |b_col_m|)
//   loss  = sum_n (1 - C_nn)^2 + beta * sum_{n != m} C_nm^2
// Column norms are epsilon-clamped so constant dimensions stay finite.
template <typename S>
double barlow_twins_loss(const Mat<S>& a, const Mat<S>& b, double beta,
                         BarlowCache<S>* cache = nullptr) {
  const Eigen::Index B = a.rows(), D = a.cols();
  if (b.rows() != B || b.cols() != D) throw ShapeError("barlow: view shape mismatch");
  if (B < 2) throw ConfigError("barlow: batch must be >= 2");
  const S eps = static_cast<S>(1e-12);

  Mat<S> ac = a.rowwise() - a.colwise().mean();
  Mat<S> bc = b.rowwise() - b.colwise().mean();
  Vec<S> na(D), nb(D);
  for (Eigen::Index j = 0; j < D; ++j) {
    na(j) = std::max(ac.col(j).norm(), eps);
    nb(j) = std::max(bc.col(j).norm(), eps);
    ac.col(j) /= na(j);
    bc.col(j) /= nb(j);
  }
  Mat<S> C = ac.transpose() * bc;

  double on_diag = 0.0, off_diag = 0.0;
  for (Eigen::Index n = 0; n < D; ++n)
    for (Eigen::Index m = 0; m < D; ++m) {
      const double c = static_cast<double>(C(n, m));
      if (n == m)
        on_diag += (1.0 - c) * (1.0 - c);
      else
        off_diag += c * c;
    }
  if (cache) {
    cache->a_hat = std::move(ac);
    cache->b_hat = std::move(bc);
    cache->na = std::move(na);
    cache->nb = std::move(nb);
    cache->C = std::move(C);
  }
  return on_diag + beta * off_diag;
}

// Gradients w.r.t. both raw views.
template <typename S>
void barlow_twins_backward(double beta, const BarlowCache<S>& cache, Mat<S>& da,
                           Mat<S>& db) {
  const Eigen::Index B = cache.a_hat.rows(), D = cache.a_hat.cols();

  Mat<S> dC(D, D);
  for (Eigen::Index n = 0; n < D; ++n)
    for (Eigen::Index m = 0; m < D; ++m)
      dC(n, m) = (n == m) ? S(-2) * (S(1) - cache.C(n, m))
                          : S(2) * static_cast<S>(beta) * cache.C(n, m);

  // For u = v/|v| with upstream column gradient G: dv = (G - (G.u) u) / |v|;
  // then centering subtracts each column's mean gradient.
  Mat<S> Ga = cache.b_hat * dC.transpose();  // (B, D), column n = sum_m dC(n,m) b_hat_m
  Mat<S> Gb = cache.a_hat * dC;              // (B, D), column m = sum_n dC(n,m) a_hat_n
  da.resize(B, D);
  db.resize(B, D);
  for (Eigen::Index j = 0; j < D; ++j) {
    const S dot_a = Ga.col(j).dot(cache.a_hat.col(j));
    da.col(j) = (Ga.col(j) - dot_a * cache.a_hat.col(j)) / cache.na(j);
    const S dot_b = Gb.col(j).dot(cache.b_hat.col(j));
    db.col(j) = (Gb.col(j) - dot_b * cache.b_hat.col(j)) / cache.nb(j);
  }
  da.rowwise() -= da.colwise().mean();
  db.rowwise() -= db.colwise().mean();
}

}  // namespace grappa
