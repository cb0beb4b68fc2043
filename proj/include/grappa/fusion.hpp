#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "grappa/nn.hpp"

namespace grappa {

// Per-layer fusion attention. Only Q and K exist — there is deliberately no
// value projection; the adaptor outputs themselves are the values. Zero init
// makes a fresh fusion layer exactly equivalent to uniform averaging.
template <typename S>
struct FusionLayer {
  Param<S> Q;  // (D, D)
  Param<S> K;  // (D, D)

  void setup(int dim) {
    Q.setup(dim, dim);
    K.setup(dim, dim);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) {
    out.push_back({prefix + ".Q", &Q});
    out.push_back({prefix + ".K", &K});
  }
};

// ------------------------------------------------------------- token pools

// Mean over each image's token rows; `include_class` controls whether local
// row 0 participates.
template <typename S>
Mat<S> pool_tokens(const Mat<S>& tt, int batch, int tokens, bool include_class) {
  const int first = include_class ? 0 : 1;
  const int count = tokens - first;
  if (count < 1) throw ShapeError("pool_tokens: nothing to pool");
  Mat<S> out(batch, tt.cols());
  for (int b = 0; b < batch; ++b)
    out.row(b) = tt.middleRows(static_cast<Eigen::Index>(b) * tokens + first, count)
                     .colwise()
                     .mean();
  return out;
}

template <typename S>
Mat<S> pool_tokens_backward(const Mat<S>& dpooled, int batch, int tokens,
                            bool include_class) {
  const int first = include_class ? 0 : 1;
  const int count = tokens - first;
  Mat<S> dt = Mat<S>::Zero(static_cast<Eigen::Index>(batch) * tokens, dpooled.cols());
  for (int b = 0; b < batch; ++b) {
    const auto row = dpooled.row(b) / static_cast<S>(count);
    for (int t = first; t < tokens; ++t)
      dt.row(static_cast<Eigen::Index>(b) * tokens + t) = row;
  }
  return dt;
}

// --------------------------------------------------------------- attention

template <typename S>
struct FusionAttnCache {
  Mat<S> pooled_h;                // (B, D)
  std::vector<Mat<S>> pooled_U;   // N entries, (B, D)
  Mat<S> q;                       // (B, D)
  std::vector<Mat<S>> key;        // N entries, (B, D)
  Mat<S> alpha;                   // (B, N)
};

// alpha = softmax_i( (pool(hbar) Q) . (pool(U_i) K) / sqrt(D) ), one weight
// per adaptor per image. Takes the already-pooled inputs; the model layer
// does the pooling so it can reuse the pooled values in its own backward.
template <typename S>
Mat<S> fusion_attention_pooled(const Mat<S>& pooled_h, const std::vector<Mat<S>>& pooled_U,
                               const FusionLayer<S>& layer, bool sqrt_dim_scaling,
                               FusionAttnCache<S>* cache = nullptr) {
  const Eigen::Index B = pooled_h.rows(), D = pooled_h.cols();
  const int N = static_cast<int>(pooled_U.size());
  if (N < 1) throw ShapeError("fusion_attention: need at least one adaptor");
  const S scale = sqrt_dim_scaling ? S(1) / std::sqrt(static_cast<S>(D)) : S(1);

  Mat<S> q = pooled_h * layer.Q.v;
  Mat<S> logits(B, N);
  std::vector<Mat<S>> key(static_cast<size_t>(N));
  for (int i = 0; i < N; ++i) {
    key[static_cast<size_t>(i)] = pooled_U[static_cast<size_t>(i)] * layer.K.v;
    for (Eigen::Index b = 0; b < B; ++b)
      logits(b, i) = q.row(b).dot(key[static_cast<size_t>(i)].row(b)) * scale;
  }
  Mat<S> alpha = softmax_rows(logits);

  // Contract asserted on every forward: a convex combination, always.
  for (Eigen::Index b = 0; b < B; ++b) {
    S sum = 0;
    for (int i = 0; i < N; ++i) {
      if (!(alpha(b, i) >= S(0)))
        throw DivergenceError("fusion attention produced a negative weight");
      sum += alpha(b, i);
    }
    if (std::abs(static_cast<double>(sum) - 1.0) > 1e-6)
      throw DivergenceError("fusion attention weights do not sum to 1");
  }

  if (cache) {
    cache->pooled_h = pooled_h;
    cache->pooled_U = pooled_U;
    cache->q = std::move(q);
    cache->key = std::move(key);
    cache->alpha = alpha;
  }
  return alpha;
}

// Given d loss / d alpha, accumulates Q/K gradients and returns the
// gradients w.r.t. the pooled query and pooled key inputs.
template <typename S>
void fusion_attention_backward(const Mat<S>& dalpha, const FusionAttnCache<S>& cache,
                               FusionLayer<S>& layer, bool sqrt_dim_scaling,
                               Mat<S>& dpooled_h, std::vector<Mat<S>>& dpooled_U) {
  const Eigen::Index B = cache.pooled_h.rows(), D = cache.pooled_h.cols();
  const int N = static_cast<int>(cache.pooled_U.size());
  const S scale = sqrt_dim_scaling ? S(1) / std::sqrt(static_cast<S>(D)) : S(1);

  Mat<S> dlogits = softmax_rows_backward(cache.alpha, dalpha);
  Mat<S> dq = Mat<S>::Zero(B, D);
  dpooled_U.assign(static_cast<size_t>(N), Mat<S>());
  for (int i = 0; i < N; ++i) {
    Mat<S> dk(B, D);
    const Mat<S>& ki = cache.key[static_cast<size_t>(i)];
    for (Eigen::Index b = 0; b < B; ++b) {
      dq.row(b) += dlogits(b, i) * scale * ki.row(b);
      dk.row(b) = dlogits(b, i) * scale * cache.q.row(b);
    }
    layer.K.g.noalias() += cache.pooled_U[static_cast<size_t>(i)].transpose() * dk;
    dpooled_U[static_cast<size_t>(i)] = dk * layer.K.v.transpose();
  }
  layer.Q.g.noalias() += cache.pooled_h.transpose() * dq;
  dpooled_h = dq * layer.Q.v.transpose();
}

// ----------------------------------------------------------------- combine

// h_out = sum_i alpha_i U_i + x, with each image's alpha row broadcast over
// its tokens. The uniform-alpha case IS the averaging fusion, so both paths
// share this exact code (and therefore the same rounding).
template <typename S>
Mat<S> fuse_combine(const std::vector<Mat<S>>& U, const Mat<S>& alpha, const Mat<S>& x,
                    int batch, int tokens) {
  const int N = static_cast<int>(U.size());
  if (alpha.rows() != batch || alpha.cols() != N)
    throw ShapeError("fuse_combine: alpha shape mismatch");
  Mat<S> out = x;
  for (int b = 0; b < batch; ++b) {
    auto block = out.middleRows(static_cast<Eigen::Index>(b) * tokens, tokens);
    for (int i = 0; i < N; ++i)
      block += alpha(b, i) * U[static_cast<size_t>(i)].middleRows(
                                 static_cast<Eigen::Index>(b) * tokens, tokens);
  }
  return out;
}

template <typename S>
Mat<S> uniform_alpha(int batch, int n_adaptors) {
  return Mat<S>::Constant(batch, n_adaptors, S(1) / static_cast<S>(n_adaptors));
}

}  // namespace grappa
