#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "grappa/config.hpp"
#include "grappa/nn.hpp"

namespace grappa {

// ----------------------------------------------------------- bottleneck

template <typename S>
struct AdaptorCache {
  LinearCache<S> down;
  Mat<S> pre;  // down output, pre-GELU
  LinearCache<S> up;
};

// Down-project, GELU, up-project. core() is the residual-free branch that
// gets stacked into the fusion tensor U; forward() is the standalone form
// with the input residual. The up-projection starts at zero so a freshly
// created adaptor is an exact identity in forward().
template <typename S>
struct AdaptorLayer {
  Linear<S> down;  // D -> D'
  Linear<S> up;    // D' -> D

  void setup(int dim, int bottleneck, Rng& rng, double std_dev) {
    if (bottleneck <= 0 || bottleneck >= dim)
      throw ConfigError("adaptor: bottleneck must satisfy 0 < D' < D");
    down.setup(dim, bottleneck, rng, std_dev);
    up.setup(bottleneck, dim, rng, std_dev, /*zero_weights=*/true);
  }

  Mat<S> core(const Mat<S>& x, AdaptorCache<S>* cache = nullptr) const {
    Mat<S> pre = down.forward(x, cache ? &cache->down : nullptr);
    if (cache) cache->pre = pre;
    return up.forward(gelu(pre), cache ? &cache->up : nullptr);
  }

  Mat<S> core_backward(const Mat<S>& dy, const AdaptorCache<S>& cache) {
    Mat<S> dact = up.backward(dy, cache.up);
    return down.backward(gelu_backward(cache.pre, dact), cache.down);
  }

  Mat<S> forward(const Mat<S>& x, AdaptorCache<S>* cache = nullptr) const {
    return core(x, cache) + x;
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) {
    down.collect(prefix + ".down", out);
    up.collect(prefix + ".up", out);
  }
};

// One adaptor per backbone layer, all tied to a single pseudo-label
// granularity and trained independently of every other set.
template <typename S>
struct AdaptorSet {
  int granularity = 0;
  int k = 0;  // pseudo-label count this set was trained against
  std::vector<AdaptorLayer<S>> layers;
  uint64_t seed = 0;
  int epochs_trained = 0;
  std::string pseudolabel_fingerprint;

  void setup(int num_layers, int dim, int bottleneck, Rng& rng, double std_dev) {
    layers.assign(num_layers, AdaptorLayer<S>());
    for (auto& l : layers) l.setup(dim, bottleneck, rng, std_dev);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) {
    for (size_t l = 0; l < layers.size(); ++l)
      layers[l].collect(prefix + ".layer" + std::to_string(l), out);
  }
};

// ------------------------------------------------------- norm-softmax head

// Cosine classifier: logits are gamma * cos(theta) between the L2-normalized
// feature and L2-normalized class rows. Used only during Step 2 / supervised
// fusion and discarded afterwards.
template <typename S>
struct NormSoftmaxHead {
  Param<S> W;  // (num_classes, D)
  S gamma = S(25);

  void setup(int num_classes, int dim, double gamma_, Rng& rng, double std_dev) {
    if (num_classes < 1) throw ConfigError("norm-softmax head: need >= 1 class");
    W.setup(num_classes, dim);
    fill_trunc_normal(W.v, rng, std_dev);
    gamma = static_cast<S>(gamma_);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) {
    out.push_back({prefix + ".W", &W});
  }
};

namespace detail {

template <typename S>
void normalize_rows_checked(const Mat<S>& m, Mat<S>& normed, Vec<S>& norms,
                            const char* what) {
  normed.resize(m.rows(), m.cols());
  norms.resize(m.rows());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const S n = m.row(r).norm();
    if (!(n > S(0)))
      throw DivergenceError(std::string("norm-softmax: zero-norm ") + what + " row " +
                            std::to_string(r));
    normed.row(r) = m.row(r) / n;
    norms(r) = n;
  }
}

}  // namespace detail

// Mean over the batch of -log softmax(gamma * cos)[label].
template <typename S>
double norm_softmax_loss(const NormSoftmaxHead<S>& head, const Mat<S>& z,
                         const std::vector<int32_t>& labels) {
  const Eigen::Index B = z.rows();
  if (static_cast<Eigen::Index>(labels.size()) != B)
    throw ShapeError("norm-softmax: label count != batch");
  Mat<S> zn, wn;
  Vec<S> zn_norms, wn_norms;
  detail::normalize_rows_checked(z, zn, zn_norms, "feature");
  detail::normalize_rows_checked(head.W.v, wn, wn_norms, "class");
  Mat<S> logits = (zn * wn.transpose()) * head.gamma;
  double loss = 0.0;
  for (Eigen::Index b = 0; b < B; ++b) {
    const int32_t y = labels[static_cast<size_t>(b)];
    if (y < 0 || y >= head.W.v.rows()) throw ConfigError("norm-softmax: label out of range");
    const S mx = logits.row(b).maxCoeff();
    double lse = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c)
      lse += std::exp(static_cast<double>(logits(b, c) - mx));
    loss += std::log(lse) + static_cast<double>(mx) - static_cast<double>(logits(b, y));
  }
  return loss / static_cast<double>(B);
}

// Loss plus gradients: accumulates d loss / d head.W into head.W.g and
// returns d loss / d z via dz.
template <typename S>
double norm_softmax_loss_grad(NormSoftmaxHead<S>& head, const Mat<S>& z,
                              const std::vector<int32_t>& labels, Mat<S>& dz) {
  const Eigen::Index B = z.rows(), k = head.W.v.rows();
  if (static_cast<Eigen::Index>(labels.size()) != B)
    throw ShapeError("norm-softmax: label count != batch");
  Mat<S> zn, wn;
  Vec<S> zn_norms, wn_norms;
  detail::normalize_rows_checked(z, zn, zn_norms, "feature");
  detail::normalize_rows_checked(head.W.v, wn, wn_norms, "class");
  Mat<S> logits = (zn * wn.transpose()) * head.gamma;

  Mat<S> p = softmax_rows(logits);
  double loss = 0.0;
  for (Eigen::Index b = 0; b < B; ++b) {
    const int32_t y = labels[static_cast<size_t>(b)];
    if (y < 0 || y >= k) throw ConfigError("norm-softmax: label out of range");
    const S mx = logits.row(b).maxCoeff();
    double lse = 0.0;
    for (Eigen::Index c = 0; c < k; ++c)
      lse += std::exp(static_cast<double>(logits(b, c) - mx));
    loss += std::log(lse) + static_cast<double>(mx) - static_cast<double>(logits(b, y));
  }
  loss /= static_cast<double>(B);

  // d loss / d cos = gamma * (softmax - onehot) / B
  Mat<S> dcos = p;
  for (Eigen::Index b = 0; b < B; ++b) dcos(b, labels[static_cast<size_t>(b)]) -= S(1);
  dcos *= head.gamma / static_cast<S>(B);

  // Through the two row normalizations: for u = v/|v| and upstream G,
  // dv = (G - (G.u) u) / |v|.
  dz.resize(B, z.cols());
  Mat<S> Gz = dcos * wn;  // (B, D)
  for (Eigen::Index b = 0; b < B; ++b) {
    const S dot = Gz.row(b).dot(zn.row(b));
    dz.row(b) = (Gz.row(b) - dot * zn.row(b)) / zn_norms(b);
  }
  Mat<S> Gw = dcos.transpose() * zn;  // (k, D)
  for (Eigen::Index c = 0; c < k; ++c) {
    const S dot = Gw.row(c).dot(wn.row(c));
    head.W.g.row(c) += (Gw.row(c) - dot * wn.row(c)) / wn_norms(c);
  }
  return loss;
}

// Arg-max cosine class prediction, for pseudo-label accuracy logging.
template <typename S>
std::vector<int32_t> norm_softmax_predict(const NormSoftmaxHead<S>& head, const Mat<S>& z) {
  Mat<S> zn, wn;
  Vec<S> zn_norms, wn_norms;
  detail::normalize_rows_checked(z, zn, zn_norms, "feature");
  detail::normalize_rows_checked(head.W.v, wn, wn_norms, "class");
  Mat<S> cos = zn * wn.transpose();
  std::vector<int32_t> pred(static_cast<size_t>(z.rows()));
  for (Eigen::Index b = 0; b < z.rows(); ++b) {
    Eigen::Index arg = 0;
    cos.row(b).maxCoeff(&arg);
    pred[static_cast<size_t>(b)] = static_cast<int32_t>(arg);
  }
  return pred;
}

}  // namespace grappa
