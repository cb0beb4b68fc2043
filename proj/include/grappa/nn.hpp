#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "grappa/common.hpp"
#include "grappa/rng.hpp"

// Small neural-network blocks over row-major Eigen matrices.
//
// Conventions:
//  * activations are (rows, features); token batches are flattened to
//    (batch * tokens, dim) with the class token at local row 0 of each image
//    block (see TokenTensor).
//  * Linear uses the row-vector convention y = x * W + b with W of shape
//    (in, out).
//  * forward() is const and side-effect free; intermediate state a backward
//    pass needs goes into a caller-owned cache struct. backward() accumulates
//    parameter gradients (callers zero them between steps) and returns the
//    input gradient.

namespace grappa {

template <typename S>
struct Param {
  Mat<S> v;  // value
  Mat<S> g;  // gradient, same shape

  void setup(int rows, int cols) {
    v = Mat<S>::Zero(rows, cols);
    g = Mat<S>::Zero(rows, cols);
  }
  void zero_grad() { g.setZero(); }
  // 1-d parameters (biases, gains) are excluded from weight decay and from
  // LARS trust-ratio scaling.
  bool is_vector() const { return v.rows() == 1 || v.cols() == 1; }
  long size() const { return static_cast<long>(v.rows()) * v.cols(); }
};

template <typename S>
struct NamedParam {
  std::string name;
  Param<S>* p;
};

template <typename S>
void fill_trunc_normal(Mat<S>& m, Rng& rng, double std_dev) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      m(i, j) = static_cast<S>(rng.trunc_normal(std_dev));
}

// ----------------------------------------------------------------- Linear

template <typename S>
struct LinearCache {
  Mat<S> x;
};

template <typename S>
struct Linear {
  Param<S> W;  // (in, out)
  Param<S> b;  // (1, out)

  void setup(int in, int out, Rng& rng, double std_dev, bool zero_weights = false) {
    W.setup(in, out);
    b.setup(1, out);
    if (!zero_weights) fill_trunc_normal(W.v, rng, std_dev);
  }

  Mat<S> forward(const Mat<S>& x, LinearCache<S>* cache = nullptr) const {
    if (x.cols() != W.v.rows()) throw ShapeError("linear: input width mismatch");
    if (cache) cache->x = x;
    Mat<S> y = x * W.v;
    y.rowwise() += b.v.row(0);
    return y;
  }

  Mat<S> backward(const Mat<S>& dy, const LinearCache<S>& cache) {
    W.g.noalias() += cache.x.transpose() * dy;
    b.g.row(0) += dy.colwise().sum();
    return dy * W.v.transpose();
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) {
    out.push_back({prefix + ".W", &W});
    out.push_back({prefix + ".b", &b});
  }
};

// -------------------------------------------------------------- LayerNorm

template <typename S>
struct LayerNormCache {
  Mat<S> xhat;
  Vec<S> inv_std;
};

template <typename S>
struct LayerNorm {
  Param<S> gain;  // (1, D)
  Param<S> bias;  // (1, D)
  S eps = static_cast<S>(1e-6);

  void setup(int dim, double epsilon) {
    gain.setup(1, dim);
    gain.v.setOnes();
    bias.setup(1, dim);
    eps = static_cast<S>(epsilon);
  }

  Mat<S> forward(const Mat<S>& x, LayerNormCache<S>* cache = nullptr) const {
    const Eigen::Index rows = x.rows(), d = x.cols();
    if (d != gain.v.cols()) throw ShapeError("layernorm: width mismatch");
    Mat<S> xhat(rows, d);
    Vec<S> inv_std(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const S mu = x.row(r).mean();
      const S var = (x.row(r).array() - mu).square().sum() / static_cast<S>(d);
      const S is = S(1) / std::sqrt(var + eps);
      xhat.row(r) = (x.row(r).array() - mu) * is;
      inv_std(r) = is;
    }
    if (cache) {
      cache->xhat = xhat;
      cache->inv_std = inv_std;
    }
    Mat<S> y = xhat.array().rowwise() * gain.v.row(0).array();
    y.array().rowwise() += bias.v.row(0).array();
    return y;
  }

  Mat<S> backward(const Mat<S>& dy, const LayerNormCache<S>& cache) {
    const Eigen::Index rows = dy.rows(), d = dy.cols();
    gain.g.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    bias.g.row(0) += dy.colwise().sum();
    Mat<S> dx(rows, d);
    for (Eigen::Index r = 0; r < rows; ++r) {
      // dxhat = dy * gain; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
      Vec<S> dxhat = dy.row(r).cwiseProduct(gain.v.row(0));
      const S m1 = dxhat.mean();
      const S m2 = dxhat.cwiseProduct(cache.xhat.row(r)).mean();
      dx.row(r) =
          cache.inv_std(r) * (dxhat.array() - m1 - cache.xhat.row(r).array() * m2).matrix();
    }
    return dx;
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) {
    out.push_back({prefix + ".gain", &gain});
    out.push_back({prefix + ".bias", &bias});
  }
};

// ------------------------------------------------------------------- GELU

// Exact (erf-based) GELU: 0.5 x (1 + erf(x / sqrt(2))).
template <typename S>
Mat<S> gelu(const Mat<S>& x) {
  return x.unaryExpr([](S v) {
    return static_cast<S>(S(0.5) * v * (S(1) + std::erf(v / std::sqrt(S(2)))));
  });
}

template <typename S>
Mat<S> gelu_backward(const Mat<S>& x, const Mat<S>& dy) {
  const S inv_sqrt_2pi = static_cast<S>(0.3989422804014326779399);
  Mat<S> dx = x.unaryExpr([inv_sqrt_2pi](S v) {
    const S cdf = S(0.5) * (S(1) + std::erf(v / std::sqrt(S(2))));
    const S pdf = inv_sqrt_2pi * std::exp(S(-0.5) * v * v);
    return static_cast<S>(cdf + v * pdf);
  });
  return dx.array() * dy.array();
}

// ---------------------------------------------------------------- softmax

template <typename S>
Mat<S> softmax_rows(const Mat<S>& x) {
  Mat<S> p(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S mx = x.row(r).maxCoeff();
    p.row(r) = (x.row(r).array() - mx).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

// Given probabilities p = softmax(x) and dL/dp, returns dL/dx.
template <typename S>
Mat<S> softmax_rows_backward(const Mat<S>& p, const Mat<S>& dp) {
  Mat<S> dx(p.rows(), p.cols());
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const S dot = (dp.row(r).array() * p.row(r).array()).sum();
    dx.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
  }
  return dx;
}

// -------------------------------------------------------------------- MLP

template <typename S>
struct MlpCache {
  LinearCache<S> fc1;
  Mat<S> pre;  // fc1 output, pre-activation
  LinearCache<S> fc2;
};

template <typename S>
struct Mlp {
  Linear<S> fc1;  // D -> hidden
  Linear<S> fc2;  // hidden -> D

  void setup(int dim, int hidden, Rng& rng, double std_dev) {
    fc1.setup(dim, hidden, rng, std_dev);
    fc2.setup(hidden, dim, rng, std_dev);
  }

  Mat<S> forward(const Mat<S>& x, MlpCache<S>* cache = nullptr) const {
    Mat<S> pre = fc1.forward(x, cache ? &cache->fc1 : nullptr);
    if (cache) cache->pre = pre;
    Mat<S> act = gelu(pre);
    return fc2.forward(act, cache ? &cache->fc2 : nullptr);
  }

  Mat<S> backward(const Mat<S>& dy, const MlpCache<S>& cache) {
    Mat<S> dact = fc2.backward(dy, cache.fc2);
    Mat<S> dpre = gelu_backward(cache.pre, dact);
    return fc1.backward(dpre, cache.fc1);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

// -------------------------------------------- multi-headed self-attention

template <typename S>
struct MsaCache {
  LinearCache<S> qkv_in;
  Mat<S> qkv;                  // (batch*tokens, 3D)
  std::vector<Mat<S>> attn;    // batch*heads entries, each (tokens, tokens)
  LinearCache<S> proj_in;
  int batch = 0;
  int tokens = 0;
};

template <typename S>
struct Msa {
  int heads = 1;
  Linear<S> qkv;   // D -> 3D packed as [Q | K | V]
  Linear<S> proj;  // D -> D

  void setup(int dim, int n_heads, Rng& rng, double std_dev) {
    if (n_heads < 1 || dim % n_heads != 0)
      throw ConfigError("msa: dim must be divisible by heads");
    heads = n_heads;
    qkv.setup(dim, 3 * dim, rng, std_dev);
    proj.setup(dim, dim, rng, std_dev);
  }

  Mat<S> forward(const Mat<S>& x, int batch, int tokens,
                 MsaCache<S>* cache = nullptr) const {
    const int d = static_cast<int>(proj.W.v.rows());
    const int dh = d / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    if (x.rows() != static_cast<Eigen::Index>(batch) * tokens || x.cols() != d)
      throw ShapeError("msa: token tensor shape mismatch");

    Mat<S> packed = qkv.forward(x, cache ? &cache->qkv_in : nullptr);
    if (cache) {
      cache->qkv = packed;
      cache->attn.assign(static_cast<size_t>(batch) * heads, Mat<S>());
      cache->batch = batch;
      cache->tokens = tokens;
    }

    Mat<S> concat(x.rows(), d);
    for (int b = 0; b < batch; ++b) {
      const auto block = packed.middleRows(static_cast<Eigen::Index>(b) * tokens, tokens);
      auto out_block = concat.middleRows(static_cast<Eigen::Index>(b) * tokens, tokens);
      for (int h = 0; h < heads; ++h) {
        const auto Q = block.middleCols(h * dh, dh);
        const auto K = block.middleCols(d + h * dh, dh);
        const auto V = block.middleCols(2 * d + h * dh, dh);
        Mat<S> logits = (Q * K.transpose()) * scale;
        Mat<S> A = softmax_rows(logits);
        out_block.middleCols(h * dh, dh).noalias() = A * V;
        if (cache) cache->attn[static_cast<size_t>(b) * heads + h] = std::move(A);
      }
    }
    return proj.forward(concat, cache ? &cache->proj_in : nullptr);
  }

  Mat<S> backward(const Mat<S>& dy, const MsaCache<S>& cache) {
    const int d = static_cast<int>(proj.W.v.rows());
    const int dh = d / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    const int batch = cache.batch, tokens = cache.tokens;

    Mat<S> dconcat = proj.backward(dy, cache.proj_in);
    Mat<S> dpacked = Mat<S>::Zero(cache.qkv.rows(), cache.qkv.cols());
    for (int b = 0; b < batch; ++b) {
      const auto block = cache.qkv.middleRows(static_cast<Eigen::Index>(b) * tokens, tokens);
      auto dblock = dpacked.middleRows(static_cast<Eigen::Index>(b) * tokens, tokens);
      const auto dout = dconcat.middleRows(static_cast<Eigen::Index>(b) * tokens, tokens);
      for (int h = 0; h < heads; ++h) {
        const auto Q = block.middleCols(h * dh, dh);
        const auto K = block.middleCols(d + h * dh, dh);
        const auto V = block.middleCols(2 * d + h * dh, dh);
        const Mat<S>& A = cache.attn[static_cast<size_t>(b) * heads + h];
        const auto dO = dout.middleCols(h * dh, dh);
        Mat<S> dA = dO * V.transpose();
        Mat<S> dS = softmax_rows_backward(A, dA);
        dblock.middleCols(h * dh, dh).noalias() = (dS * K) * scale;
        dblock.middleCols(d + h * dh, dh).noalias() = (dS.transpose() * Q) * scale;
        dblock.middleCols(2 * d + h * dh, dh).noalias() = A.transpose() * dO;
      }
    }
    return qkv.backward(dpacked, cache.qkv_in);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) {
    qkv.collect(prefix + ".qkv", out);
    proj.collect(prefix + ".proj", out);
  }
};

}  // namespace grappa
