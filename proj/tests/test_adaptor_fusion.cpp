// Bottleneck adaptors, the norm-softmax head, fusion attention, and the
// structural equivalences between the fusion modes.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "grappa/adaptor.hpp"
#include "grappa/fusion.hpp"
#include "grappa/model.hpp"
#include "oracles.hpp"

using grappa::Mat;
using grappa::Vec;

namespace {

grappa::BackboneConfig tiny_cfg() {
  grappa::BackboneConfig cfg;
  cfg.image_h = cfg.image_w = 8;
  cfg.channels = 1;
  cfg.patch = 4;  // 4 patches, 5 tokens
  cfg.layers = 2;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.mlp_hidden = 32;
  cfg.validate();
  return cfg;
}

std::vector<grappa::Image> tiny_images(const grappa::BackboneConfig& cfg, int n,
                                       uint64_t seed) {
  grappa::Rng rng = grappa::Rng::stream(seed, "test-images");
  std::vector<grappa::Image> images;
  for (int i = 0; i < n; ++i) {
    grappa::Image img(cfg.image_h, cfg.image_w, cfg.channels);
    for (auto& p : img.pix) p = static_cast<float>(rng.uniform());
    images.push_back(std::move(img));
  }
  return images;
}

// Model with `n_sets` adaptor sets whose up-projections are randomized, so
// the adaptors are NOT identities and the sets differ from each other.
template <typename S>
grappa::GrappaModel<S> tiny_model(int n_sets, uint64_t seed) {
  grappa::GrappaModel<S> model;
  const grappa::BackboneConfig cfg = tiny_cfg();
  grappa::Rng rng = grappa::Rng::stream(seed, "test-model");
  model.backbone.setup(cfg, rng);
  model.backbone.frozen = true;
  model.adaptors.assign(static_cast<size_t>(n_sets), grappa::AdaptorSet<S>());
  for (int i = 0; i < n_sets; ++i) {
    model.adaptors[static_cast<size_t>(i)].setup(cfg.layers, cfg.dim, 4, rng, 0.02);
    for (auto& layer : model.adaptors[static_cast<size_t>(i)].layers)
      grappa::fill_trunc_normal(layer.up.W.v, rng, 0.05);
  }
  model.init_fusion_layers();
  return model;
}

}  // namespace

// ----------------------------------------------------------- adaptor layer

TEST_CASE("fresh adaptor is an exact identity in standalone form", "[adaptor]") {
  grappa::Rng rng = grappa::Rng::stream(5, "id");
  grappa::AdaptorLayer<float> a;
  a.setup(16, 4, rng, 0.02);
  Mat<float> x(7, 16);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(rng.normal());
  const Mat<float> out = a.forward(x);
  REQUIRE((out - x).cwiseAbs().maxCoeff() == 0.0f);  // bitwise: up starts at zero
  const Mat<float> core = a.core(x);
  REQUIRE(core.cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("adaptor bottleneck must be a strict reduction", "[adaptor]") {
  grappa::Rng rng(1);
  grappa::AdaptorLayer<float> a;
  REQUIRE_THROWS_AS(a.setup(16, 16, rng, 0.02), grappa::ConfigError);
  REQUIRE_THROWS_AS(a.setup(16, 0, rng, 0.02), grappa::ConfigError);
  REQUIRE_THROWS_AS(a.setup(16, 20, rng, 0.02), grappa::ConfigError);
}

TEST_CASE("adaptor gradients match finite differences", "[adaptor][grad]") {
  grappa::Rng rng = grappa::Rng::stream(17, "adaptor-grad");
  grappa::AdaptorLayer<double> a;
  a.setup(6, 2, rng, 0.2);
  grappa::fill_trunc_normal(a.up.W.v, rng, 0.3);  // leave the zero init
  Mat<double> x(4, 6), A(4, 6);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = rng.normal();

  std::vector<grappa::NamedParam<double>> params;
  a.collect("a", params);
  auto loss = [&]() {
    const Mat<double> y = a.forward(x);
    return (A.array() * y.array()).sum();
  };
  for (auto& np : params) np.p->zero_grad();
  grappa::AdaptorCache<double> cache;
  a.forward(x, &cache);
  a.core_backward(A, cache);  // residual d/dx does not touch parameters
  const auto res = oracle::fd_check(params, loss);
  INFO(res.worst_param);
  REQUIRE(res.max_rel_err < 1e-7);
}

// -------------------------------------------------------- norm-softmax head

TEST_CASE("norm-softmax loss matches a hand-computed scalar case", "[normsoftmax]") {
  // One sample, two classes, cosines (0.9, 0.1), gamma = 10, true class 0:
  // loss = -log(e^9 / (e^9 + e^1)) = log(1 + e^-8), computed independently.
  grappa::NormSoftmaxHead<double> head;
  head.W.setup(2, 3);
  head.W.v << 0.9, std::sqrt(1.0 - 0.81), 0.0,   // unit row, cos with z = 0.9
      0.1, 0.0, std::sqrt(1.0 - 0.01);           // unit row, cos with z = 0.1
  head.gamma = 10.0;
  Mat<double> z(1, 3);
  z << 1.0, 0.0, 0.0;
  const double expected = std::log1p(std::exp(-8.0));
  const double loss = grappa::norm_softmax_loss(head, z, {0});
  REQUIRE(loss == Catch::Approx(expected).epsilon(1e-12));
  REQUIRE(loss == Catch::Approx(3.354e-4).epsilon(1e-3));
  // Scaling the feature or the class rows changes nothing: only angles count.
  Mat<double> z2 = 7.5 * z;
  REQUIRE(grappa::norm_softmax_loss(head, z2, {0}) == Catch::Approx(expected).epsilon(1e-12));
  head.W.v.row(0) *= 3.0;
  head.W.v.row(1) *= 0.25;
  REQUIRE(grappa::norm_softmax_loss(head, z, {0}) == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("norm-softmax edge temperatures", "[normsoftmax]") {
  grappa::Rng rng = grappa::Rng::stream(23, "ns-edge");
  grappa::NormSoftmaxHead<double> head;
  head.setup(5, 8, 0.0, rng, 0.2);  // gamma = 0 -> uniform predictive
  Mat<double> z(3, 8);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng.normal();
  REQUIRE(grappa::norm_softmax_loss(head, z, {0, 3, 4}) ==
          Catch::Approx(std::log(5.0)).epsilon(1e-12));

  grappa::NormSoftmaxHead<double> one;
  one.setup(1, 8, 25.0, rng, 0.2);  // single class -> certain -> zero loss
  REQUIRE(grappa::norm_softmax_loss(one, z, {0, 0, 0}) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("norm-softmax rejects malformed inputs", "[normsoftmax]") {
  grappa::Rng rng(9);
  grappa::NormSoftmaxHead<double> head;
  head.setup(3, 4, 25.0, rng, 0.2);
  Mat<double> z = Mat<double>::Random(2, 4);
  REQUIRE_THROWS_AS(grappa::norm_softmax_loss(head, z, {0}), grappa::ShapeError);
  REQUIRE_THROWS_AS(grappa::norm_softmax_loss(head, z, {0, 3}), grappa::ConfigError);
  REQUIRE_THROWS_AS(grappa::norm_softmax_loss(head, z, {0, -1}), grappa::ConfigError);
  Mat<double> zero = z;
  zero.row(1).setZero();
  REQUIRE_THROWS_AS(grappa::norm_softmax_loss(head, zero, {0, 1}), grappa::DivergenceError);
}

TEST_CASE("norm-softmax gradients match finite differences", "[normsoftmax][grad]") {
  grappa::Rng rng = grappa::Rng::stream(29, "ns-grad");
  grappa::NormSoftmaxHead<double> head;
  head.setup(4, 6, 10.0, rng, 0.3);
  Mat<double> z(5, 6);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng.normal() + 0.5;
  const std::vector<int32_t> labels = {0, 2, 1, 3, 2};

  grappa::Param<double> zp;
  zp.setup(static_cast<int>(z.rows()), static_cast<int>(z.cols()));
  zp.v = z;
  std::vector<grappa::NamedParam<double>> params;
  head.collect("head", params);
  params.push_back({"z", &zp});

  auto loss = [&]() { return grappa::norm_softmax_loss(head, zp.v, labels); };
  for (auto& np : params) np.p->zero_grad();
  Mat<double> dz;
  const double l0 = grappa::norm_softmax_loss_grad(head, zp.v, labels, dz);
  zp.g = dz;
  REQUIRE(l0 == Catch::Approx(loss()).epsilon(1e-12));
  const auto res = oracle::fd_check(params, loss);
  INFO(res.worst_param);
  REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("norm-softmax prediction is the arg-max cosine class", "[normsoftmax]") {
  grappa::NormSoftmaxHead<float> head;
  head.W.setup(3, 2);
  head.W.v << 1.f, 0.f, 0.f, 1.f, -1.f, 0.f;
  head.gamma = 25.f;
  Mat<float> z(3, 2);
  z << 5.f, 0.1f,   // closest in angle to class 0
      0.2f, 9.f,    // class 1
      -3.f, 0.5f;   // class 2
  REQUIRE(grappa::norm_softmax_predict(head, z) == std::vector<int32_t>{0, 1, 2});
}

// -------------------------------------------------------------- token pool

TEST_CASE("token pooling averages the selected rows", "[fusion]") {
  Mat<float> tt(6, 2);  // batch 2, tokens 3
  tt << 0.f, 0.f, 1.f, 2.f, 5.f, 4.f, 10.f, 20.f, 30.f, 40.f, 50.f, 60.f;
  const Mat<float> with_cls = grappa::pool_tokens(tt, 2, 3, true);
  REQUIRE(with_cls(0, 0) == Catch::Approx(2.f));
  REQUIRE(with_cls(0, 1) == Catch::Approx(2.f));
  REQUIRE(with_cls(1, 0) == Catch::Approx(30.f));
  const Mat<float> no_cls = grappa::pool_tokens(tt, 2, 3, false);
  REQUIRE(no_cls(0, 0) == Catch::Approx(3.f));
  REQUIRE(no_cls(1, 1) == Catch::Approx(50.f));
  const Mat<float> two_rows = tt.topRows(2);
  REQUIRE_THROWS_AS(grappa::pool_tokens(two_rows, 2, 1, false), grappa::ShapeError);
}

TEST_CASE("token pooling backward distributes gradient uniformly", "[fusion][grad]") {
  Mat<double> dpooled(2, 3);
  dpooled << 3.0, 6.0, 9.0, -2.0, 0.0, 4.0;
  const Mat<double> dt = grappa::pool_tokens_backward(dpooled, 2, 4, false);
  REQUIRE(dt.rows() == 8);
  REQUIRE(dt.row(0).cwiseAbs().maxCoeff() == 0.0);  // class row excluded
  REQUIRE(dt(1, 0) == Catch::Approx(1.0));          // 3 / count(3)
  REQUIRE(dt(3, 2) == Catch::Approx(3.0));
  REQUIRE(dt(4, 0) == 0.0);
  REQUIRE(dt(5, 0) == Catch::Approx(-2.0 / 3.0));
  const Mat<double> dt_all = grappa::pool_tokens_backward(dpooled, 2, 4, true);
  REQUIRE(dt_all(0, 0) == Catch::Approx(0.75));
}

// --------------------------------------------------------------- attention

TEST_CASE("fusion attention matches a hand-unrolled two-adaptor case", "[fusion]") {
  grappa::FusionLayer<double> layer;
  layer.setup(2);
  layer.Q.v << 0.3, -0.5, 0.7, 0.1;
  layer.K.v << -0.2, 0.4, 0.6, 0.9;
  Mat<double> pooled_h(1, 2);
  pooled_h << 1.5, -0.5;
  std::vector<Mat<double>> pooled_U(2, Mat<double>(1, 2));
  pooled_U[0] << 0.8, 0.2;
  pooled_U[1] << -0.3, 1.1;

  // By hand: q = h Q, k_i = U_i K, logit_i = q . k_i / sqrt(2), softmax.
  const double q0 = 1.5 * 0.3 + (-0.5) * 0.7, q1 = 1.5 * (-0.5) + (-0.5) * 0.1;
  auto key = [&](double u0, double u1) {
    return std::pair<double, double>{u0 * -0.2 + u1 * 0.6, u0 * 0.4 + u1 * 0.9};
  };
  const auto [k00, k01] = key(0.8, 0.2);
  const auto [k10, k11] = key(-0.3, 1.1);
  const double s = 1.0 / std::sqrt(2.0);
  const double l0 = (q0 * k00 + q1 * k01) * s, l1 = (q0 * k10 + q1 * k11) * s;
  const double m = std::max(l0, l1);
  const double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);

  const Mat<double> alpha = grappa::fusion_attention_pooled(pooled_h, pooled_U, layer, true);
  REQUIRE(alpha(0, 0) == Catch::Approx(e0 / (e0 + e1)).epsilon(1e-12));
  REQUIRE(alpha(0, 1) == Catch::Approx(e1 / (e0 + e1)).epsilon(1e-12));

  // Without the sqrt-dim scale the logits double in magnitude -> new weights.
  const Mat<double> unscaled = grappa::fusion_attention_pooled(pooled_h, pooled_U, layer, false);
  const double u0 = std::exp(l0 / s - m / s), u1 = std::exp(l1 / s - m / s);
  REQUIRE(unscaled(0, 0) == Catch::Approx(u0 / (u0 + u1)).epsilon(1e-10));
  REQUIRE(unscaled(0, 0) != Catch::Approx(alpha(0, 0)).epsilon(1e-6));
}

TEST_CASE("zero-initialized attention is bitwise the uniform average", "[fusion]") {
  grappa::FusionLayer<float> layer;
  layer.setup(8);  // Param::setup zero-fills
  grappa::Rng rng = grappa::Rng::stream(3, "zero-attn");
  for (int n : {1, 2, 3, 5}) {
    Mat<float> pooled_h(4, 8);
    for (Eigen::Index i = 0; i < pooled_h.size(); ++i)
      pooled_h.data()[i] = static_cast<float>(rng.normal());
    std::vector<Mat<float>> pooled_U(static_cast<size_t>(n));
    for (auto& u : pooled_U) {
      u.resize(4, 8);
      for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = static_cast<float>(rng.normal());
    }
    const Mat<float> alpha = grappa::fusion_attention_pooled(pooled_h, pooled_U, layer, true);
    const Mat<float> uniform = grappa::uniform_alpha<float>(4, n);
    REQUIRE((alpha - uniform).cwiseAbs().maxCoeff() == 0.0f);
  }
}

TEST_CASE("attention weights always form a convex combination", "[fusion]") {
  grappa::Rng rng = grappa::Rng::stream(41, "simplex");
  grappa::FusionLayer<double> layer;
  layer.setup(6);
  for (int trial = 0; trial < 200; ++trial) {
    grappa::fill_trunc_normal(layer.Q.v, rng, 2.0);
    grappa::fill_trunc_normal(layer.K.v, rng, 2.0);
    const int n = 1 + static_cast<int>(rng.uniform_int(6));
    Mat<double> pooled_h(3, 6);
    for (Eigen::Index i = 0; i < pooled_h.size(); ++i) pooled_h.data()[i] = 5.0 * rng.normal();
    std::vector<Mat<double>> pooled_U(static_cast<size_t>(n));
    for (auto& u : pooled_U) {
      u.resize(3, 6);
      for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = 5.0 * rng.normal();
    }
    // The forward itself enforces the contract (throws on violation).
    const Mat<double> alpha =
        grappa::fusion_attention_pooled(pooled_h, pooled_U, layer, trial % 2 == 0);
    for (Eigen::Index b = 0; b < alpha.rows(); ++b)
      REQUIRE(alpha.row(b).sum() == Catch::Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("attention gradients match finite differences", "[fusion][grad]") {
  grappa::Rng rng = grappa::Rng::stream(47, "attn-grad");
  grappa::FusionLayer<double> layer;
  layer.setup(5);
  grappa::fill_trunc_normal(layer.Q.v, rng, 0.4);
  grappa::fill_trunc_normal(layer.K.v, rng, 0.4);
  const int B = 3, N = 3;
  grappa::Param<double> hp, up[N];
  hp.setup(B, 5);
  grappa::fill_trunc_normal(hp.v, rng, 1.0);
  for (auto& u : up) {
    u.setup(B, 5);
    grappa::fill_trunc_normal(u.v, rng, 1.0);
  }
  Mat<double> A(B, N);
  grappa::fill_trunc_normal(A, rng, 1.0);

  auto gather_U = [&]() {
    std::vector<Mat<double>> out;
    for (const auto& u : up) out.push_back(u.v);
    return out;
  };
  auto loss = [&]() {
    const Mat<double> alpha =
        grappa::fusion_attention_pooled(hp.v, gather_U(), layer, true);
    return (A.array() * alpha.array()).sum();
  };

  std::vector<grappa::NamedParam<double>> params;
  layer.collect("fusion", params);
  params.push_back({"pooled_h", &hp});
  for (int i = 0; i < N; ++i) params.push_back({"pooled_U" + std::to_string(i), &up[i]});

  for (auto& np : params) np.p->zero_grad();
  grappa::FusionAttnCache<double> cache;
  grappa::fusion_attention_pooled(hp.v, gather_U(), layer, true, &cache);
  Mat<double> dh;
  std::vector<Mat<double>> dU;
  grappa::fusion_attention_backward(A, cache, layer, true, dh, dU);
  hp.g = dh;
  for (int i = 0; i < N; ++i) up[i].g = dU[static_cast<size_t>(i)];

  const auto res = oracle::fd_check(params, loss);
  INFO(res.worst_param);
  REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("fuse_combine broadcasts per-image weights over token rows", "[fusion]") {
  // batch 2, tokens 2, D 2, N 2 — checked entry by entry.
  std::vector<Mat<double>> U(2, Mat<double>(4, 2));
  U[0] << 1, 0, 0, 1, 2, 0, 0, 2;
  U[1] << 10, 0, 0, 10, 20, 0, 0, 20;
  Mat<double> alpha(2, 2);
  alpha << 0.25, 0.75, 1.0, 0.0;
  Mat<double> x = Mat<double>::Constant(4, 2, 100.0);
  const Mat<double> out = grappa::fuse_combine(U, alpha, x, 2, 2);
  REQUIRE(out(0, 0) == Catch::Approx(100.0 + 0.25 * 1 + 0.75 * 10));
  REQUIRE(out(1, 1) == Catch::Approx(100.0 + 0.25 * 1 + 0.75 * 10));
  REQUIRE(out(2, 0) == Catch::Approx(100.0 + 1.0 * 2 + 0.0 * 20));
  REQUIRE(out(3, 1) == Catch::Approx(102.0));
  Mat<double> bad = Mat<double>::Zero(2, 3);
  REQUIRE_THROWS_AS(grappa::fuse_combine(U, bad, x, 2, 2), grappa::ShapeError);
}

// ----------------------------------------------- model-level equivalences

TEST_CASE("average fusion equals attention fusion at zero initialization", "[model]") {
  auto model = tiny_model<float>(3, 101);
  const auto images = tiny_images(model.backbone.cfg, 4, 7);
  model.set_mode(grappa::FuseMode::Attention);
  const Mat<float> z_attn = model.features(images);
  model.set_mode(grappa::FuseMode::Average);
  const Mat<float> z_avg = model.features(images);
  REQUIRE((z_attn - z_avg).cwiseAbs().maxCoeff() == 0.0f);  // bitwise
}

TEST_CASE("single-set fusion collapses to the standalone adaptor path", "[model]") {
  auto model = tiny_model<float>(1, 202);
  const auto images = tiny_images(model.backbone.cfg, 3, 11);
  model.set_mode(grappa::FuseMode::Average);  // N = 1: weight is exactly 1
  const Mat<float> z_avg = model.features(images);
  model.set_mode(grappa::FuseMode::Attention);
  const Mat<float> z_attn = model.features(images);
  model.set_mode(grappa::FuseMode::Single, 0);
  const Mat<float> z_single = model.features(images);
  // Same function, different association order of the residual adds.
  const float scale = z_single.cwiseAbs().maxCoeff();
  REQUIRE((z_avg - z_single).cwiseAbs().maxCoeff() <= 1e-5f * scale);
  REQUIRE((z_attn - z_avg).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("frozen mode ignores adaptors entirely", "[model]") {
  auto with = tiny_model<float>(2, 303);
  grappa::GrappaModel<float> bare;
  grappa::Rng rng = grappa::Rng::stream(303, "test-model");
  bare.backbone.setup(tiny_cfg(), rng);  // same stream -> identical backbone
  const auto images = tiny_images(tiny_cfg(), 3, 13);
  with.set_mode(grappa::FuseMode::Frozen);
  const Mat<float> a = with.features(images);
  const Mat<float> b = bare.features(images);
  REQUIRE((a - b).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("mode selection is validated", "[model]") {
  auto model = tiny_model<float>(2, 404);
  REQUIRE_THROWS_AS(model.set_mode(grappa::FuseMode::Single, 2), grappa::ConfigError);
  REQUIRE_THROWS_AS(model.set_mode(grappa::FuseMode::Single, -1), grappa::ConfigError);
  grappa::GrappaModel<float> empty;
  grappa::Rng rng(1);
  empty.backbone.setup(tiny_cfg(), rng);
  REQUIRE_THROWS_AS(empty.set_mode(grappa::FuseMode::Average), grappa::ConfigError);
  REQUIRE_THROWS_AS(empty.set_mode(grappa::FuseMode::Attention), grappa::ConfigError);
}

TEST_CASE("attention-mode gradients match finite differences end to end",
          "[model][grad]") {
  auto model = tiny_model<double>(2, 505);
  grappa::Rng rng = grappa::Rng::stream(55, "model-grad");
  const auto images = tiny_images(model.backbone.cfg, 2, 17);
  model.set_mode(grappa::FuseMode::Attention);
  // Give the fusion layers nonzero values so their gradients are generic.
  for (auto& f : model.fusion) {
    grappa::fill_trunc_normal(f.Q.v, rng, 0.2);
    grappa::fill_trunc_normal(f.K.v, rng, 0.2);
  }
  Mat<double> A(2, model.backbone.cfg.dim);
  grappa::fill_trunc_normal(A, rng, 1.0);

  auto loss = [&]() {
    const Mat<double> z = model.features(images);
    return (A.array() * z.array()).sum();
  };

  std::vector<grappa::NamedParam<double>> params = model.fusion_params();
  for (auto& np : model.all_adaptor_params()) params.push_back(np);

  model.zero_all_grads();
  grappa::ModelCache<double> cache;
  model.features(images, &cache);
  model.backward(A, cache);
  const auto res = oracle::fd_check(params, loss);
  INFO(res.worst_param);
  REQUIRE(res.max_rel_err < 1e-5);
}
