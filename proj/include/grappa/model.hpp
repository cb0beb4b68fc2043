#pragma once

#include <string>
#include <vector>

#include "grappa/adaptor.hpp"
#include "grappa/backbone.hpp"
#include "grappa/checkpoint.hpp"
#include "grappa/fusion.hpp"

namespace grappa {

// How adaptor outputs are folded back into the token stream at each layer.
enum class FuseMode {
  Frozen,     // plain backbone, adaptors ignored
  Single,     // one adaptor set, out = A(hbar) + hbar
  Average,    // all sets, uniform 1/N weights
  Attention,  // all sets, learned query-key weights
};

inline std::string to_string(FuseMode m) {
  switch (m) {
    case FuseMode::Frozen: return "frozen";
    case FuseMode::Single: return "single";
    case FuseMode::Average: return "average";
    default: return "attention";
  }
}

template <typename S>
struct LayerStepCache {
  VitLayerCache<S> vit;
  VitLayerOut<S> out;                 // x, y, hbar values
  std::vector<AdaptorCache<S>> ad;    // per adaptor set
  std::vector<Mat<S>> U;              // per adaptor set, (B*tokens, D)
  FusionAttnCache<S> attn;
  Mat<S> alpha;                       // (B, N)
};

template <typename S>
struct ModelCache {
  int batch = 0;
  int tokens = 0;
  LinearCache<S> embed;
  std::vector<LayerStepCache<S>> layers;
  LayerNormCache<S> final_ln;
};

// The single multi-task model: frozen backbone, N frozen adaptor sets, and
// per-layer fusion attention — plus the narrower configurations (frozen /
// single-adaptor / average) used as baselines and during Step 2.
template <typename S>
struct GrappaModel {
  Backbone<S> backbone;
  std::vector<AdaptorSet<S>> adaptors;
  std::vector<FusionLayer<S>> fusion;  // one per backbone layer
  FuseMode mode = FuseMode::Frozen;
  int single_index = 0;
  bool include_class_token = true;  // token pooling for attention
  bool sqrt_dim_scaling = true;

  int n_adaptors() const { return static_cast<int>(adaptors.size()); }

  void init_fusion_layers() {
    fusion.assign(static_cast<size_t>(backbone.cfg.layers), FusionLayer<S>());
    for (auto& f : fusion) f.setup(backbone.cfg.dim);
  }

  void set_mode(FuseMode m, int index = 0) {
    if (m == FuseMode::Single && (index < 0 || index >= n_adaptors()))
      throw ConfigError("model: single-adaptor index out of range");
    if ((m == FuseMode::Average || m == FuseMode::Attention) && adaptors.empty())
      throw ConfigError("model: fusion modes need at least one adaptor set");
    if (m == FuseMode::Attention && fusion.size() != static_cast<size_t>(backbone.cfg.layers))
      throw ConfigError("model: fusion layers not initialized");
    mode = m;
    single_index = index;
  }

  // Features f(x): (batch, D) class-token rows after the final LayerNorm.
  // Pass a cache to keep everything a backward pass needs.
  Mat<S> features(const std::vector<Image>& images, ModelCache<S>* cache = nullptr) const {
    const int batch = static_cast<int>(images.size());
    const int tokens = backbone.cfg.tokens();
    const int L = backbone.cfg.layers;
    const int N = n_adaptors();
    if (cache) {
      cache->batch = batch;
      cache->tokens = tokens;
      cache->layers.assign(static_cast<size_t>(L), LayerStepCache<S>());
    }

    Mat<S> h = backbone.embed(images, cache ? &cache->embed : nullptr);
    for (int l = 0; l < L; ++l) {
      LayerStepCache<S>* lc = cache ? &cache->layers[static_cast<size_t>(l)] : nullptr;
      VitLayerOut<S> out =
          backbone.layers[static_cast<size_t>(l)].forward(h, batch, tokens, lc ? &lc->vit : nullptr);

      switch (mode) {
        case FuseMode::Frozen:
          h = out.hbar;
          break;
        case FuseMode::Single: {
          const auto& layer = adaptors[static_cast<size_t>(single_index)].layers[static_cast<size_t>(l)];
          if (lc) lc->ad.assign(1, AdaptorCache<S>());
          h = layer.core(out.hbar, lc ? &lc->ad[0] : nullptr) + out.hbar;
          break;
        }
        case FuseMode::Average:
        case FuseMode::Attention: {
          std::vector<Mat<S>> U(static_cast<size_t>(N));
          if (lc) lc->ad.assign(static_cast<size_t>(N), AdaptorCache<S>());
          for (int i = 0; i < N; ++i) {
            const auto& layer = adaptors[static_cast<size_t>(i)].layers[static_cast<size_t>(l)];
            U[static_cast<size_t>(i)] =
                layer.core(out.hbar, lc ? &lc->ad[static_cast<size_t>(i)] : nullptr) + out.y;
          }
          Mat<S> alpha;
          if (mode == FuseMode::Attention) {
            Mat<S> pooled_h = pool_tokens(out.hbar, batch, tokens, include_class_token);
            std::vector<Mat<S>> pooled_U(static_cast<size_t>(N));
            for (int i = 0; i < N; ++i)
              pooled_U[static_cast<size_t>(i)] =
                  pool_tokens(U[static_cast<size_t>(i)], batch, tokens, include_class_token);
            alpha = fusion_attention_pooled(pooled_h, pooled_U, fusion[static_cast<size_t>(l)],
                                            sqrt_dim_scaling, lc ? &lc->attn : nullptr);
          } else {
            alpha = uniform_alpha<S>(batch, N);
          }
          h = fuse_combine(U, alpha, out.x, batch, tokens);
          if (lc) {
            lc->U = std::move(U);
            lc->alpha = alpha;
          }
          break;
        }
      }
      check_finite(h, "layer " + std::to_string(l) + " output");
      if (lc) lc->out = std::move(out);
    }

    Mat<S> n = backbone.final_ln.forward(h, cache ? &cache->final_ln : nullptr);
    Mat<S> z(batch, backbone.cfg.dim);
    for (int b = 0; b < batch; ++b) z.row(b) = n.row(static_cast<Eigen::Index>(b) * tokens);
    return z;
  }

  // Backprop d loss / d features through the whole stack. Gradients
  // accumulate into every touched Param; which of them a training step
  // consumes is decided by the optimizer's registry, and frozen-parameter
  // audits hash values, not gradients.
  void backward(const Mat<S>& dz, ModelCache<S>& cache) {
    const int batch = cache.batch, tokens = cache.tokens;
    const int L = backbone.cfg.layers;
    const int N = n_adaptors();

    Mat<S> dn = Mat<S>::Zero(static_cast<Eigen::Index>(batch) * tokens, backbone.cfg.dim);
    for (int b = 0; b < batch; ++b) dn.row(static_cast<Eigen::Index>(b) * tokens) = dz.row(b);
    Mat<S> dh = backbone.final_ln.backward(dn, cache.final_ln);

    for (int l = L - 1; l >= 0; --l) {
      LayerStepCache<S>& lc = cache.layers[static_cast<size_t>(l)];
      Mat<S> dx, dy;

      switch (mode) {
        case FuseMode::Frozen:
          dy = dh;
          dx = dh;
          break;
        case FuseMode::Single: {
          auto& layer = adaptors[static_cast<size_t>(single_index)].layers[static_cast<size_t>(l)];
          Mat<S> dhbar = dh + layer.core_backward(dh, lc.ad[0]);
          dy = dhbar;
          dx = std::move(dhbar);
          break;
        }
        case FuseMode::Average:
        case FuseMode::Attention: {
          // h = sum_i alpha_i U_i + x
          dx = dh;
          std::vector<Mat<S>> dU(static_cast<size_t>(N));
          for (int i = 0; i < N; ++i) {
            dU[static_cast<size_t>(i)].resize(dh.rows(), dh.cols());
            for (int b = 0; b < batch; ++b)
              dU[static_cast<size_t>(i)].middleRows(static_cast<Eigen::Index>(b) * tokens, tokens) =
                  lc.alpha(b, i) *
                  dh.middleRows(static_cast<Eigen::Index>(b) * tokens, tokens);
          }
          Mat<S> dhbar = Mat<S>::Zero(dh.rows(), dh.cols());
          if (mode == FuseMode::Attention) {
            Mat<S> dalpha(batch, N);
            for (int b = 0; b < batch; ++b)
              for (int i = 0; i < N; ++i)
                dalpha(b, i) = (dh.middleRows(static_cast<Eigen::Index>(b) * tokens, tokens).array() *
                                lc.U[static_cast<size_t>(i)]
                                    .middleRows(static_cast<Eigen::Index>(b) * tokens, tokens)
                                    .array())
                                   .sum();
            Mat<S> dpooled_h;
            std::vector<Mat<S>> dpooled_U;
            fusion_attention_backward(dalpha, lc.attn, fusion[static_cast<size_t>(l)],
                                      sqrt_dim_scaling, dpooled_h, dpooled_U);
            dhbar += pool_tokens_backward(dpooled_h, batch, tokens, include_class_token);
            for (int i = 0; i < N; ++i)
              dU[static_cast<size_t>(i)] +=
                  pool_tokens_backward(dpooled_U[static_cast<size_t>(i)], batch, tokens,
                                       include_class_token);
          }
          // U_i = core_i(hbar) + y
          dy = Mat<S>::Zero(dh.rows(), dh.cols());
          for (int i = 0; i < N; ++i) {
            auto& layer = adaptors[static_cast<size_t>(i)].layers[static_cast<size_t>(l)];
            dy += dU[static_cast<size_t>(i)];
            dhbar += layer.core_backward(dU[static_cast<size_t>(i)], lc.ad[static_cast<size_t>(i)]);
          }
          // hbar = y + x
          dy += dhbar;
          dx += dhbar;
          break;
        }
      }
      dh = backbone.layers[static_cast<size_t>(l)].backward(std::move(dx), dy, lc.vit);
    }
    backbone.embed_backward(dh, cache.batch, cache.embed);
  }

  // ------------------------------------------------------------ registries

  std::vector<NamedParam<S>> backbone_params() {
    std::vector<NamedParam<S>> out;
    backbone.collect("backbone", out);
    return out;
  }

  std::vector<NamedParam<S>> adaptor_params(int index) {
    std::vector<NamedParam<S>> out;
    adaptors.at(static_cast<size_t>(index)).collect("adaptor" + std::to_string(index), out);
    return out;
  }

  std::vector<NamedParam<S>> all_adaptor_params() {
    std::vector<NamedParam<S>> out;
    for (int i = 0; i < n_adaptors(); ++i)
      adaptors[static_cast<size_t>(i)].collect("adaptor" + std::to_string(i), out);
    return out;
  }

  std::vector<NamedParam<S>> fusion_params() {
    std::vector<NamedParam<S>> out;
    for (size_t l = 0; l < fusion.size(); ++l)
      fusion[l].collect("fusion.layer" + std::to_string(l), out);
    return out;
  }

  void zero_all_grads() {
    auto zero = [](std::vector<NamedParam<S>> params) {
      for (auto& np : params) np.p->zero_grad();
    };
    zero(backbone_params());
    zero(all_adaptor_params());
    zero(fusion_params());
  }
};

// --------------------------------------------------------------- artifacts

template <typename S>
void save_backbone(const std::string& path, GrappaModel<S>& model, uint64_t init_seed) {
  CheckpointWriter w("backbone");
  w.manifest()["config"] = model.backbone.cfg;
  w.manifest()["meta"] = {{"init_seed", init_seed}};
  w.add_params("", model.backbone_params());
  w.save(path);
}

template <typename S>
void load_backbone(const std::string& path, GrappaModel<S>& model) {
  Checkpoint ck = Checkpoint::load(path);
  if (ck.kind() != "backbone") throw IoError("not a backbone checkpoint: " + path);
  BackboneConfig cfg = ck.manifest().at("config").get<BackboneConfig>();
  cfg.validate();
  Rng rng(0);
  model.backbone.setup(cfg, rng);  // structure only; values overwritten next
  auto params = model.backbone_params();
  ck.load_params("", params);
  model.backbone.frozen = true;
}

// Build from a source spec: seeded random init or checkpoint file.
template <typename S>
void load_or_init_backbone(const BackboneConfig& cfg, const BackboneSource& source,
                           GrappaModel<S>& model) {
  source.validate();
  if (source.kind == "checkpoint") {
    load_backbone(source.path, model);
    if (model.backbone.cfg != cfg)
      throw ShapeError("backbone checkpoint config does not match pipeline config");
  } else {
    Rng rng = Rng::stream(source.seed, "backbone-init");
    model.backbone.setup(cfg, rng);
    model.backbone.frozen = true;
  }
  model.init_fusion_layers();
}

template <typename S>
void save_adaptor_set(const std::string& path, AdaptorSet<S>& set, const BackboneConfig& cfg,
                      int bottleneck) {
  CheckpointWriter w("adaptors");
  w.manifest()["meta"] = {{"granularity", set.granularity},
                          {"k", set.k},
                          {"seed", set.seed},
                          {"epochs_trained", set.epochs_trained},
                          {"pseudolabel_fingerprint", set.pseudolabel_fingerprint},
                          {"dim", cfg.dim},
                          {"layers", cfg.layers},
                          {"bottleneck", bottleneck}};
  std::vector<NamedParam<S>> params;
  set.collect("set", params);
  w.add_params("", params);
  w.save(path);
}

template <typename S>
AdaptorSet<S> load_adaptor_set(const std::string& path, const BackboneConfig& cfg) {
  Checkpoint ck = Checkpoint::load(path);
  if (ck.kind() != "adaptors") throw IoError("not an adaptor checkpoint: " + path);
  const auto& meta = ck.manifest().at("meta");
  if (meta.at("dim").get<int>() != cfg.dim || meta.at("layers").get<int>() != cfg.layers)
    throw ShapeError("adaptor checkpoint does not match backbone config");
  AdaptorSet<S> set;
  set.granularity = meta.at("granularity");
  set.k = meta.at("k");
  set.seed = meta.at("seed");
  set.epochs_trained = meta.at("epochs_trained");
  set.pseudolabel_fingerprint = meta.value("pseudolabel_fingerprint", "");
  Rng rng(0);
  set.setup(cfg.layers, cfg.dim, meta.at("bottleneck"), rng, 0.02);
  std::vector<NamedParam<S>> params;
  set.collect("set", params);
  ck.load_params("", params);
  return set;
}

template <typename S>
void save_fusion(const std::string& path, GrappaModel<S>& model, const std::string& variant,
                 uint64_t seed, const std::vector<std::string>& adaptor_fingerprints) {
  CheckpointWriter w("fusion");
  w.manifest()["meta"] = {{"variant", variant},
                          {"seed", seed},
                          {"dim", model.backbone.cfg.dim},
                          {"layers", model.backbone.cfg.layers},
                          {"adaptor_fingerprints", adaptor_fingerprints},
                          {"include_class_token", model.include_class_token},
                          {"sqrt_dim_scaling", model.sqrt_dim_scaling}};
  w.add_params("", model.fusion_params());
  w.save(path);
}

template <typename S>
void load_fusion(const std::string& path, GrappaModel<S>& model) {
  Checkpoint ck = Checkpoint::load(path);
  if (ck.kind() != "fusion") throw IoError("not a fusion checkpoint: " + path);
  const auto& meta = ck.manifest().at("meta");
  if (meta.at("dim").get<int>() != model.backbone.cfg.dim ||
      meta.at("layers").get<int>() != model.backbone.cfg.layers)
    throw ShapeError("fusion checkpoint does not match backbone config");
  model.init_fusion_layers();
  model.include_class_token = meta.value("include_class_token", true);
  model.sqrt_dim_scaling = meta.value("sqrt_dim_scaling", true);
  auto params = model.fusion_params();
  ck.load_params("", params);
}

}  // namespace grappa
