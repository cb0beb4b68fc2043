#pragma once

#include <string>
#include <vector>

#include "grappa/config.hpp"
#include "grappa/image.hpp"
#include "grappa/nn.hpp"

namespace grappa {

// --------------------------------------------------------------- patchify

// (batch of HWC images) -> (batch*T, P^2*C) patch rows. Patches are ordered
// row-major over the patch grid; within a patch, pixels row-major with
// channels interleaved, so unpatchify is a pure index permutation.
template <typename S>
Mat<S> patchify(const std::vector<Image>& images, const BackboneConfig& cfg) {
  cfg.validate();
  const int gh = cfg.image_h / cfg.patch, gw = cfg.image_w / cfg.patch;
  const int T = gh * gw, pd = cfg.patch_dim();
  Mat<S> out(static_cast<Eigen::Index>(images.size()) * T, pd);
  for (size_t b = 0; b < images.size(); ++b) {
    const Image& img = images[b];
    if (img.h != cfg.image_h || img.w != cfg.image_w || img.c != cfg.channels)
      throw ShapeError("patchify: image does not match config size");
    for (int pr = 0; pr < gh; ++pr)
      for (int pc = 0; pc < gw; ++pc) {
        const Eigen::Index row = static_cast<Eigen::Index>(b) * T + pr * gw + pc;
        for (int py = 0; py < cfg.patch; ++py)
          for (int px = 0; px < cfg.patch; ++px)
            for (int ch = 0; ch < cfg.channels; ++ch)
              out(row, (py * cfg.patch + px) * cfg.channels + ch) =
                  static_cast<S>(img.at(pr * cfg.patch + py, pc * cfg.patch + px, ch));
      }
  }
  return out;
}

template <typename S>
std::vector<Image> unpatchify(const Mat<S>& patches, const BackboneConfig& cfg) {
  const int gh = cfg.image_h / cfg.patch, gw = cfg.image_w / cfg.patch;
  const int T = gh * gw;
  if (patches.rows() % T != 0 || patches.cols() != cfg.patch_dim())
    throw ShapeError("unpatchify: row/col count does not match config");
  const size_t batch = static_cast<size_t>(patches.rows() / T);
  std::vector<Image> images(batch, Image(cfg.image_h, cfg.image_w, cfg.channels));
  for (size_t b = 0; b < batch; ++b)
    for (int pr = 0; pr < gh; ++pr)
      for (int pc = 0; pc < gw; ++pc) {
        const Eigen::Index row = static_cast<Eigen::Index>(b) * T + pr * gw + pc;
        for (int py = 0; py < cfg.patch; ++py)
          for (int px = 0; px < cfg.patch; ++px)
            for (int ch = 0; ch < cfg.channels; ++ch)
              images[b].at(pr * cfg.patch + py, pc * cfg.patch + px, ch) =
                  static_cast<float>(patches(row, (py * cfg.patch + px) * cfg.channels + ch));
      }
  return images;
}

// ---------------------------------------------------------------- ViT layer

// One pre-norm transformer block, exposing the three activations downstream
// code needs separately:
//   x    = MSA(LN1(h_prev)) + h_prev     (post-attention state)
//   y    = MLP(LN2(x))                   (MLP branch, before its residual)
//   hbar = y + x                         (plain block output)
template <typename S>
struct VitLayerOut {
  Mat<S> x;
  Mat<S> y;
  Mat<S> hbar;
};

template <typename S>
struct VitLayerCache {
  LayerNormCache<S> ln1;
  MsaCache<S> msa;
  LayerNormCache<S> ln2;
  MlpCache<S> mlp;
};

template <typename S>
struct VitLayer {
  LayerNorm<S> ln1, ln2;
  Msa<S> msa;
  Mlp<S> mlp;

  void setup(const BackboneConfig& cfg, Rng& rng) {
    ln1.setup(cfg.dim, cfg.ln_eps);
    ln2.setup(cfg.dim, cfg.ln_eps);
    msa.setup(cfg.dim, cfg.heads, rng, cfg.init_std);
    mlp.setup(cfg.dim, cfg.mlp_hidden, rng, cfg.init_std);
  }

  VitLayerOut<S> forward(const Mat<S>& h_prev, int batch, int tokens,
                         VitLayerCache<S>* cache = nullptr) const {
    VitLayerOut<S> out;
    Mat<S> n1 = ln1.forward(h_prev, cache ? &cache->ln1 : nullptr);
    out.x = msa.forward(n1, batch, tokens, cache ? &cache->msa : nullptr) + h_prev;
    Mat<S> n2 = ln2.forward(out.x, cache ? &cache->ln2 : nullptr);
    out.y = mlp.forward(n2, cache ? &cache->mlp : nullptr);
    out.hbar = out.y + out.x;
    return out;
  }

  // dx: gradient w.r.t. x (all residual contributions already summed in);
  // dy: gradient w.r.t. y. Returns gradient w.r.t. h_prev.
  Mat<S> backward(Mat<S> dx, const Mat<S>& dy, const VitLayerCache<S>& cache) {
    dx += ln2.backward(mlp.backward(dy, cache.mlp), cache.ln2);
    return dx + ln1.backward(msa.backward(dx, cache.msa), cache.ln1);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) {
    ln1.collect(prefix + ".ln1", out);
    msa.collect(prefix + ".msa", out);
    ln2.collect(prefix + ".ln2", out);
    mlp.collect(prefix + ".mlp", out);
  }
};

// ----------------------------------------------------------------- backbone

template <typename S>
struct Backbone {
  BackboneConfig cfg;
  Linear<S> patch_embed;  // P^2*C -> D
  Param<S> cls;           // (1, D) class token
  Param<S> pos;           // (T+1, D) learned position embeddings
  std::vector<VitLayer<S>> layers;
  LayerNorm<S> final_ln;
  bool frozen = false;

  void setup(const BackboneConfig& config, Rng& rng) {
    cfg = config;
    cfg.validate();
    patch_embed.setup(cfg.patch_dim(), cfg.dim, rng, cfg.init_std);
    cls.setup(1, cfg.dim);
    fill_trunc_normal(cls.v, rng, cfg.init_std);
    pos.setup(cfg.tokens(), cfg.dim);
    fill_trunc_normal(pos.v, rng, cfg.init_std);
    layers.assign(cfg.layers, VitLayer<S>());
    for (auto& l : layers) l.setup(cfg, rng);
    final_ln.setup(cfg.dim, cfg.ln_eps);
  }

  // Images -> initial token tensor h^0: standardized pixels, patch
  // projection, class token prepended, position embeddings added.
  Mat<S> embed(const std::vector<Image>& images, LinearCache<S>* cache = nullptr) const {
    const int T = cfg.patches(), tokens = cfg.tokens();
    Mat<S> patches = patchify<S>(images, cfg);
    patches = (patches.array() - static_cast<S>(cfg.norm_mean)) / static_cast<S>(cfg.norm_std);
    Mat<S> proj = patch_embed.forward(patches, cache);
    Mat<S> h0(static_cast<Eigen::Index>(images.size()) * tokens, cfg.dim);
    for (size_t b = 0; b < images.size(); ++b) {
      auto block = h0.middleRows(static_cast<Eigen::Index>(b) * tokens, tokens);
      block.row(0) = cls.v.row(0);
      block.bottomRows(T) = proj.middleRows(static_cast<Eigen::Index>(b) * T, T);
      block += pos.v;
    }
    return h0;
  }

  // Accumulates gradients for the embedding-stage parameters given the
  // gradient w.r.t. h^0. (Pixels have no parameters; nothing flows further.)
  void embed_backward(const Mat<S>& dh0, int batch, const LinearCache<S>& cache) {
    const int T = cfg.patches(), tokens = cfg.tokens();
    Mat<S> dproj(static_cast<Eigen::Index>(batch) * T, cfg.dim);
    for (int b = 0; b < batch; ++b) {
      const auto block = dh0.middleRows(static_cast<Eigen::Index>(b) * tokens, tokens);
      pos.g += block;
      cls.g.row(0) += block.row(0);
      dproj.middleRows(static_cast<Eigen::Index>(b) * T, T) = block.bottomRows(T);
    }
    patch_embed.backward(dproj, cache);
  }

  // Plain frozen forward: h^{l} = hbar^{l}; then final LN, class-token row.
  Mat<S> features(const std::vector<Image>& images) const {
    const int batch = static_cast<int>(images.size());
    const int tokens = cfg.tokens();
    Mat<S> h = embed(images);
    for (size_t l = 0; l < layers.size(); ++l) {
      VitLayerOut<S> out = layers[l].forward(h, batch, tokens);
      h = std::move(out.hbar);
      check_finite(h, "backbone layer " + std::to_string(l) + " output");
    }
    Mat<S> n = final_ln.forward(h);
    Mat<S> z(batch, cfg.dim);
    for (int b = 0; b < batch; ++b) z.row(b) = n.row(static_cast<Eigen::Index>(b) * tokens);
    return z;
  }

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) {
    patch_embed.collect(prefix + ".patch", out);
    out.push_back({prefix + ".cls", &cls});
    out.push_back({prefix + ".pos", &pos});
    for (size_t l = 0; l < layers.size(); ++l)
      layers[l].collect(prefix + ".layer" + std::to_string(l), out);
    final_ln.collect(prefix + ".final_ln", out);
  }
};

}  // namespace grappa
