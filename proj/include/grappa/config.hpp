#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "grappa/common.hpp"

namespace grappa {

using json = nlohmann::json;

struct BackboneConfig {
  int image_h = 32;
  int image_w = 32;
  int channels = 3;
  int patch = 8;
  int layers = 4;
  int dim = 64;
  int heads = 4;
  int mlp_hidden = 128;
  double ln_eps = 1e-6;
  double init_std = 0.02;
  // Pixel standardization applied at the model boundary: (v - mean) / std.
  double norm_mean = 0.5;
  double norm_std = 0.5;

  int patches() const { return (image_h / patch) * (image_w / patch); }
  int tokens() const { return patches() + 1; }  // class token at row 0
  int patch_dim() const { return patch * patch * channels; }
  int head_dim() const { return dim / heads; }

  void validate() const {
    if (image_h <= 0 || image_w <= 0 || channels <= 0)
      throw ConfigError("backbone: image dimensions must be positive");
    if (patch <= 0 || image_h % patch != 0 || image_w % patch != 0)
      throw ConfigError("backbone: image size must be divisible by patch size");
    if (layers < 1) throw ConfigError("backbone: layers must be >= 1");
    if (heads < 1 || dim % heads != 0)
      throw ConfigError("backbone: dim must be divisible by heads");
    if (mlp_hidden < 1) throw ConfigError("backbone: mlp_hidden must be >= 1");
  }

  bool operator==(const BackboneConfig&) const = default;
};

/// Where backbone parameters come from: a seeded random init or a checkpoint.
struct BackboneSource {
  std::string kind = "random";  // "random" | "checkpoint"
  std::string path;             // checkpoint path when kind == "checkpoint"
  uint64_t seed = 42;

  void validate() const {
    if (kind != "random" && kind != "checkpoint")
      throw ConfigError("backbone_source.kind must be 'random' or 'checkpoint'");
    if (kind == "checkpoint" && path.empty())
      throw ConfigError("backbone_source: checkpoint source needs a path");
  }
};

struct SyntheticSpec {
  int coarse_classes = 4;   // shape factor
  int mid_classes = 8;      // color factor, nested in shape
  int fine_classes = 16;    // texture factor, nested in color
  int images_per_class = 40;
  int image_size = 32;
  double noise = 0.05;
  uint64_t seed = 1234;

  void validate() const {
    if (coarse_classes <= 0 || mid_classes <= 0 || fine_classes <= 0)
      throw ConfigError("synthetic: class counts must be positive");
    if (mid_classes % coarse_classes != 0 || fine_classes % mid_classes != 0)
      throw ConfigError("synthetic: factor hierarchy requires nested class counts");
    if (images_per_class <= 0) throw ConfigError("synthetic: images_per_class must be positive");
    if (image_size <= 0) throw ConfigError("synthetic: image_size must be positive");
  }
};

struct DataConfig {
  std::string root;  // image-folder root; empty means synthetic benchmark
  SyntheticSpec synthetic;
};

struct PseudoLabelConfig {
  std::vector<int> k_list = {4, 16, 64, 256};
  int max_iters = 100;
  double tol = 1e-4;  // max centroid displacement
  bool l2_normalize = false;
  uint64_t seed = 0;

  void validate() const {
    if (k_list.empty()) throw ConfigError("pseudolabels: k_list is empty");
    for (size_t i = 0; i < k_list.size(); ++i) {
      if (k_list[i] <= 0) throw ConfigError("pseudolabels: k must be positive");
      if (i > 0 && k_list[i] <= k_list[i - 1])
        throw ConfigError("pseudolabels: k_list must be strictly increasing");
    }
    if (max_iters < 1) throw ConfigError("pseudolabels: max_iters must be >= 1");
  }
};

struct AdaptorConfig {
  int bottleneck_dim = 0;  // 0 selects dim/4
  double gamma = 25.0;
  int epochs = 20;
  int batch_size = 64;
  double lr = 1e-3;
  double weight_decay = 1e-3;
  uint64_t seed = 0;

  int resolved_bottleneck(int dim) const {
    return bottleneck_dim > 0 ? bottleneck_dim : dim / 4;
  }

  void validate(int dim) const {
    int dprime = resolved_bottleneck(dim);
    if (dprime <= 0 || dprime >= dim)
      throw ConfigError("adaptors: bottleneck dim must satisfy 0 < D' < D");
    if (epochs < 0 || batch_size < 1) throw ConfigError("adaptors: bad epochs/batch");
    if (gamma < 0) throw ConfigError("adaptors: gamma must be >= 0");
  }
};

struct AugmentConfig {
  double min_area = 0.5;
  double max_area = 1.0;
  bool hflip = true;
  double jitter = 0.2;  // brightness/contrast amplitude

  void validate() const {
    if (!(min_area > 0.0) || min_area > max_area || max_area > 1.0)
      throw ConfigError("augment: need 0 < min_area <= max_area <= 1");
    if (jitter < 0) throw ConfigError("augment: jitter must be >= 0");
  }
};

struct FusionConfig {
  std::string variant = "ac";  // "avg" | "tc" | "ac"
  bool supervised = false;
  int knn = 5;
  double beta = 0.005;
  int epochs = 10;
  int batch_size = 64;
  double lr = 0.5;             // LARS
  double weight_decay = 1e-3;  // LARS
  double adam_lr = 1e-3;       // supervised variant
  int projector_dim = 0;       // 0 selects 4*dim
  bool include_class_token = true;  // class token participates in pooling
  bool sqrt_dim_scaling = true;     // 1/sqrt(D) on attention logits
  AugmentConfig augment;
  uint64_t seed = 0;

  int resolved_projector(int dim) const {
    return projector_dim > 0 ? projector_dim : 4 * dim;
  }

  void validate() const {
    if (variant != "avg" && variant != "tc" && variant != "ac")
      throw ConfigError("fusion: variant must be avg, tc or ac");
    if (knn < 1) throw ConfigError("fusion: knn must be >= 1");
    if (beta < 0) throw ConfigError("fusion: beta must be >= 0");
    if (epochs < 0 || batch_size < 2)
      throw ConfigError("fusion: batch size must be >= 2 for the pairwise loss");
    augment.validate();
  }
};

struct EvalConfig {
  bool plot = false;
  std::string baseline;  // optional baseline bundle path
  int feature_batch = 64;
};

struct PipelineConfig {
  uint64_t seed = 7;
  std::string out_dir = "runs/default";
  bool strict = false;  // config-hash mismatch between steps: error instead of warn
  BackboneConfig backbone;
  BackboneSource backbone_source;
  DataConfig data;
  PseudoLabelConfig pseudolabels;
  AdaptorConfig adaptors;
  FusionConfig fusion;
  EvalConfig eval;

  void validate() const {
    backbone.validate();
    backbone_source.validate();
    if (data.root.empty()) data.synthetic.validate();
    pseudolabels.validate();
    adaptors.validate(backbone.dim);
    fusion.validate();
  }
};

// ---------------------------------------------------------------------------
// JSON bindings. Missing keys keep their defaults so configs can stay sparse.

#define GRAPPA_GET(j, obj, field) \
  (obj).field = (j).value(#field, (obj).field)

inline void to_json(json& j, const BackboneConfig& c) {
  j = json{{"image_h", c.image_h}, {"image_w", c.image_w}, {"channels", c.channels},
           {"patch", c.patch},     {"layers", c.layers},   {"dim", c.dim},
           {"heads", c.heads},     {"mlp_hidden", c.mlp_hidden},
           {"ln_eps", c.ln_eps},   {"init_std", c.init_std},
           {"norm_mean", c.norm_mean}, {"norm_std", c.norm_std}};
}
inline void from_json(const json& j, BackboneConfig& c) {
  GRAPPA_GET(j, c, image_h); GRAPPA_GET(j, c, image_w); GRAPPA_GET(j, c, channels);
  GRAPPA_GET(j, c, patch); GRAPPA_GET(j, c, layers); GRAPPA_GET(j, c, dim);
  GRAPPA_GET(j, c, heads); GRAPPA_GET(j, c, mlp_hidden);
  GRAPPA_GET(j, c, ln_eps); GRAPPA_GET(j, c, init_std);
  GRAPPA_GET(j, c, norm_mean); GRAPPA_GET(j, c, norm_std);
}

inline void to_json(json& j, const BackboneSource& c) {
  j = json{{"kind", c.kind}, {"path", c.path}, {"seed", c.seed}};
}
inline void from_json(const json& j, BackboneSource& c) {
  GRAPPA_GET(j, c, kind); GRAPPA_GET(j, c, path); GRAPPA_GET(j, c, seed);
}

inline void to_json(json& j, const SyntheticSpec& c) {
  j = json{{"coarse_classes", c.coarse_classes}, {"mid_classes", c.mid_classes},
           {"fine_classes", c.fine_classes},     {"images_per_class", c.images_per_class},
           {"image_size", c.image_size},         {"noise", c.noise},
           {"seed", c.seed}};
}
inline void from_json(const json& j, SyntheticSpec& c) {
  GRAPPA_GET(j, c, coarse_classes); GRAPPA_GET(j, c, mid_classes);
  GRAPPA_GET(j, c, fine_classes); GRAPPA_GET(j, c, images_per_class);
  GRAPPA_GET(j, c, image_size); GRAPPA_GET(j, c, noise); GRAPPA_GET(j, c, seed);
}

inline void to_json(json& j, const DataConfig& c) {
  j = json{{"root", c.root}, {"synthetic", c.synthetic}};
}
inline void from_json(const json& j, DataConfig& c) {
  GRAPPA_GET(j, c, root);
  if (j.contains("synthetic")) c.synthetic = j.at("synthetic").get<SyntheticSpec>();
}

inline void to_json(json& j, const PseudoLabelConfig& c) {
  j = json{{"k_list", c.k_list}, {"max_iters", c.max_iters}, {"tol", c.tol},
           {"l2_normalize", c.l2_normalize}, {"seed", c.seed}};
}
inline void from_json(const json& j, PseudoLabelConfig& c) {
  GRAPPA_GET(j, c, k_list); GRAPPA_GET(j, c, max_iters); GRAPPA_GET(j, c, tol);
  GRAPPA_GET(j, c, l2_normalize); GRAPPA_GET(j, c, seed);
}

inline void to_json(json& j, const AdaptorConfig& c) {
  j = json{{"bottleneck_dim", c.bottleneck_dim}, {"gamma", c.gamma},
           {"epochs", c.epochs}, {"batch_size", c.batch_size},
           {"lr", c.lr}, {"weight_decay", c.weight_decay}, {"seed", c.seed}};
}
inline void from_json(const json& j, AdaptorConfig& c) {
  GRAPPA_GET(j, c, bottleneck_dim); GRAPPA_GET(j, c, gamma);
  GRAPPA_GET(j, c, epochs); GRAPPA_GET(j, c, batch_size);
  GRAPPA_GET(j, c, lr); GRAPPA_GET(j, c, weight_decay); GRAPPA_GET(j, c, seed);
}

inline void to_json(json& j, const AugmentConfig& c) {
  j = json{{"min_area", c.min_area}, {"max_area", c.max_area},
           {"hflip", c.hflip}, {"jitter", c.jitter}};
}
inline void from_json(const json& j, AugmentConfig& c) {
  GRAPPA_GET(j, c, min_area); GRAPPA_GET(j, c, max_area);
  GRAPPA_GET(j, c, hflip); GRAPPA_GET(j, c, jitter);
}

inline void to_json(json& j, const FusionConfig& c) {
  j = json{{"variant", c.variant}, {"supervised", c.supervised}, {"knn", c.knn},
           {"beta", c.beta}, {"epochs", c.epochs}, {"batch_size", c.batch_size},
           {"lr", c.lr}, {"weight_decay", c.weight_decay}, {"adam_lr", c.adam_lr},
           {"projector_dim", c.projector_dim},
           {"include_class_token", c.include_class_token},
           {"sqrt_dim_scaling", c.sqrt_dim_scaling},
           {"augment", c.augment}, {"seed", c.seed}};
}
inline void from_json(const json& j, FusionConfig& c) {
  GRAPPA_GET(j, c, variant); GRAPPA_GET(j, c, supervised); GRAPPA_GET(j, c, knn);
  GRAPPA_GET(j, c, beta); GRAPPA_GET(j, c, epochs); GRAPPA_GET(j, c, batch_size);
  GRAPPA_GET(j, c, lr); GRAPPA_GET(j, c, weight_decay); GRAPPA_GET(j, c, adam_lr);
  GRAPPA_GET(j, c, projector_dim); GRAPPA_GET(j, c, include_class_token);
  GRAPPA_GET(j, c, sqrt_dim_scaling);
  if (j.contains("augment")) c.augment = j.at("augment").get<AugmentConfig>();
  GRAPPA_GET(j, c, seed);
}

inline void to_json(json& j, const EvalConfig& c) {
  j = json{{"plot", c.plot}, {"baseline", c.baseline},
           {"feature_batch", c.feature_batch}};
}
inline void from_json(const json& j, EvalConfig& c) {
  GRAPPA_GET(j, c, plot); GRAPPA_GET(j, c, baseline); GRAPPA_GET(j, c, feature_batch);
}

inline void to_json(json& j, const PipelineConfig& c) {
  j = json{{"seed", c.seed}, {"out_dir", c.out_dir}, {"strict", c.strict},
           {"backbone", c.backbone}, {"backbone_source", c.backbone_source},
           {"data", c.data}, {"pseudolabels", c.pseudolabels},
           {"adaptors", c.adaptors}, {"fusion", c.fusion}, {"eval", c.eval}};
}
inline void from_json(const json& j, PipelineConfig& c) {
  GRAPPA_GET(j, c, seed); GRAPPA_GET(j, c, out_dir); GRAPPA_GET(j, c, strict);
  if (j.contains("backbone")) c.backbone = j.at("backbone").get<BackboneConfig>();
  if (j.contains("backbone_source"))
    c.backbone_source = j.at("backbone_source").get<BackboneSource>();
  if (j.contains("data")) c.data = j.at("data").get<DataConfig>();
  if (j.contains("pseudolabels"))
    c.pseudolabels = j.at("pseudolabels").get<PseudoLabelConfig>();
  if (j.contains("adaptors")) c.adaptors = j.at("adaptors").get<AdaptorConfig>();
  if (j.contains("fusion")) c.fusion = j.at("fusion").get<FusionConfig>();
  if (j.contains("eval")) c.eval = j.at("eval").get<EvalConfig>();
}

#undef GRAPPA_GET

}  // namespace grappa
