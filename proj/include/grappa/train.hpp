#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "grappa/augment.hpp"
#include "grappa/barlow.hpp"
#include "grappa/data.hpp"
#include "grappa/kmeans.hpp"
#include "grappa/knn.hpp"
#include "grappa/model.hpp"
#include "grappa/optim.hpp"

namespace grappa {

// Batched feature extraction for a whole image set.
template <typename S>
Mat<S> extract_features(const GrappaModel<S>& model, const std::vector<Image>& images,
                        int batch_size = 64) {
  const int n = static_cast<int>(images.size());
  Mat<S> Z(n, model.backbone.cfg.dim);
  for (int start = 0; start < n; start += batch_size) {
    const int count = std::min(batch_size, n - start);
    std::vector<Image> batch(images.begin() + start, images.begin() + start + count);
    Z.middleRows(start, count) = model.features(batch);
  }
  return Z;
}

struct TrainLog {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_metric;  // classification accuracy or attention entropy
};

// ------------------------------------------------------------ Step 2 loop

// Trains the adaptor set at `index` (and a throwaway norm-softmax head)
// against one pseudo-label set. Only adaptor and head parameters are handed
// to the optimizer; the backbone is frozen by exclusion.
template <typename S>
TrainLog train_adaptor_set(GrappaModel<S>& model, int index, const UnlabeledPool& pool,
                           const PseudoLabelSet<S>& pl, const AdaptorConfig& cfg,
                           uint64_t seed) {
  const int n = static_cast<int>(pool.images.size());
  if (static_cast<size_t>(n) != pl.assignment.size())
    throw ShapeError("train_adaptor_set: pool size != pseudo-label count");
  model.set_mode(FuseMode::Single, index);
  AdaptorSet<S>& set = model.adaptors[static_cast<size_t>(index)];
  set.k = pl.k;
  set.seed = seed;

  Rng head_rng = Rng::stream(seed, "head-init");
  NormSoftmaxHead<S> head;
  head.setup(pl.k, model.backbone.cfg.dim, cfg.gamma, head_rng, 0.02);

  std::vector<NamedParam<S>> trainable = model.adaptor_params(index);
  head.collect("head", trainable);
  Adam<S> opt(trainable, cfg.lr, cfg.weight_decay);

  TrainLog log;
  Rng order_rng = Rng::stream(seed, "batch-order");
  std::vector<int> idx(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(idx);
    double loss_sum = 0.0;
    int batches = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int count = std::min(cfg.batch_size, n - start);
      std::vector<Image> images;
      images.reserve(static_cast<size_t>(count));
      std::vector<int32_t> labels(static_cast<size_t>(count));
      for (int j = 0; j < count; ++j) {
        const int i = idx[static_cast<size_t>(start + j)];
        images.push_back(pool.images[static_cast<size_t>(i)]);
        labels[static_cast<size_t>(j)] = pl.assignment[static_cast<size_t>(i)];
      }
      model.zero_all_grads();
      ModelCache<S> cache;
      Mat<S> z = model.features(images, &cache);
      Mat<S> dz;
      const double loss = norm_softmax_loss_grad(head, z, labels, dz);
      if (!std::isfinite(loss))
        throw DivergenceError("adaptor training diverged (non-finite loss)");
      model.backward(dz, cache);
      opt.step();
      loss_sum += loss;
      ++batches;
    }
    log.epoch_loss.push_back(loss_sum / std::max(1, batches));

    // Pseudo-label accuracy on the pool, for the epoch log.
    Mat<S> z_all = extract_features(model, pool.images, cfg.batch_size);
    std::vector<int32_t> pred = norm_softmax_predict(head, z_all);
    int correct = 0;
    for (int i = 0; i < n; ++i)
      if (pred[static_cast<size_t>(i)] == pl.assignment[static_cast<size_t>(i)]) ++correct;
    log.epoch_metric.push_back(static_cast<double>(correct) / std::max(1, n));
  }
  set.epochs_trained += cfg.epochs;
  return log;
}

// --------------------------------------------------------- pair sampling

struct PairBatch {
  std::vector<Image> a, b;
};

inline int32_t sample_neighbor(const NeighborGraph& graph, int i, Rng& rng) {
  const auto& row = graph.neighbors.at(static_cast<size_t>(i));
  return row[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(row.size())))];
}

// TC: two independently augmented views of the same image.
// AC: the image and one uniformly drawn feature-space neighbor, unaugmented.
inline PairBatch sample_pairs(const std::string& variant, const UnlabeledPool& pool,
                              const std::vector<int>& indices, const NeighborGraph* graph,
                              const AugmentConfig& aug, Rng& rng) {
  PairBatch out;
  out.a.reserve(indices.size());
  out.b.reserve(indices.size());
  if (variant == "tc") {
    for (int i : indices) {
      out.a.push_back(augment(pool.images[static_cast<size_t>(i)], aug, rng));
      out.b.push_back(augment(pool.images[static_cast<size_t>(i)], aug, rng));
    }
  } else if (variant == "ac") {
    if (graph == nullptr)
      throw ConfigError("sample_pairs: the AC variant needs a neighbor graph");
    for (int i : indices) {
      out.a.push_back(pool.images[static_cast<size_t>(i)]);
      out.b.push_back(pool.images[static_cast<size_t>(sample_neighbor(*graph, i, rng))]);
    }
  } else {
    throw ConfigError("sample_pairs: unknown variant " + variant);
  }
  return out;
}

// Mean attention entropy (nats) over images and layers; log(N) means uniform.
template <typename S>
double mean_attention_entropy(const GrappaModel<S>& model, const std::vector<Image>& images,
                              int batch_size = 64) {
  const int n = static_cast<int>(images.size());
  double total = 0.0;
  long count = 0;
  for (int start = 0; start < n; start += batch_size) {
    const int bs = std::min(batch_size, n - start);
    std::vector<Image> batch(images.begin() + start, images.begin() + start + bs);
    ModelCache<S> cache;
    model.features(batch, &cache);
    for (const auto& lc : cache.layers) {
      for (Eigen::Index b = 0; b < lc.alpha.rows(); ++b) {
        double h = 0.0;
        for (Eigen::Index i = 0; i < lc.alpha.cols(); ++i) {
          const double p = static_cast<double>(lc.alpha(b, i));
          if (p > 0.0) h -= p * std::log(p);
        }
        total += h;
        ++count;
      }
    }
  }
  return count > 0 ? total / static_cast<double>(count) : 0.0;
}

// The registry Step 3 hands its optimizer: fusion Q/K per layer plus the
// projector — nothing else, which is what keeps adaptors and backbone frozen.
template <typename S>
std::vector<NamedParam<S>> fusion_trainable_registry(GrappaModel<S>& model,
                                                     Projector<S>& projector) {
  std::vector<NamedParam<S>> trainable = model.fusion_params();
  projector.collect("projector", trainable);
  return trainable;
}

// ------------------------------------------------------------ Step 3 loop

// Exact zeros for both Q and K form a stationary point of any loss that
// reaches them only through the attention scores: each matrix's gradient is
// proportional to the other matrix. Keeping Q at zero leaves every score
// exactly zero — the starting model is still bitwise the averaging model, and
// an epoch-0 neighbor graph built from it matches that model — while a small
// random K makes dLoss/dQ nonzero from the first step.
template <typename S>
void init_fusion_for_training(GrappaModel<S>& model, uint64_t seed) {
  Rng rng = Rng::stream(seed, "fusion-init");
  for (auto& f : model.fusion) {
    f.Q.v.setZero();
    fill_trunc_normal(f.K.v, rng, 0.02);
  }
}

// Barlow-Twins training of the fusion attention. variant "tc" uses augmented
// views, "ac" uses feature-space neighbors with the graph rebuilt from the
// current model at the start of every epoch (the initial graph therefore
// comes from attention that still acts as the averaging model).
template <typename S>
TrainLog train_fusion(GrappaModel<S>& model, const UnlabeledPool& pool,
                      const std::string& variant, const FusionConfig& cfg, uint64_t seed) {
  if (variant != "tc" && variant != "ac")
    throw ConfigError("train_fusion: variant must be tc or ac");
  cfg.validate();
  model.set_mode(FuseMode::Attention);
  model.include_class_token = cfg.include_class_token;
  model.sqrt_dim_scaling = cfg.sqrt_dim_scaling;
  init_fusion_for_training(model, seed);
  const int n = static_cast<int>(pool.images.size());
  const int D = model.backbone.cfg.dim;

  Rng proj_rng = Rng::stream(seed, "projector-init");
  Projector<S> projector;
  projector.setup(D, cfg.resolved_projector(D), proj_rng, 0.02);

  Lars<S> opt(fusion_trainable_registry(model, projector), cfg.lr, cfg.weight_decay);

  TrainLog log;
  Rng order_rng = Rng::stream(seed, "batch-order");
  Rng pair_rng = Rng::stream(seed, "pairs");
  std::vector<int> idx(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;

  NeighborGraph graph;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (variant == "ac") {
      // Refresh neighbors from the current fused features, every epoch.
      Mat<S> Z = extract_features(model, pool.images, cfg.batch_size);
      graph = build_knn_graph(Z, cfg.knn);
      graph.epoch = epoch;
    }
    order_rng.shuffle(idx);
    double loss_sum = 0.0;
    int batches = 0;
    for (int start = 0; start + 1 < n; start += cfg.batch_size) {
      const int count = std::min(cfg.batch_size, n - start);
      if (count < 2) break;  // the cross-correlation needs at least two rows
      std::vector<int> batch_idx(idx.begin() + start, idx.begin() + start + count);
      PairBatch pairs = sample_pairs(variant, pool, batch_idx,
                                     variant == "ac" ? &graph : nullptr, cfg.augment, pair_rng);

      model.zero_all_grads();
      ModelCache<S> cache_a, cache_b;
      Mat<S> za = model.features(pairs.a, &cache_a);
      Mat<S> zb = model.features(pairs.b, &cache_b);
      MlpCache<S> proj_a, proj_b;
      Mat<S> ga = projector.forward(za, &proj_a);
      Mat<S> gb = projector.forward(zb, &proj_b);
      BarlowCache<S> bt;
      const double loss = barlow_twins_loss(ga, gb, cfg.beta, &bt);
      if (!std::isfinite(loss))
        throw DivergenceError("fusion training diverged (non-finite loss)");
      Mat<S> dga, dgb;
      barlow_twins_backward(cfg.beta, bt, dga, dgb);
      Mat<S> dza = projector.backward(dga, proj_a);
      Mat<S> dzb = projector.backward(dgb, proj_b);
      model.backward(dza, cache_a);
      model.backward(dzb, cache_b);
      opt.step();
      loss_sum += loss;
      ++batches;
    }
    log.epoch_loss.push_back(loss_sum / std::max(1, batches));
    log.epoch_metric.push_back(mean_attention_entropy(model, pool.images, cfg.batch_size));
  }
  return log;
}

// Labeled training set for the supervised fusion variant: union of task train
// splits with per-task class-id offsets so labels stay distinct.
struct LabeledSet {
  std::vector<Image> images;
  std::vector<int32_t> labels;
  int32_t num_classes = 0;
};

inline LabeledSet make_labeled_set(const std::vector<TaskDataset>& train_splits) {
  LabeledSet out;
  int32_t offset = 0;
  for (const auto& ds : train_splits) {
    if (ds.split != "train") throw ConfigError("make_labeled_set: train splits only");
    for (size_t i = 0; i < ds.images.size(); ++i) {
      out.images.push_back(ds.images[i]);
      out.labels.push_back(offset + ds.labels[i]);
    }
    offset += static_cast<int32_t>(ds.class_names.size());
  }
  out.num_classes = offset;
  return out;
}

// Supervised alternative for Step 3: class labels, norm-softmax loss, Adam,
// still updating only Q/K (plus the throwaway head).
template <typename S>
TrainLog train_fusion_supervised(GrappaModel<S>& model, const LabeledSet& data,
                                 const FusionConfig& cfg, uint64_t seed) {
  model.set_mode(FuseMode::Attention);
  model.include_class_token = cfg.include_class_token;
  model.sqrt_dim_scaling = cfg.sqrt_dim_scaling;
  init_fusion_for_training(model, seed);
  const int n = static_cast<int>(data.images.size());

  Rng head_rng = Rng::stream(seed, "sup-head-init");
  NormSoftmaxHead<S> head;
  head.setup(data.num_classes, model.backbone.cfg.dim, /*gamma=*/25.0, head_rng, 0.02);

  std::vector<NamedParam<S>> trainable = model.fusion_params();
  head.collect("head", trainable);
  Adam<S> opt(trainable, cfg.adam_lr, cfg.weight_decay);

  TrainLog log;
  Rng order_rng = Rng::stream(seed, "batch-order");
  std::vector<int> idx(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(idx);
    double loss_sum = 0.0;
    int batches = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int count = std::min(cfg.batch_size, n - start);
      std::vector<Image> images;
      images.reserve(static_cast<size_t>(count));
      std::vector<int32_t> labels(static_cast<size_t>(count));
      for (int j = 0; j < count; ++j) {
        const int i = idx[static_cast<size_t>(start + j)];
        images.push_back(data.images[static_cast<size_t>(i)]);
        labels[static_cast<size_t>(j)] = data.labels[static_cast<size_t>(i)];
      }
      model.zero_all_grads();
      ModelCache<S> cache;
      Mat<S> z = model.features(images, &cache);
      Mat<S> dz;
      const double loss = norm_softmax_loss_grad(head, z, labels, dz);
      if (!std::isfinite(loss))
        throw DivergenceError("supervised fusion training diverged (non-finite loss)");
      model.backward(dz, cache);
      opt.step();
      loss_sum += loss;
      ++batches;
    }
    log.epoch_loss.push_back(loss_sum / std::max(1, batches));

    Mat<S> z_all = extract_features(model, data.images, cfg.batch_size);
    std::vector<int32_t> pred = norm_softmax_predict(head, z_all);
    int correct = 0;
    for (int i = 0; i < n; ++i)
      if (pred[static_cast<size_t>(i)] == data.labels[static_cast<size_t>(i)]) ++correct;
    log.epoch_metric.push_back(static_cast<double>(correct) / std::max(1, n));
  }
  return log;
}

}  // namespace grappa
