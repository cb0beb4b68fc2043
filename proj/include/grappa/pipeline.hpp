#pragma once

#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "grappa/config.hpp"
#include "grappa/data.hpp"
#include "grappa/metrics.hpp"
#include "grappa/model.hpp"
#include "grappa/report.hpp"
#include "grappa/train.hpp"

namespace grappa {

namespace fs = std::filesystem;

// Artifact layout inside a run directory. Steps communicate only through
// these files, so subcommands can run as independent processes.
struct RunPaths {
  fs::path out;

  fs::path config() const { return out / "config.json"; }
  fs::path manifest() const { return out / "manifest.json"; }
  fs::path backbone() const { return out / "backbone.ckpt"; }
  fs::path features() const { return out / "features.ckpt"; }
  fs::path pseudo(int k) const { return out / ("pseudo_k" + std::to_string(k) + ".ckpt"); }
  fs::path adaptor(int g, int k) const {
    return out / ("adaptor_g" + std::to_string(g) + "_k" + std::to_string(k) + ".ckpt");
  }
  fs::path fusion(const std::string& variant) const {
    return out / ("fusion_" + variant + ".ckpt");
  }
  fs::path eval_dir() const { return out / "evaluation"; }
  fs::path report() const { return eval_dir() / "report.json"; }
};

inline std::string canonical_config_json(const PipelineConfig& cfg) {
  json j = cfg;
  return j.dump(2) + "\n";
}

inline std::string config_hash(const PipelineConfig& cfg) {
  return Sha256::hex_of(canonical_config_json(cfg));
}

inline std::string iso8601_utc_now() {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Orchestration of the three training steps plus evaluation over one run
// directory. Timestamps live only in manifest.json; every other artifact is
// a pure function of config + seeds, which keeps report reruns byte-identical.
template <typename S = float>
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    paths_.out = fs::path(cfg_.out_dir);
  }

  const PipelineConfig& config() const { return cfg_; }
  const RunPaths& paths() const { return paths_; }

  int run(const std::string& step) {
    if (step == "pseudolabels") {
      step_pseudolabels();
    } else if (step == "train-adaptors") {
      step_train_adaptors(-1);
    } else if (step == "train-fusion") {
      step_train_fusion();
    } else if (step == "evaluate") {
      step_evaluate();
    } else if (step == "all") {
      step_pseudolabels();
      step_train_adaptors(-1);
      step_train_fusion();
      step_evaluate();
    } else {
      throw ConfigError("unknown step: " + step);
    }
    return 0;
  }

  // ---- Step 1: frozen features + multi-granularity k-means pseudo-labels.
  void step_pseudolabels() {
    prepare_run_dir();
    GrappaModel<S> model;
    load_or_init_backbone(cfg_.backbone, cfg_.backbone_source, model);
    save_backbone(paths_.backbone().string(), model, cfg_.backbone_source.seed);
    const std::string model_fp = backbone_fingerprint(model);

    model.set_mode(FuseMode::Frozen);
    const UnlabeledPool& p = pool();
    FeatureStore<S> store;
    store.Z = extract_features(model, p.images, cfg_.eval.feature_batch);
    store.ids = p.ids;
    store.model_fingerprint = model_fp;
    save_features(paths_.features().string(), store);

    json outputs;
    outputs["backbone.ckpt"] = fingerprint_file(paths_.backbone().string());
    outputs["features.ckpt"] = fingerprint_file(paths_.features().string());
    Mat<S> cluster_input = store.Z;
    if (cfg_.pseudolabels.l2_normalize) {
      for (Eigen::Index r = 0; r < cluster_input.rows(); ++r) {
        const S n = cluster_input.row(r).norm();
        if (n > S(0)) cluster_input.row(r) /= n;
      }
    }
    auto sets = build_granularities(cluster_input, cfg_.pseudolabels.k_list,
                                    cfg_.seed ^ cfg_.pseudolabels.seed,
                                    cfg_.pseudolabels.max_iters, cfg_.pseudolabels.tol);
    for (auto& set : sets) {
      set.model_fingerprint = model_fp;
      const fs::path path = paths_.pseudo(set.k);
      save_pseudolabels(path.string(), set);
      outputs[path.filename().string()] = fingerprint_file(path.string());
      std::cerr << "[pseudolabels] k=" << set.k << " inertia=" << set.inertia
                << " iters=" << set.iterations << "\n";
    }
    record_step("pseudolabels", json::object(), outputs);
  }

  // ---- Step 2: one bottleneck adaptor set per granularity (or a single one).
  void step_train_adaptors(int granularity) {
    prepare_run_dir();
    require(paths_.backbone(), "backbone checkpoint", "pseudolabels");
    GrappaModel<S> model;
    load_backbone(paths_.backbone().string(), model);
    model.init_fusion_layers();
    const std::string model_fp = backbone_fingerprint(model);
    const UnlabeledPool& p = pool();

    const int n_gran = static_cast<int>(cfg_.pseudolabels.k_list.size());
    if (granularity >= n_gran)
      throw ConfigError("train-adaptors: granularity index out of range");
    model.adaptors.resize(static_cast<size_t>(n_gran));

    json inputs, outputs;
    inputs["backbone.ckpt"] = fingerprint_file(paths_.backbone().string());
    const int lo = granularity < 0 ? 0 : granularity;
    const int hi = granularity < 0 ? n_gran - 1 : granularity;
    for (int g = lo; g <= hi; ++g) {
      const int k = cfg_.pseudolabels.k_list[static_cast<size_t>(g)];
      const fs::path pseudo_path = paths_.pseudo(k);
      require(pseudo_path, "pseudo-label set k=" + std::to_string(k), "pseudolabels");
      PseudoLabelSet<S> pl = load_pseudolabels<S>(pseudo_path.string());
      if (pl.assignment.size() != p.images.size())
        throw ConfigError("pseudo-labels cover a different pool size; regenerate step 1");
      if (!pl.model_fingerprint.empty() && pl.model_fingerprint != model_fp)
        throw ConfigError("pseudo-labels were computed with a different backbone");
      inputs[pseudo_path.filename().string()] = fingerprint_file(pseudo_path.string());

      AdaptorSet<S>& set = model.adaptors[static_cast<size_t>(g)];
      Rng init_rng = Rng::stream(cfg_.seed ^ cfg_.adaptors.seed,
                                 "adaptor-init/g" + std::to_string(g));
      set.setup(cfg_.backbone.layers, cfg_.backbone.dim,
                cfg_.adaptors.resolved_bottleneck(cfg_.backbone.dim), init_rng,
                cfg_.backbone.init_std);
      set.granularity = g;
      set.pseudolabel_fingerprint = fingerprint_file(pseudo_path.string());
      const uint64_t train_seed =
          Rng::stream(cfg_.seed ^ cfg_.adaptors.seed, "adaptor-train/g" + std::to_string(g))
              .next_u64();
      TrainLog log = train_adaptor_set(model, g, p, pl, cfg_.adaptors, train_seed);
      std::cerr << "[train-adaptors] g=" << g << " k=" << k
                << " loss=" << log.epoch_loss.back()
                << " pseudo-acc=" << log.epoch_metric.back() << "\n";
      const fs::path out_path = paths_.adaptor(g, k);
      save_adaptor_set(out_path.string(), set, cfg_.backbone,
                       cfg_.adaptors.resolved_bottleneck(cfg_.backbone.dim));
      outputs[out_path.filename().string()] = fingerprint_file(out_path.string());
    }
    record_step("train-adaptors", inputs, outputs);
  }

  // ---- Step 3: fusion attention. "avg" writes zero Q/K without training;
  // "tc"/"ac" run Barlow-Twins training; the supervised flag swaps the loss.
  void step_train_fusion() {
    prepare_run_dir();
    GrappaModel<S> model;
    json inputs;
    load_full_model(model, &inputs);

    std::vector<std::string> ad_fps;
    for (size_t g = 0; g < model.adaptors.size(); ++g) {
      std::vector<NamedParam<S>> params;
      model.adaptors[g].collect("set", params);
      ad_fps.push_back(fingerprint_params(params));
    }

    const std::string variant = cfg_.fusion.supervised ? "sup" : cfg_.fusion.variant;
    const uint64_t train_seed =
        Rng::stream(cfg_.seed ^ cfg_.fusion.seed, "fusion-train/" + variant).next_u64();
    if (cfg_.fusion.supervised) {
      LabeledSet labeled = make_labeled_set(benchmark().train);
      TrainLog log = train_fusion_supervised(model, labeled, cfg_.fusion, train_seed);
      std::cerr << "[train-fusion] sup loss=" << log.epoch_loss.back()
                << " acc=" << log.epoch_metric.back() << "\n";
    } else if (variant == "avg") {
      model.set_mode(FuseMode::Attention);  // zero-initialized Q/K == averaging
    } else {
      TrainLog log = train_fusion(model, pool(), variant, cfg_.fusion, train_seed);
      std::cerr << "[train-fusion] " << variant << " loss=" << log.epoch_loss.back()
                << " attention-entropy=" << log.epoch_metric.back() << "\n";
    }
    const fs::path out_path = paths_.fusion(variant);
    save_fusion(out_path.string(), model, variant, train_seed, ad_fps);
    json outputs;
    outputs[out_path.filename().string()] = fingerprint_file(out_path.string());
    record_step("train-fusion", inputs, outputs);
  }

  // ---- Evaluation: every model variant the run directory can support.
  json step_evaluate() {
    prepare_run_dir();
    GrappaModel<S> model;
    json inputs;
    const bool have_adaptors = load_full_model_optional(model, &inputs);

    const Benchmark& bench = benchmark();
    std::vector<std::string> task_names;
    std::vector<std::vector<int32_t>> task_labels;
    for (const auto& t : bench.test) {
      task_names.push_back(t.name);
      task_labels.push_back(t.labels);
    }

    std::vector<std::pair<std::string, RetrievalReport>> rows;
    auto eval_current = [&](const std::string& label) {
      std::vector<EvalTask<S>> tasks;
      for (size_t t = 0; t < bench.test.size(); ++t) {
        EvalTask<S> et;
        et.name = task_names[t];
        et.Z = extract_features(model, bench.test[t].images, cfg_.eval.feature_batch);
        et.labels = task_labels[t];
        tasks.push_back(std::move(et));
      }
      rows.emplace_back(label, evaluate_tasks(tasks, label));
      std::cerr << "[evaluate] " << label << " RP=" << rows.back().second.rp_mean
                << " MAP@R=" << rows.back().second.map_mean << "\n";
    };

    model.set_mode(FuseMode::Frozen);
    eval_current("frozen");
    const RetrievalReport frozen_report = rows.front().second;

    std::vector<RetrievalReport> single_reports;
    if (have_adaptors) {
      for (size_t g = 0; g < model.adaptors.size(); ++g) {
        model.set_mode(FuseMode::Single, static_cast<int>(g));
        eval_current("single_k" + std::to_string(model.adaptors[g].k));
        single_reports.push_back(rows.back().second);
      }
      model.set_mode(FuseMode::Average);
      eval_current("grappa_avg");
      for (const std::string v : {"tc", "ac", "sup"}) {
        const fs::path f = paths_.fusion(v);
        if (fs::exists(f)) {
          load_fusion(f.string(), model);
          inputs[f.filename().string()] = fingerprint_file(f.string());
          model.set_mode(FuseMode::Attention);
          eval_current("grappa_" + v);
        }
      }
    }

    json out;
    out["schema_version"] = kReportSchemaVersion;
    out["tasks"] = task_names;
    const RetrievalReport* frozen = &frozen_report;
    json models = json::object();
    for (const auto& [label, rep] : rows)
      models[label] = report_to_json(rep, label == "frozen" ? nullptr : frozen);
    if (!single_reports.empty()) {
      OracleSelection sel = oracle_select(single_reports);
      models["oracle"] = report_to_json(sel.report, frozen);
      json picks = json::object();
      for (size_t t = 0; t < task_names.size(); ++t) {
        const int g = sel.best_index[t];
        picks[task_names[t]] =
            "single_k" + std::to_string(model.adaptors[static_cast<size_t>(g)].k);
      }
      out["oracle_selection"] = picks;
      rows.emplace_back("oracle", sel.report);
    }
    out["models"] = models;

    fs::create_directories(paths_.eval_dir());
    write_report_json(paths_.report().string(), out);
    json outputs;
    outputs["evaluation/report.json"] = fingerprint_file(paths_.report().string());
    for (const auto& [label, rep] : rows) {
      const fs::path csv = paths_.eval_dir() / ("per_query_" + label + ".csv");
      write_per_query_csv(csv.string(), rep);
      outputs["evaluation/" + csv.filename().string()] = fingerprint_file(csv.string());
    }
    if (cfg_.eval.plot && rows.size() > 1) {
      std::vector<std::string> series;
      std::vector<std::vector<double>> deltas;
      for (const auto& [label, rep] : rows) {
        if (label == "frozen") continue;
        series.push_back(label);
        std::vector<double> d;
        for (size_t t = 0; t < rep.tasks.size(); ++t)
          d.push_back(rep.tasks[t].rp_mean - frozen->tasks[t].rp_mean);
        deltas.push_back(std::move(d));
      }
      const fs::path svg = paths_.eval_dir() / "rp_delta.svg";
      atomic_write_text(svg.string(),
                        svg_bar_chart("per-task RP delta vs frozen", task_names, series, deltas));
      outputs["evaluation/rp_delta.svg"] = fingerprint_file(svg.string());
    }
    record_step("evaluate", inputs, outputs);
    return out;
  }

  // Dataset access (lazy; synthetic by default, image folder when configured).
  const Benchmark& benchmark() {
    if (!bench_) {
      if (cfg_.data.root.empty()) {
        bench_ = generate_synthetic_benchmark(cfg_.data.synthetic);
      } else {
        bench_ = load_image_folder(cfg_.data.root, cfg_.backbone.image_h);
      }
    }
    return *bench_;
  }

  const UnlabeledPool& pool() {
    if (!pool_) pool_ = make_unlabeled_pool(benchmark().train);
    return *pool_;
  }

 private:
  PipelineConfig cfg_;
  RunPaths paths_;
  std::optional<Benchmark> bench_;
  std::optional<UnlabeledPool> pool_;
  bool run_dir_ready_ = false;

  static std::string backbone_fingerprint(GrappaModel<S>& model) {
    auto params = model.backbone_params();
    return fingerprint_params(params);
  }

  void require(const fs::path& p, const std::string& what, const std::string& producer) const {
    if (!fs::exists(p))
      throw PrerequisiteError("missing " + what + " at " + p.string() + "; run the '" +
                              producer + "' step first");
  }

  // Loads backbone + all adaptor sets; fills `inputs` with their hashes.
  void load_full_model(GrappaModel<S>& model, json* inputs) {
    require(paths_.backbone(), "backbone checkpoint", "pseudolabels");
    load_backbone(paths_.backbone().string(), model);
    model.init_fusion_layers();
    if (inputs) (*inputs)["backbone.ckpt"] = fingerprint_file(paths_.backbone().string());
    model.adaptors.clear();
    for (size_t g = 0; g < cfg_.pseudolabels.k_list.size(); ++g) {
      const int k = cfg_.pseudolabels.k_list[g];
      const fs::path p = paths_.adaptor(static_cast<int>(g), k);
      require(p, "adaptor set g" + std::to_string(g) + " (k=" + std::to_string(k) + ")",
              "train-adaptors");
      model.adaptors.push_back(load_adaptor_set<S>(p.string(), model.backbone.cfg));
      if (inputs) (*inputs)[p.filename().string()] = fingerprint_file(p.string());
    }
  }

  // Like load_full_model but tolerates missing adaptors (frozen-only eval).
  bool load_full_model_optional(GrappaModel<S>& model, json* inputs) {
    require(paths_.backbone(), "backbone checkpoint", "pseudolabels");
    load_backbone(paths_.backbone().string(), model);
    model.init_fusion_layers();
    if (inputs) (*inputs)["backbone.ckpt"] = fingerprint_file(paths_.backbone().string());
    model.adaptors.clear();
    for (size_t g = 0; g < cfg_.pseudolabels.k_list.size(); ++g) {
      const int k = cfg_.pseudolabels.k_list[g];
      const fs::path p = paths_.adaptor(static_cast<int>(g), k);
      if (!fs::exists(p)) {
        model.adaptors.clear();
        return false;
      }
      model.adaptors.push_back(load_adaptor_set<S>(p.string(), model.backbone.cfg));
      if (inputs) (*inputs)[p.filename().string()] = fingerprint_file(p.string());
    }
    return true;
  }

  void prepare_run_dir() {
    if (run_dir_ready_) return;
    fs::create_directories(paths_.out);
    check_manifest_config();
    atomic_write_text(paths_.config().string(), canonical_config_json(cfg_));
    run_dir_ready_ = true;
  }

  // Cross-step continuity: a run directory remembers the config hash it was
  // created with; a different hash is a warning, or an error under --strict.
  void check_manifest_config() {
    const fs::path m = paths_.manifest();
    if (!fs::exists(m)) return;
    std::ifstream f(m);
    if (!f) return;
    json j = json::parse(f, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) return;
    const std::string stored = j.value("config_hash", "");
    if (stored.empty() || stored == config_hash(cfg_)) return;
    if (cfg_.strict)
      throw ConfigError("config hash mismatch with existing run dir " + paths_.out.string() +
                        " (strict mode)");
    std::cerr << "[warn] config hash differs from the one recorded in "
              << m.string() << "; artifacts may be inconsistent\n";
  }

  void record_step(const std::string& step, const json& inputs, const json& outputs) {
    json j;
    const fs::path m = paths_.manifest();
    if (fs::exists(m)) {
      std::ifstream f(m);
      j = json::parse(f, nullptr, /*allow_exceptions=*/false);
      if (j.is_discarded()) j = json();
    }
    j["schema_version"] = 1;
    j["config_hash"] = config_hash(cfg_);
    j["steps"][step] = {{"time", iso8601_utc_now()}, {"inputs", inputs}, {"outputs", outputs}};
    atomic_write_text(m.string(), j.dump(2) + "\n");
  }
};

using PipelineF = Pipeline<float>;

}  // namespace grappa
