// Command-line front end for the adaptation pipeline.
//
// Subcommands mirror the pipeline steps:
//   grappa pseudolabels   --config cfg.json [--seed N] [--out DIR]
//   grappa train-adaptors --config cfg.json [--granularity I] ...
//   grappa train-fusion   --config cfg.json [--variant avg|tc|ac] ...
//   grappa evaluate       --config cfg.json [--plot] [--baseline LABEL] ...
//   grappa all            --config cfg.json ...
//   grappa make-synthetic --out DIR [--seed N]   (writes the benchmark as PPM folders)
//
// Exit codes: 0 success, 2 configuration/shape/io error, 3 missing
// prerequisite artifact, 4 numeric divergence.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <Eigen/Core>

#include "grappa/grappa.hpp"

namespace {

grappa::PipelineConfig load_config(const std::string& path) {
  grappa::PipelineConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream f(path);
  if (!f) throw grappa::IoError("cannot open config file " + path);
  grappa::json j = grappa::json::parse(f, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw grappa::ConfigError("config file is not valid JSON: " + path);
  cfg = j.get<grappa::PipelineConfig>();
  return cfg;
}

// Writes the synthetic benchmark to disk in the image-folder layout, so the
// folder loader path can be exercised end to end.
int make_synthetic(const std::string& out, const grappa::SyntheticSpec& spec) {
  namespace fs = std::filesystem;
  grappa::Benchmark bench = grappa::generate_synthetic_benchmark(spec);
  auto dump = [&](const grappa::TaskDataset& ds) {
    for (size_t i = 0; i < ds.images.size(); ++i) {
      const std::string cls = ds.class_names[static_cast<size_t>(ds.labels[i])];
      const fs::path dir = fs::path(out) / ds.name / cls;
      fs::create_directories(dir);
      char name[32];
      std::snprintf(name, sizeof(name), "img_%04zu.ppm", i);
      grappa::write_ppm((dir / name).string(), ds.images[i]);
    }
  };
  for (const auto& t : bench.train) dump(t);
  for (const auto& t : bench.test) dump(t);
  std::cout << grappa::benchmark_manifest(bench).dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* threads = std::getenv("GRAPPA_THREADS"))
    Eigen::setNbThreads(std::max(1, std::atoi(threads)));

  CLI::App app{"Label-free multi-task adaptation of a frozen vision transformer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", grappa::kVersion);

  std::string config_path, out_dir, variant, baseline;
  std::optional<uint64_t> seed;
  int granularity = -1;
  bool plot = false, strict = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "pipeline config JSON");
    cmd->add_option("--seed", seed, "override the pipeline seed");
    cmd->add_option("--out", out_dir, "override the output directory");
    cmd->add_flag("--strict", strict, "treat config-hash mismatches as errors");
  };

  CLI::App* c_pseudo = app.add_subcommand("pseudolabels", "step 1: k-means pseudo-labels");
  add_common(c_pseudo);
  CLI::App* c_adapt = app.add_subcommand("train-adaptors", "step 2: train adaptor sets");
  add_common(c_adapt);
  c_adapt->add_option("--granularity", granularity, "train only this granularity index");
  CLI::App* c_fuse = app.add_subcommand("train-fusion", "step 3: train fusion attention");
  add_common(c_fuse);
  c_fuse->add_option("--variant", variant, "avg | tc | ac");
  CLI::App* c_eval = app.add_subcommand("evaluate", "retrieval evaluation");
  add_common(c_eval);
  c_eval->add_flag("--plot", plot, "emit an SVG of per-task RP deltas");
  c_eval->add_option("--baseline", baseline, "baseline model label for deltas");
  CLI::App* c_all = app.add_subcommand("all", "run the full pipeline");
  add_common(c_all);
  c_all->add_flag("--plot", plot, "emit an SVG of per-task RP deltas");
  CLI::App* c_synth = app.add_subcommand("make-synthetic", "write the synthetic benchmark");
  std::string synth_out = "synthetic";
  uint64_t synth_seed = 1234;
  c_synth->add_option("--out", synth_out, "output folder");
  c_synth->add_option("--seed", synth_seed, "generator seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_synth->parsed()) {
      grappa::SyntheticSpec spec;
      spec.seed = synth_seed;
      return make_synthetic(synth_out, spec);
    }
    grappa::PipelineConfig cfg = load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (strict) cfg.strict = true;
    if (plot) cfg.eval.plot = true;
    if (!variant.empty()) cfg.fusion.variant = variant;
    if (!baseline.empty()) cfg.eval.baseline = baseline;

    grappa::PipelineF pipe(cfg);
    if (c_pseudo->parsed()) return pipe.run("pseudolabels");
    if (c_adapt->parsed()) {
      if (granularity >= 0) {
        pipe.step_train_adaptors(granularity);
        return 0;
      }
      return pipe.run("train-adaptors");
    }
    if (c_fuse->parsed()) return pipe.run("train-fusion");
    if (c_eval->parsed()) return pipe.run("evaluate");
    if (c_all->parsed()) return pipe.run("all");
    std::cerr << "no subcommand\n";
    return 2;
  } catch (const grappa::PrerequisiteError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const grappa::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const grappa::ConfigError& e) {  // includes ShapeError
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const grappa::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
}
