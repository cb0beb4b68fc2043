#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grappa/config.hpp"
#include "grappa/image.hpp"
#include "grappa/rng.hpp"

#ifdef GRAPPA_HAS_OPENCV
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#endif

namespace grappa {

struct TaskDataset {
  std::string name;
  std::string split;  // "train" | "test"
  std::vector<Image> images;
  std::vector<int32_t> labels;
  std::vector<std::string> class_names;  // indexed by label
  // Generator factor metadata (synthetic benchmark only; empty for folders).
  std::vector<int32_t> factor_shape, factor_color, factor_texture;
};

// Union of all task train splits with class and task identity stripped.
// Deliberately has no label field at all: training code that compiles against
// this type cannot peek.
struct UnlabeledPool {
  std::vector<Image> images;
  std::vector<uint64_t> ids;  // stable, duplicate-free
};

struct Benchmark {
  std::vector<TaskDataset> train;
  std::vector<TaskDataset> test;
};

inline UnlabeledPool make_unlabeled_pool(const std::vector<TaskDataset>& train_splits) {
  UnlabeledPool pool;
  for (const auto& ds : train_splits) {
    if (ds.split != "train")
      throw ConfigError("make_unlabeled_pool: only train splits may enter the pool");
    for (const auto& img : ds.images) {
      pool.ids.push_back(static_cast<uint64_t>(pool.images.size()));
      pool.images.push_back(img);
    }
  }
  return pool;
}

// ------------------------------------------------------ synthetic benchmark

namespace detail {

inline constexpr float kPalette[4][3] = {
    {0.90f, 0.35f, 0.25f},  // warm red
    {0.25f, 0.45f, 0.90f},  // blue
    {0.30f, 0.85f, 0.35f},  // green
    {0.92f, 0.85f, 0.30f},  // yellow
};

inline bool inside_shape(int shape_id, double dx, double dy, double r) {
  switch (shape_id % 4) {
    case 0: return dx * dx + dy * dy <= r * r;                              // disk
    case 1: return std::abs(dx) <= r && std::abs(dy) <= r;                  // square
    case 2: return std::abs(dx) + std::abs(dy) <= 1.3 * r;                  // diamond
    default: {                                                              // frame
      const double m = std::max(std::abs(dx), std::abs(dy));
      return m <= r && m >= 0.55 * r;
    }
  }
}

inline float texture_factor(int texture_id, int y, int x) {
  switch (texture_id % 4) {
    case 0: return ((y / 2) % 2 == 0) ? 1.0f : 0.7f;             // horizontal stripes
    case 1: return ((x / 2) % 2 == 0) ? 1.0f : 0.7f;             // vertical stripes
    case 2: return (((x / 2) + (y / 2)) % 2 == 0) ? 1.0f : 0.7f; // checker
    default: return 1.0f;                                        // flat
  }
}

}  // namespace detail

// One image of the (shape, color, texture) factor model. The three factors
// move pixel mass at very different magnitudes — shape changes which pixels
// are foreground at all, color changes channel balance, texture modulates
// brightness — giving the variance ladder shape > color > texture that makes
// granularity levels genuinely distinct.
inline Image render_synthetic_image(int shape_id, int color_id, int texture_id, int size,
                                    double noise, Rng& rng) {
  Image img(size, size, 3);
  const float bg = 0.15f + static_cast<float>(rng.uniform(-0.05, 0.05));
  for (auto& v : img.pix) v = bg;
  const double cx = size / 2.0 + rng.uniform(-2.0, 2.0);
  const double cy = size / 2.0 + rng.uniform(-2.0, 2.0);
  const double r = size * 0.28 + rng.uniform(-1.0, 1.0);
  const float* base = detail::kPalette[color_id % 4];
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      if (!detail::inside_shape(shape_id, x + 0.5 - cx, y + 0.5 - cy, r)) continue;
      const float tex = detail::texture_factor(texture_id, y, x);
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = base[ch] * tex;
    }
  if (noise > 0.0)
    for (auto& v : img.pix)
      v = std::clamp(v + static_cast<float>(noise * rng.normal()), 0.f, 1.f);
  return img;
}

// Three tasks over one factor hierarchy:
//   coarse: class = shape                     (color, texture free)
//   mid:    class = (shape, color)            (texture free)
//   fine:   class = (shape, color, texture)
// Class indices interleave the shape factor (class % n_shapes) so that the
// first-half/second-half split leaves every shape represented in the training
// pool — the transfer the method needs — while each task's own train and test
// class sets stay disjoint.
inline Benchmark generate_synthetic_benchmark(const SyntheticSpec& spec) {
  spec.validate();
  const int ns = spec.coarse_classes;
  const int colors_per_shape = spec.mid_classes / ns;
  const int textures_per_color = spec.fine_classes / spec.mid_classes;
  if (colors_per_shape > 4 || textures_per_color > 4)
    throw ConfigError("synthetic: at most 4 colors per shape and 4 textures per color");

  struct TaskDef {
    std::string name;
    int n_classes;
  };
  const TaskDef defs[3] = {{"coarse", ns}, {"mid", spec.mid_classes}, {"fine", spec.fine_classes}};

  Benchmark bench;
  for (const auto& def : defs) {
    TaskDataset train, test;
    train.name = test.name = def.name;
    train.split = "train";
    test.split = "test";
    const int n_train_classes = def.n_classes / 2;
    for (int cls = 0; cls < def.n_classes; ++cls) {
      char cname[8];
      std::snprintf(cname, sizeof(cname), "c%02d", cls);
      TaskDataset& dst = (cls < n_train_classes) ? train : test;
      dst.class_names.push_back(cname);
      const int32_t local_label = static_cast<int32_t>(dst.class_names.size()) - 1;

      Rng rng = Rng::stream(spec.seed, "synthetic/" + def.name + "/" + cname);
      for (int i = 0; i < spec.images_per_class; ++i) {
        int shape, color, texture;
        if (def.name == "coarse") {
          shape = cls;
          color = static_cast<int>(rng.uniform_int(colors_per_shape));
          texture = static_cast<int>(rng.uniform_int(textures_per_color));
        } else if (def.name == "mid") {
          shape = cls % ns;
          color = cls / ns;
          texture = static_cast<int>(rng.uniform_int(textures_per_color));
        } else {
          shape = cls % ns;
          color = (cls / ns) % colors_per_shape;
          texture = cls / (ns * colors_per_shape);
        }
        dst.images.push_back(
            render_synthetic_image(shape, color, texture, spec.image_size, spec.noise, rng));
        dst.labels.push_back(local_label);
        dst.factor_shape.push_back(shape);
        dst.factor_color.push_back(color);
        dst.factor_texture.push_back(texture);
      }
    }
    bench.train.push_back(std::move(train));
    bench.test.push_back(std::move(test));
  }
  return bench;
}

// --------------------------------------------------------- folder ingestion

// root/<task>/<class>/<image>. Classes are split alphabetically: the first
// floor(n/2) class names go to train, the rest to test. PPM always works;
// other formats need the optional OpenCV codec build.
inline Image load_image_file(const std::string& path, int image_size) {
  namespace fs = std::filesystem;
  const std::string ext = fs::path(path).extension().string();
  Image raw;
  if (ext == ".ppm" || ext == ".PPM") {
    raw = read_ppm(path);
  } else {
#ifdef GRAPPA_HAS_OPENCV
    cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
    if (m.empty()) throw IoError("cannot decode image: " + path);
    raw = Image(m.rows, m.cols, 3);
    for (int y = 0; y < m.rows; ++y)
      for (int x = 0; x < m.cols; ++x) {
        const auto& px = m.at<cv::Vec3b>(y, x);  // BGR
        raw.at(y, x, 0) = px[2] / 255.f;
        raw.at(y, x, 1) = px[1] / 255.f;
        raw.at(y, x, 2) = px[0] / 255.f;
      }
#else
    throw IoError("unsupported image format (build with OpenCV for non-PPM): " + path);
#endif
  }
  return resize_center_crop(raw, image_size);
}

inline Benchmark load_image_folder(const std::string& root, int image_size) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root);

  std::vector<std::string> task_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) task_dirs.push_back(e.path().filename().string());
  std::sort(task_dirs.begin(), task_dirs.end());
  if (task_dirs.empty()) throw IoError("dataset root has no task directories: " + root);

  Benchmark bench;
  for (const auto& task : task_dirs) {
    std::vector<std::string> class_dirs;
    for (const auto& e : fs::directory_iterator(fs::path(root) / task))
      if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw IoError("task has no class directories: " + task);

    TaskDataset train, test;
    train.name = test.name = task;
    train.split = "train";
    test.split = "test";
    const size_t n_train = class_dirs.size() / 2;
    for (size_t c = 0; c < class_dirs.size(); ++c) {
      TaskDataset& dst = (c < n_train) ? train : test;
      dst.class_names.push_back(class_dirs[c]);
      const int32_t label = static_cast<int32_t>(dst.class_names.size()) - 1;
      std::vector<std::string> files;
      for (const auto& e : fs::directory_iterator(fs::path(root) / task / class_dirs[c]))
        if (e.is_regular_file()) files.push_back(e.path().string());
      std::sort(files.begin(), files.end());
      if (files.empty())
        throw IoError("empty class directory: " + task + "/" + class_dirs[c]);
      for (const auto& f : files) {
        dst.images.push_back(load_image_file(f, image_size));
        dst.labels.push_back(label);
      }
    }
    bench.train.push_back(std::move(train));
    bench.test.push_back(std::move(test));
  }
  return bench;
}

// Per-task image/class counts in the style of a dataset statistics table.
inline nlohmann::json benchmark_manifest(const Benchmark& bench) {
  nlohmann::json tasks = nlohmann::json::array();
  int64_t total_train = 0, total_test = 0;
  for (size_t t = 0; t < bench.train.size(); ++t) {
    const auto& tr = bench.train[t];
    const auto& te = bench.test[t];
    tasks.push_back({{"task", tr.name},
                     {"train_classes", tr.class_names.size()},
                     {"train_images", tr.images.size()},
                     {"test_classes", te.class_names.size()},
                     {"test_images", te.images.size()}});
    total_train += static_cast<int64_t>(tr.images.size());
    total_test += static_cast<int64_t>(te.images.size());
  }
  return {{"tasks", tasks}, {"total_train_images", total_train}, {"total_test_images", total_test}};
}

}  // namespace grappa
