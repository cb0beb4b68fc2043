#pragma once

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "grappa/common.hpp"
#include "grappa/metrics.hpp"

namespace grappa {

inline constexpr int kReportSchemaVersion = 1;

// Shortest-exact decimal for a double; same bits always give the same text,
// which is what makes reports byte-stable across reruns.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void atomic_write_text(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, target);
}

inline json task_eval_to_json(const TaskEval& t) {
  return json{{"name", t.name},
              {"rp", t.rp_mean},
              {"map", t.map_mean},
              {"scored", t.scored},
              {"excluded", t.excluded}};
}

// Report schema v1. When a baseline is given, per-task and aggregate deltas
// (model minus baseline) are included; task lists must then match.
inline json report_to_json(const RetrievalReport& report,
                           const RetrievalReport* baseline = nullptr) {
  json tasks = json::array();
  for (size_t i = 0; i < report.tasks.size(); ++i) {
    json t = task_eval_to_json(report.tasks[i]);
    if (baseline != nullptr) {
      if (baseline->tasks.size() != report.tasks.size() ||
          baseline->tasks[i].name != report.tasks[i].name)
        throw ConfigError("report: baseline covers a different task list");
      t["rp_delta"] = report.tasks[i].rp_mean - baseline->tasks[i].rp_mean;
      t["map_delta"] = report.tasks[i].map_mean - baseline->tasks[i].map_mean;
    }
    tasks.push_back(t);
  }
  json j{{"schema_version", kReportSchemaVersion},
         {"model_id", report.model_id},
         {"tasks", tasks},
         {"aggregate", json{{"rp", report.rp_mean}, {"map", report.map_mean}}}};
  if (baseline != nullptr) {
    j["baseline_id"] = baseline->model_id;
    j["aggregate"]["rp_delta"] = report.rp_mean - baseline->rp_mean;
    j["aggregate"]["map_delta"] = report.map_mean - baseline->map_mean;
  }
  return j;
}

// Flat per-query values: one row per scored query of every task.
inline std::string per_query_csv(const RetrievalReport& report) {
  std::string out = "task,query_id,r,rp,map\n";
  for (const auto& t : report.tasks) {
    for (const auto& q : t.per_query) {
      out += t.name;
      out += ',' + std::to_string(q.query_id);
      out += ',' + std::to_string(q.r);
      out += ',' + format_double(q.rp);
      out += ',' + format_double(q.map);
      out += '\n';
    }
  }
  return out;
}

// Grouped bar chart of one value per (task, series) — used for per-task RP
// deltas against the frozen baseline. Pure SVG text, deterministic.
inline std::string svg_bar_chart(const std::string& title,
                                 const std::vector<std::string>& task_names,
                                 const std::vector<std::string>& series_names,
                                 const std::vector<std::vector<double>>& values) {
  if (series_names.size() != values.size())
    throw ConfigError("svg_bar_chart: series/values size mismatch");
  for (const auto& row : values)
    if (row.size() != task_names.size())
      throw ConfigError("svg_bar_chart: value row length != task count");

  const int bar_w = 26, gap = 18, group_pad = 30;
  const int n_tasks = static_cast<int>(task_names.size());
  const int n_series = static_cast<int>(series_names.size());
  const int group_w = n_series * bar_w + group_pad;
  const int width = 90 + n_tasks * group_w + 160;
  const int height = 320;
  const double plot_top = 50.0, plot_bottom = 260.0, axis_y0 = 200.0;

  double vmax = 0.05;
  for (const auto& row : values)
    for (double v : row) vmax = std::max(vmax, std::abs(v));
  const double scale = (axis_y0 - plot_top) / vmax;

  static const char* palette[] = {"#4878d0", "#ee854a", "#6acc64", "#d65f5f",
                                  "#956cb4", "#8c613c", "#dc7ec0", "#797979"};
  const int n_colors = 8;

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
       "\" height=\"" + std::to_string(height) + "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"20\" y=\"28\" font-family=\"sans-serif\" font-size=\"16\">" + title +
       "</text>\n";
  s += "<line x1=\"60\" y1=\"" + format_double(axis_y0) + "\" x2=\"" +
       std::to_string(width - 150) + "\" y2=\"" + format_double(axis_y0) +
       "\" stroke=\"#444\"/>\n";
  for (int t = 0; t < n_tasks; ++t) {
    const int gx = 90 + t * group_w;
    for (int m = 0; m < n_series; ++m) {
      const double v = values[static_cast<size_t>(m)][static_cast<size_t>(t)];
      const double h = std::abs(v) * scale;
      const double y = v >= 0 ? axis_y0 - h : axis_y0;
      s += "<rect x=\"" + std::to_string(gx + m * bar_w) + "\" y=\"" + format_double(y) +
           "\" width=\"" + std::to_string(bar_w - 4) + "\" height=\"" + format_double(h) +
           "\" fill=\"" + palette[m % n_colors] + "\"/>\n";
    }
    s += "<text x=\"" + std::to_string(gx) + "\" y=\"" + format_double(plot_bottom + 20) +
         "\" font-family=\"sans-serif\" font-size=\"12\">" + task_names[static_cast<size_t>(t)] +
         "</text>\n";
  }
  for (int m = 0; m < n_series; ++m) {
    const int ly = 60 + m * 20;
    s += "<rect x=\"" + std::to_string(width - 140) + "\" y=\"" + std::to_string(ly) +
         "\" width=\"12\" height=\"12\" fill=\"" + palette[m % n_colors] + "\"/>\n";
    s += "<text x=\"" + std::to_string(width - 122) + "\" y=\"" + std::to_string(ly + 11) +
         "\" font-family=\"sans-serif\" font-size=\"12\">" +
         series_names[static_cast<size_t>(m)] + "</text>\n";
  }
  s += std::string("<text x=\"20\" y=\"") + format_double(plot_top - 6) +
       "\" font-family=\"sans-serif\" font-size=\"11\">max |v| = " + format_double(vmax) +
       "</text>\n";
  s += "</svg>\n";
  (void)gap;
  return s;
}

inline void write_report_json(const std::string& path, const json& j) {
  atomic_write_text(path, j.dump(2) + "\n");
}

inline void write_per_query_csv(const std::string& path, const RetrievalReport& report) {
  atomic_write_text(path, per_query_csv(report));
}

}  // namespace grappa
