#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "grappa/common.hpp"

namespace grappa {

// One task's evaluation inputs: embeddings plus class labels, test split only.
template <typename S>
struct EvalTask {
  std::string name;
  Mat<S> Z;                     // (n, D)
  std::vector<int32_t> labels;  // (n)
};

namespace detail {

// Cosine similarity accumulated coordinate-wise in double, ascending index,
// so independent re-implementations of the same loop agree bitwise.
template <typename S>
double cosine(const Mat<S>& Z, int a, int b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (Eigen::Index j = 0; j < Z.cols(); ++j) {
    const double x = static_cast<double>(Z(a, j));
    const double y = static_cast<double>(Z(b, j));
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return denom > 0.0 ? dot / denom : 0.0;
}

}  // namespace detail

// All ids except the query, sorted by descending cosine similarity to it;
// ties broken by ascending id so rankings (and reports) are deterministic.
template <typename S>
std::vector<int> rank_gallery(int query_id, const Mat<S>& Z) {
  const int n = static_cast<int>(Z.rows());
  if (n < 2) throw ShapeError("rank_gallery: need at least two embeddings");
  if (query_id < 0 || query_id >= n) throw ShapeError("rank_gallery: query id out of range");
  std::vector<double> sim(static_cast<size_t>(n), 0.0);
  std::vector<int> ids;
  ids.reserve(static_cast<size_t>(n - 1));
  for (int i = 0; i < n; ++i) {
    if (i == query_id) continue;
    sim[static_cast<size_t>(i)] = detail::cosine(Z, query_id, i);
    ids.push_back(i);
  }
  std::sort(ids.begin(), ids.end(), [&](int a, int b) {
    const double sa = sim[static_cast<size_t>(a)], sb = sim[static_cast<size_t>(b)];
    if (sa != sb) return sa > sb;
    return a < b;
  });
  return ids;
}

// Fraction of the top-R ranked items that are relevant. R must be >= 1; the
// R = 0 case (singleton class) is excluded upstream, never scored.
inline double r_precision(const std::vector<int>& ranking, const std::vector<char>& relevant,
                          int R) {
  if (R < 1) throw ConfigError("r_precision: R must be >= 1");
  if (static_cast<size_t>(R) > ranking.size())
    throw ShapeError("r_precision: R exceeds the gallery size");
  int hits = 0;
  for (int i = 0; i < R; ++i)
    if (relevant[static_cast<size_t>(ranking[static_cast<size_t>(i)])]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(R);
}

// (1/R) sum_{i=1..R} [rel(i)] * P(i) with P(i) = (#relevant in top i)/i.
inline double map_at_r(const std::vector<int>& ranking, const std::vector<char>& relevant,
                       int R) {
  if (R < 1) throw ConfigError("map_at_r: R must be >= 1");
  if (static_cast<size_t>(R) > ranking.size())
    throw ShapeError("map_at_r: R exceeds the gallery size");
  int hits = 0;
  double sum = 0.0;
  for (int i = 1; i <= R; ++i) {
    if (relevant[static_cast<size_t>(ranking[static_cast<size_t>(i - 1)])]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(i);
    }
  }
  return sum / static_cast<double>(R);
}

struct QueryScore {
  int query_id = 0;
  int r = 0;  // same-class gallery count
  double rp = 0.0;
  double map = 0.0;
};

struct TaskEval {
  std::string name;
  double rp_mean = 0.0;
  double map_mean = 0.0;
  int scored = 0;
  int excluded = 0;  // queries with no same-class gallery item
  std::vector<QueryScore> per_query;
};

struct RetrievalReport {
  std::vector<TaskEval> tasks;
  double rp_mean = 0.0;   // mean of per-task means
  double map_mean = 0.0;  // mean of per-task means
  std::string model_id;
};

// Leave-one-out evaluation of one task: every embedding queries all others.
template <typename S>
TaskEval evaluate_task(const EvalTask<S>& task) {
  const int n = static_cast<int>(task.Z.rows());
  if (n < 2) throw ShapeError("evaluate_task: task needs at least two images");
  if (task.labels.size() != static_cast<size_t>(n))
    throw ShapeError("evaluate_task: label count mismatch");
  TaskEval out;
  out.name = task.name;
  double rp_sum = 0.0, map_sum = 0.0;
  for (int q = 0; q < n; ++q) {
    int R = 0;
    std::vector<char> relevant(static_cast<size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
      if (i == q) continue;
      if (task.labels[static_cast<size_t>(i)] == task.labels[static_cast<size_t>(q)]) {
        relevant[static_cast<size_t>(i)] = 1;
        ++R;
      }
    }
    if (R == 0) {
      ++out.excluded;
      continue;
    }
    std::vector<int> ranking = rank_gallery(q, task.Z);
    QueryScore s;
    s.query_id = q;
    s.r = R;
    s.rp = r_precision(ranking, relevant, R);
    s.map = map_at_r(ranking, relevant, R);
    out.per_query.push_back(s);
    rp_sum += s.rp;
    map_sum += s.map;
    ++out.scored;
  }
  if (out.scored > 0) {
    out.rp_mean = rp_sum / static_cast<double>(out.scored);
    out.map_mean = map_sum / static_cast<double>(out.scored);
  }
  return out;
}

template <typename S>
RetrievalReport evaluate_tasks(const std::vector<EvalTask<S>>& tasks,
                               const std::string& model_id) {
  if (tasks.empty()) throw ConfigError("evaluate_tasks: no tasks given");
  RetrievalReport report;
  report.model_id = model_id;
  double rp_sum = 0.0, map_sum = 0.0;
  for (const auto& t : tasks) {
    report.tasks.push_back(evaluate_task(t));
    rp_sum += report.tasks.back().rp_mean;
    map_sum += report.tasks.back().map_mean;
  }
  report.rp_mean = rp_sum / static_cast<double>(tasks.size());
  report.map_mean = map_sum / static_cast<double>(tasks.size());
  return report;
}

struct OracleSelection {
  std::vector<int> best_index;  // per task: winning single-adaptor model
  RetrievalReport report;       // per task: that winner's scores
};

// Label-aware oracle: per task, pick the single-adaptor model with the best
// RP (ties to the lower granularity index) and report its scores.
inline OracleSelection oracle_select(const std::vector<RetrievalReport>& per_adaptor) {
  if (per_adaptor.empty()) throw ConfigError("oracle_select: no reports given");
  const size_t n_tasks = per_adaptor.front().tasks.size();
  for (const auto& r : per_adaptor) {
    if (r.tasks.size() != n_tasks)
      throw ConfigError("oracle_select: reports cover different task lists");
    for (size_t t = 0; t < n_tasks; ++t)
      if (r.tasks[t].name != per_adaptor.front().tasks[t].name)
        throw ConfigError("oracle_select: reports cover different task lists");
  }
  OracleSelection sel;
  sel.report.model_id = "oracle";
  double rp_sum = 0.0, map_sum = 0.0;
  for (size_t t = 0; t < n_tasks; ++t) {
    int best = 0;
    for (size_t a = 1; a < per_adaptor.size(); ++a)
      if (per_adaptor[a].tasks[t].rp_mean > per_adaptor[static_cast<size_t>(best)].tasks[t].rp_mean)
        best = static_cast<int>(a);
    sel.best_index.push_back(best);
    sel.report.tasks.push_back(per_adaptor[static_cast<size_t>(best)].tasks[t]);
    rp_sum += sel.report.tasks.back().rp_mean;
    map_sum += sel.report.tasks.back().map_mean;
  }
  sel.report.rp_mean = rp_sum / static_cast<double>(n_tasks);
  sel.report.map_mean = map_sum / static_cast<double>(n_tasks);
  return sel;
}

}  // namespace grappa
