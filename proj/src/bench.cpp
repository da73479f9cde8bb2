// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#include "sarfm/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "sarfm/error.hpp"
#include "sarfm/tsne.hpp"

namespace sarfm {

double balanced_accuracy(const std::vector<int>& preds, const std::vector<int>& labels,
                         int num_classes) {
  if (preds.size() != labels.size()) throw Error::state("balanced_accuracy: length mismatch");
  if (num_classes < 1) throw Error::config("balanced_accuracy: num_classes < 1");
  std::vector<long long> total(static_cast<std::size_t>(num_classes), 0);
  std::vector<long long> correct(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= num_classes) {
      throw Error::data("balanced_accuracy: label " + std::to_string(y) + " outside [0, " +
                        std::to_string(num_classes) + ")");
    }
    total[static_cast<std::size_t>(y)] += 1;
    if (preds[i] == y) correct[static_cast<std::size_t>(y)] += 1;
  }
  double sum = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    if (total[static_cast<std::size_t>(c)] == 0) {
      throw Error::data("balanced_accuracy: undefined-class error, class " + std::to_string(c) +
                        " has no test samples");
    }
    sum += static_cast<double>(correct[static_cast<std::size_t>(c)]) /
           static_cast<double>(total[static_cast<std::size_t>(c)]);
  }
  return sum / num_classes;
}

std::string tri_name(Tri t) {
  switch (t) {
    case Tri::no: return "F";
    case Tri::yes: return "T";
    case Tri::unknown: return "?";
  }
  return "?";
}

void merge_overlap_table(OverlapTable& table, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error::data("cannot open overlap table: " + path.string());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw Error::data("parse error: line " + std::to_string(line_no) + " of " + path.string() +
                        ": expected corpus<TAB>tasks");
    }
    const std::string corpus = line.substr(0, tab);
    const std::string tasks = line.substr(tab + 1);
    auto& entry = table.corpus_tasks[corpus];
    if (tasks == "-") continue;
    std::string cur;
    for (char ch : tasks + ",") {
      if (ch == ',') {
        if (!cur.empty()) entry.insert(cur);
        cur.clear();
      } else {
        cur.push_back(ch);
      }
    }
  }
}

OverlapTable load_overlap_table(const std::filesystem::path& path) {
  OverlapTable table;
  merge_overlap_table(table, path);
  return table;
}

Tri contamination_flag(const std::vector<std::string>& provenance, const std::string& task_name,
                       const OverlapTable& table) {
  bool any_unknown = false;
  for (const auto& corpus : provenance) {
    const auto it = table.corpus_tasks.find(corpus);
    if (it == table.corpus_tasks.end()) {
      any_unknown = true;
      continue;
    }
    if (it->second.count(task_name)) return Tri::yes;
  }
  return any_unknown ? Tri::unknown : Tri::no;
}

void EvalReport::finalize() {
  auto key = [](const EvalRow& r) {
    return std::tie(r.backbone, r.recipe, r.task, r.shots, r.split);
  };
  std::sort(rows.begin(), rows.end(),
            [&](const EvalRow& a, const EvalRow& b) { return key(a) < key(b); });
  std::sort(lowshot_means.begin(), lowshot_means.end(), [](const LowshotMean& a,
                                                           const LowshotMean& b) {
    return std::tie(a.backbone, a.recipe, a.task, a.shots) <
           std::tie(b.backbone, b.recipe, b.task, b.shots);
  });
  aggregates.clear();
  std::map<std::pair<std::string, std::string>, std::pair<double, int>> sums;
  for (const auto& row : rows) {
    if (row.shots >= 0 || !row.error.empty()) continue;
    auto& [sum, count] = sums[{row.backbone, row.recipe}];
    sum += row.balanced_accuracy;
    count += 1;
  }
  for (const auto& [bk, sc] : sums) {
    aggregates.push_back({bk.first, bk.second, sc.first / sc.second, sc.second});
  }
}

bool EvalReport::has_errors() const {
  return std::any_of(rows.begin(), rows.end(),
                     [](const EvalRow& r) { return !r.error.empty(); });
}

void EvalReport::append(const EvalReport& other) {
  rows.insert(rows.end(), other.rows.begin(), other.rows.end());
  lowshot_means.insert(lowshot_means.end(), other.lowshot_means.begin(),
                       other.lowshot_means.end());
  finalize();
}

namespace {

std::string full_precision(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string percent_1dp(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", fraction * 100.0);
  return buf;
}

}  // namespace

std::string render_report_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "backbone,recipe,task,shots,split,balanced_accuracy,delta_params,contaminated\n";
  for (const auto& row : report.rows) {
    out << row.backbone << ',' << row.recipe << ',' << row.task << ',';
    if (row.shots >= 0) out << row.shots;
    out << ',';
    if (row.split >= 0) out << row.split;
    out << ',';
    if (row.error.empty()) out << full_precision(row.balanced_accuracy);
    out << ',' << row.delta_params << ',' << tri_name(row.contaminated) << '\n';
  }
  return out.str();
}

std::string render_report_markdown(const EvalReport& report) {
  std::ostringstream out;
  out << "| backbone | recipe | task | shots | split | bal. acc (%) | delta params | flag |\n";
  out << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& row : report.rows) {
    out << "| " << row.backbone << " | " << row.recipe << " | " << row.task << " | ";
    if (row.shots >= 0) out << row.shots;
    out << " | ";
    if (row.split >= 0) out << row.split;
    out << " | ";
    if (row.error.empty()) {
      out << percent_1dp(row.balanced_accuracy);
    } else {
      out << "error";
    }
    out << " | " << row.delta_params << " | "
        << (row.contaminated == Tri::yes ? "T" : row.contaminated == Tri::unknown ? "?" : "")
        << " |\n";
  }
  if (!report.aggregates.empty()) {
    out << "\n| backbone | recipe | AVG (%) | tasks |\n|---|---|---|---|\n";
    for (const auto& agg : report.aggregates) {
      out << "| " << agg.backbone << " | " << agg.recipe << " | " << percent_1dp(agg.avg) << " | "
          << agg.task_count << " |\n";
    }
  }
  if (!report.lowshot_means.empty()) {
    out << "\n| backbone | recipe | task | shots | mean bal. acc (%) |\n|---|---|---|---|---|\n";
    for (const auto& m : report.lowshot_means) {
      out << "| " << m.backbone << " | " << m.recipe << " | " << m.task << " | " << m.shots
          << " | " << percent_1dp(m.mean) << " |\n";
    }
  }
  return out.str();
}

std::string render_lowshot_means_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "backbone,recipe,task,shots,mean_balanced_accuracy\n";
  for (const auto& m : report.lowshot_means) {
    out << m.backbone << ',' << m.recipe << ',' << m.task << ',' << m.shots << ','
        << full_precision(m.mean) << '\n';
  }
  return out.str();
}

double knn_label_purity(const MatrixX<double>& points, const std::vector<int>& labels, int k) {
  const Index n = points.rows();
  if (static_cast<std::size_t>(n) != labels.size()) {
    throw Error::state("knn_label_purity: labels size mismatch");
  }
  if (k < 1 || k >= n) throw Error::config("knn_label_purity: bad k");
  double purity = 0.0;
  std::vector<Index> idx(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    std::iota(idx.begin(), idx.end(), Index(0));
    std::partial_sort(idx.begin(), idx.begin() + k + 1, idx.end(), [&](Index a, Index b) {
      const double da = (points.row(a) - points.row(i)).squaredNorm();
      const double db = (points.row(b) - points.row(i)).squaredNorm();
      if (da != db) return da < db;
      return a < b;
    });
    int same = 0, counted = 0;
    for (Index j = 0; j < n && counted < k; ++j) {
      const Index cand = idx[static_cast<std::size_t>(j)];
      if (cand == i) continue;
      ++counted;
      if (labels[static_cast<std::size_t>(cand)] == labels[static_cast<std::size_t>(i)]) ++same;
    }
    purity += static_cast<double>(same) / k;
  }
  return purity / static_cast<double>(n);
}

}  // namespace sarfm
