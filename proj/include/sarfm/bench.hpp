// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "sarfm/adapt.hpp"
#include "sarfm/manifest.hpp"

namespace sarfm {

/// Mean of per-class recalls. Every class in [0, C) must occur in `labels`.
double balanced_accuracy(const std::vector<int>& preds, const std::vector<int>& labels,
                         int num_classes);

// ---------------------------------------------------------------------------
// contamination flags
// ---------------------------------------------------------------------------

/// Tri-state contamination verdict, never silently defaulted.
enum class Tri { no, yes, unknown };

std::string tri_name(Tri t);

/// Explicit, versioned corpus-to-task overlap declarations. A corpus listed
/// with an empty task set is known clean; a corpus absent from the table is
/// unknown.
struct OverlapTable {
  std::map<std::string, std::set<std::string>> corpus_tasks;

  bool knows(const std::string& corpus) const { return corpus_tasks.count(corpus) != 0; }
};

/// File format: one corpus per line, `corpus<TAB>task1,task2` ("-" for an
/// empty task list); '#' starts a comment. Later files may extend earlier
/// ones.
OverlapTable load_overlap_table(const std::filesystem::path& path);
void merge_overlap_table(OverlapTable& table, const std::filesystem::path& path);

/// True iff any pretraining corpus is declared to intersect the task's train
/// or test distribution; unknown corpora make the verdict "unknown" unless an
/// overlap is already established.
Tri contamination_flag(const std::vector<std::string>& provenance, const std::string& task_name,
                       const OverlapTable& table);

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

struct EvalRow {
  std::string backbone;
  std::string recipe;
  std::string task;
  int shots = -1;  // -1 = full train set
  int split = -1;
  double balanced_accuracy = 0.0;
  long long delta_params = 0;
  Tri contaminated = Tri::unknown;
  std::string error;  // non-empty marks a failed cell
};

struct Aggregate {
  std::string backbone;
  std::string recipe;
  double avg = 0.0;  // unweighted mean over full-task rows
  int task_count = 0;
};

struct LowshotMean {
  std::string backbone;
  std::string recipe;
  std::string task;
  int shots = 0;
  double mean = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<Aggregate> aggregates;
  std::vector<LowshotMean> lowshot_means;

  /// Canonical row order plus recomputed aggregates (AVG over full rows).
  void finalize();
  bool has_errors() const;
  void append(const EvalReport& other);
};

/// csv columns: backbone,recipe,task,shots,split,balanced_accuracy,
/// delta_params,contaminated. Accuracy as a full-precision fraction.
std::string render_report_csv(const EvalReport& report);

/// Markdown tables with accuracies as percent to 1 decimal (same source
/// values as the csv) and a T/""/? contamination flag column.
std::string render_report_markdown(const EvalReport& report);

std::string render_lowshot_means_csv(const EvalReport& report);

// ---------------------------------------------------------------------------
// grid execution
// ---------------------------------------------------------------------------

template <typename Scalar>
struct GridBackbone {
  std::string name;
  Vit<Scalar> vit;
  std::vector<std::string> provenance;
};

/// One EvalRow per (backbone, recipe, task). Cell failures become error rows;
/// the grid keeps going. Output is order-independent (canonically sorted).
template <typename Scalar>
EvalReport run_grid(const std::vector<GridBackbone<Scalar>>& backbones,
                    const std::vector<RecipeConfig>& recipes, const std::vector<TaskSpec>& tasks,
                    const OverlapTable& table, const AugConfig& aug, const SynthConfig& synth,
                    const std::filesystem::path& base_dir = {}) {
  EvalReport report;
  for (const auto& backbone : backbones) {
    for (const auto& recipe : recipes) {
      for (const auto& task : tasks) {
        EvalRow row;
        row.backbone = backbone.name;
        row.recipe = recipe_kind_name(recipe.kind);
        row.task = task.name;
        row.contaminated = contamination_flag(backbone.provenance, task.name, table);
        try {
          AdaptedModel<Scalar> model =
              adapt(backbone.vit, task, recipe, task.train, aug, synth, base_dir);
          const std::vector<int> preds =
              predict(model, task.test, aug, synth, base_dir, recipe.jobs);
          std::vector<int> labels;
          labels.reserve(task.test.records.size());
          for (const auto& rec : task.test.records) labels.push_back(rec.label.value_or(-1));
          row.balanced_accuracy = balanced_accuracy(preds, labels, task.num_classes);
          row.delta_params = model.delta_params;
        } catch (const std::exception& ex) {
          row.error = ex.what();
        }
        report.rows.push_back(std::move(row));
      }
    }
  }
  report.finalize();
  return report;
}

/// Low-shot sweep for one (backbone, recipe, task) cell: for every shot value
/// and every persisted split, adapt on the split and evaluate on the full
/// test set. Split files are created on first use and then reused verbatim,
/// so every backbone/recipe consumes byte-identical splits.
template <typename Scalar>
EvalReport lowshot_curve(const GridBackbone<Scalar>& backbone, const RecipeConfig& recipe,
                         const TaskSpec& task, const std::vector<int>& shot_list, int num_splits,
                         std::uint64_t split_seed, const std::filesystem::path& splits_root,
                         const OverlapTable& table, const AugConfig& aug, const SynthConfig& synth,
                         const std::filesystem::path& base_dir = {}) {
  EvalReport report;
  std::vector<int> test_labels;
  test_labels.reserve(task.test.records.size());
  for (const auto& rec : task.test.records) test_labels.push_back(rec.label.value_or(-1));
  const Tri flag = contamination_flag(backbone.provenance, task.name, table);

  for (int shots : shot_list) {
    LowshotConfig cfg;
    cfg.shots = shots;
    cfg.num_splits = num_splits;
    cfg.seed = split_seed;
    const auto splits = make_lowshot_splits(task, cfg, splits_root);
    double sum = 0.0;
    int ok = 0;
    for (int k = 0; k < num_splits; ++k) {
      EvalRow row;
      row.backbone = backbone.name;
      row.recipe = recipe_kind_name(recipe.kind);
      row.task = task.name;
      row.shots = shots;
      row.split = k;
      row.contaminated = flag;
      try {
        AdaptedModel<Scalar> model = adapt(backbone.vit, task, recipe,
                                           splits[static_cast<std::size_t>(k)], aug, synth,
                                           base_dir);
        const std::vector<int> preds =
            predict(model, task.test, aug, synth, base_dir, recipe.jobs);
        row.balanced_accuracy = balanced_accuracy(preds, test_labels, task.num_classes);
        row.delta_params = model.delta_params;
        sum += row.balanced_accuracy;
        ++ok;
      } catch (const std::exception& ex) {
        row.error = ex.what();
      }
      report.rows.push_back(std::move(row));
    }
    if (ok > 0) {
      report.lowshot_means.push_back({backbone.name, recipe_kind_name(recipe.kind), task.name,
                                      shots, sum / ok});
    }
  }
  report.finalize();
  return report;
}

}  // namespace sarfm
