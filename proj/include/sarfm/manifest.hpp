// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace sarfm {

/// One SAR chip's identity. `image_ref` is either a raster file path or a
/// `synth://<class>/<seed>` generator reference.
struct SampleRecord {
  std::string id;
  std::string image_ref;
  std::optional<int> label;  // class index in [0, C) when present
  std::string split;         // "train" or "test"
  std::string source_corpus;
  std::set<std::string> domain_tags;  // e.g. "synthetic", "measured", "X-band"
};

/// Ordered collection of records; records are kept sorted by id so that a
/// manifest has exactly one canonical serialization.
struct DatasetManifest {
  std::string name;
  std::vector<SampleRecord> records;

  /// Distinct source_corpus names, sorted.
  std::vector<std::string> source_corpora() const;
};

/// Serialization: one record per line, tab-separated fields
/// id, image_ref, label (integer or "null"), split, source_corpus,
/// domain_tags (comma-joined, "-" when empty). UTF-8, no header.
std::string format_record(const SampleRecord& rec);
SampleRecord parse_record(const std::string& line, int line_no);

/// Loads and validates a manifest. Records come back sorted by id.
/// Throws a data error for malformed lines (naming the line number) and for
/// duplicate ids.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Canonical serialization: records sorted by id, one per line.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Concatenates corpora into one manifest. Record ids are namespaced as
/// "<source manifest name>/<id>" so the result stays duplicate-free even when
/// inputs share ids; source_corpus fields are preserved untouched.
DatasetManifest concat_corpora(const std::vector<DatasetManifest>& manifests,
                               const std::string& name);

/// A downstream classification task.
struct TaskSpec {
  std::string name;
  int num_classes = 0;
  std::vector<std::string> class_names;
  DatasetManifest train;
  DatasetManifest test;
  std::string condition_kind;  // SOC, EOC-azimuth, EOC-scene, EOC-polarization,
                               // EOC-depression, EOC-band, synthetic-to-measured
  std::string notes;

  void validate() const;  // labels < C, train/test id sets disjoint
};

/// Task container on disk: a key-value meta file next to its two manifests.
TaskSpec load_task(const std::filesystem::path& meta_path);
void save_task(const TaskSpec& task, const std::filesystem::path& meta_path);

struct LowshotConfig {
  int shots = 10;       // N labeled samples per class
  int num_splits = 10;
  std::uint64_t seed = 0;
};

/// Directory holding the persisted splits for (task, N, seed):
///   <root>/<task>/<N>shot/seed<seed>
std::filesystem::path lowshot_dir(const std::filesystem::path& root, const std::string& task_name,
                                  const LowshotConfig& cfg);

/// Samples `num_splits` manifests of exactly N records per class, without
/// replacement, from task.train. Splits are persisted under `root` (see
/// lowshot_dir) and regenerating with the same (task, cfg) yields
/// byte-identical files. Existing split files are reused verbatim.
std::vector<DatasetManifest> make_lowshot_splits(const TaskSpec& task, const LowshotConfig& cfg,
                                                 const std::filesystem::path& root);

}  // namespace sarfm
