// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#include "sarfm/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "sarfm/error.hpp"
#include "sarfm/rng.hpp"

namespace sarfm {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out.push_back(sep);
    out += parts[i];
  }
  return out;
}

void sort_by_id(std::vector<SampleRecord>& records) {
  std::sort(records.begin(), records.end(),
            [](const SampleRecord& a, const SampleRecord& b) { return a.id < b.id; });
}

void check_unique_ids(const std::vector<SampleRecord>& sorted, const std::string& context) {
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i].id == sorted[i - 1].id) {
      throw Error::data("validation error: duplicate record id \"" + sorted[i].id + "\" in " +
                        context);
    }
  }
}

}  // namespace

std::vector<std::string> DatasetManifest::source_corpora() const {
  std::set<std::string> names;
  for (const auto& rec : records) names.insert(rec.source_corpus);
  return {names.begin(), names.end()};
}

std::string format_record(const SampleRecord& rec) {
  std::string tags = rec.domain_tags.empty()
                         ? "-"
                         : join({rec.domain_tags.begin(), rec.domain_tags.end()}, ',');
  std::string label = rec.label ? std::to_string(*rec.label) : "null";
  return rec.id + '\t' + rec.image_ref + '\t' + label + '\t' + rec.split + '\t' +
         rec.source_corpus + '\t' + tags;
}

SampleRecord parse_record(const std::string& line, int line_no) {
  const auto fields = split(line, '\t');
  if (fields.size() != 6) {
    throw Error::data("parse error: line " + std::to_string(line_no) + ": expected 6 fields, got " +
                      std::to_string(fields.size()));
  }
  SampleRecord rec;
  rec.id = fields[0];
  rec.image_ref = fields[1];
  if (rec.id.empty()) {
    throw Error::data("parse error: line " + std::to_string(line_no) + ": empty id");
  }
  if (fields[2] != "null") {
    try {
      std::size_t pos = 0;
      int value = std::stoi(fields[2], &pos);
      if (pos != fields[2].size() || value < 0) throw std::invalid_argument("label");
      rec.label = value;
    } catch (const std::exception&) {
      throw Error::data("parse error: line " + std::to_string(line_no) + ": bad label \"" +
                        fields[2] + "\"");
    }
  }
  rec.split = fields[3];
  if (rec.split != "train" && rec.split != "test") {
    throw Error::data("parse error: line " + std::to_string(line_no) + ": bad split \"" +
                      rec.split + "\"");
  }
  rec.source_corpus = fields[4];
  if (rec.source_corpus.empty()) {
    throw Error::data("parse error: line " + std::to_string(line_no) + ": empty source_corpus");
  }
  if (fields[5] != "-") {
    for (const auto& tag : split(fields[5], ',')) {
      if (!tag.empty()) rec.domain_tags.insert(tag);
    }
  }
  return rec;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error::data("cannot open manifest: " + path.string());
  DatasetManifest manifest;
  manifest.name = path.stem().string();
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    manifest.records.push_back(parse_record(line, line_no));
  }
  sort_by_id(manifest.records);
  check_unique_ids(manifest.records, path.string());
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  auto records = manifest.records;
  sort_by_id(records);
  check_unique_ids(records, manifest.name);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error::data("cannot write manifest: " + path.string());
  for (const auto& rec : records) out << format_record(rec) << '\n';
}

DatasetManifest concat_corpora(const std::vector<DatasetManifest>& manifests,
                               const std::string& name) {
  if (manifests.empty()) throw Error::config("concat_corpora: empty manifest list");
  DatasetManifest out;
  out.name = name;
  for (const auto& m : manifests) {
    for (auto rec : m.records) {
      rec.id = m.name + "/" + rec.id;
      out.records.push_back(std::move(rec));
    }
  }
  sort_by_id(out.records);
  check_unique_ids(out.records, name);
  return out;
}

void TaskSpec::validate() const {
  if (num_classes < 1) throw Error::data("task " + name + ": num_classes < 1");
  std::set<std::string> train_ids;
  for (const auto& rec : train.records) {
    if (rec.label && *rec.label >= num_classes) {
      throw Error::data("task " + name + ": train record " + rec.id + " label " +
                        std::to_string(*rec.label) + " >= C=" + std::to_string(num_classes));
    }
    train_ids.insert(rec.id);
  }
  for (const auto& rec : test.records) {
    if (rec.label && *rec.label >= num_classes) {
      throw Error::data("task " + name + ": test record " + rec.id + " label out of range");
    }
    if (train_ids.count(rec.id)) {
      throw Error::data("task " + name + ": record id \"" + rec.id +
                        "\" appears in both train and test");
    }
  }
}

TaskSpec load_task(const std::filesystem::path& meta_path) {
  std::ifstream in(meta_path);
  if (!in) throw Error::data("cannot open task meta: " + meta_path.string());
  TaskSpec task;
  std::string train_file, test_file, line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto pos = line.find(' ');
    const std::string key = line.substr(0, pos);
    const std::string value = pos == std::string::npos ? "" : line.substr(pos + 1);
    if (key == "name") {
      task.name = value;
    } else if (key == "num_classes") {
      task.num_classes = std::stoi(value);
    } else if (key == "class_names") {
      for (const auto& part : split(value, ',')) {
        if (!part.empty()) task.class_names.push_back(part);
      }
    } else if (key == "condition_kind") {
      task.condition_kind = value;
    } else if (key == "notes") {
      task.notes = value;
    } else if (key == "train") {
      train_file = value;
    } else if (key == "test") {
      test_file = value;
    } else {
      throw Error::data("parse error: line " + std::to_string(line_no) + ": unknown task key \"" +
                        key + "\" in " + meta_path.string());
    }
  }
  if (train_file.empty() || test_file.empty()) {
    throw Error::data("task meta " + meta_path.string() + ": missing train/test manifest paths");
  }
  const auto dir = meta_path.parent_path();
  task.train = load_manifest(dir / train_file);
  task.test = load_manifest(dir / test_file);
  task.validate();
  return task;
}

void save_task(const TaskSpec& task, const std::filesystem::path& meta_path) {
  task.validate();
  const auto dir = meta_path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  const std::string train_file = task.name + "-train.manifest";
  const std::string test_file = task.name + "-test.manifest";
  save_manifest(task.train, dir / train_file);
  save_manifest(task.test, dir / test_file);
  std::ofstream out(meta_path, std::ios::binary);
  if (!out) throw Error::data("cannot write task meta: " + meta_path.string());
  out << "name " << task.name << '\n';
  out << "num_classes " << task.num_classes << '\n';
  out << "class_names " << join(task.class_names, ',') << '\n';
  out << "condition_kind " << task.condition_kind << '\n';
  if (!task.notes.empty()) out << "notes " << task.notes << '\n';
  out << "train " << train_file << '\n';
  out << "test " << test_file << '\n';
}

std::filesystem::path lowshot_dir(const std::filesystem::path& root, const std::string& task_name,
                                  const LowshotConfig& cfg) {
  return root / task_name / (std::to_string(cfg.shots) + "shot") /
         ("seed" + std::to_string(cfg.seed));
}

std::vector<DatasetManifest> make_lowshot_splits(const TaskSpec& task, const LowshotConfig& cfg,
                                                 const std::filesystem::path& root) {
  if (cfg.shots < 1) throw Error::config("lowshot: shots must be >= 1");
  if (cfg.num_splits < 1) throw Error::config("lowshot: num_splits must be >= 1");

  // Bucket train records by label, in manifest (id-sorted) order.
  std::map<int, std::vector<const SampleRecord*>> by_class;
  for (const auto& rec : task.train.records) {
    if (!rec.label) throw Error::data("lowshot: unlabeled train record " + rec.id);
    by_class[*rec.label].push_back(&rec);
  }
  for (int c = 0; c < task.num_classes; ++c) {
    const auto it = by_class.find(c);
    const std::size_t have = it == by_class.end() ? 0 : it->second.size();
    if (have < static_cast<std::size_t>(cfg.shots)) {
      const std::string cname = c < static_cast<int>(task.class_names.size())
                                    ? task.class_names[c]
                                    : std::to_string(c);
      throw Error::data("lowshot: class \"" + cname + "\" has " + std::to_string(have) +
                        " train records, need " + std::to_string(cfg.shots));
    }
  }

  const auto dir = lowshot_dir(root, task.name, cfg);
  std::filesystem::create_directories(dir);

  std::vector<DatasetManifest> splits;
  splits.reserve(static_cast<std::size_t>(cfg.num_splits));
  for (int k = 0; k < cfg.num_splits; ++k) {
    const auto path = dir / ("split" + std::to_string(k) + ".manifest");
    if (std::filesystem::exists(path)) {
      splits.push_back(load_manifest(path));
      continue;
    }
    DatasetManifest split;
    split.name = path.stem().string();
    for (const auto& [label, records] : by_class) {
      // Per-(class, split) stream: stable under class set or split count edits.
      Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(k),
                       static_cast<std::uint64_t>(label) + 0x10000));
      std::vector<std::size_t> order(records.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      rng.shuffle(order);
      for (int n = 0; n < cfg.shots; ++n) split.records.push_back(*records[order[n]]);
    }
    save_manifest(split, path);
    splits.push_back(load_manifest(path));
  }
  return splits;
}

}  // namespace sarfm
