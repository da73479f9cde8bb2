// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "sarfm/augment.hpp"
#include "sarfm/image_io.hpp"
#include "sarfm/manifest.hpp"
#include "sarfm/synth.hpp"

using namespace sarfm;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("sarfm_data_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

SampleRecord make_record(const std::string& id, int label, const std::string& corpus,
                         const std::string& split = "train") {
  SampleRecord rec;
  rec.id = id;
  rec.image_ref = synth_ref(label, 1);
  rec.label = label;
  rec.split = split;
  rec.source_corpus = corpus;
  return rec;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

}  // namespace

TEST_CASE("load_manifest counts and validates") {
  const auto dir = temp_dir("load");
  {
    std::ofstream out(dir / "ok.manifest");
    out << "b\tsynth://0/1\t0\ttrain\tsrc\tsynthetic\n";
    out << "a\tsynth://0/2\tnull\ttrain\tsrc\t-\n";
    out << "c\tsynth://1/3\t1\ttest\tsrc\tx,y\n";
  }
  const DatasetManifest m = load_manifest(dir / "ok.manifest");
  CHECK(m.records.size() == 3);
  // sorted by id
  CHECK(m.records[0].id == "a");
  CHECK(!m.records[0].label.has_value());
  CHECK(m.records[1].label == 0);
  CHECK(m.records[2].domain_tags == std::set<std::string>{"x", "y"});

  {
    std::ofstream out(dir / "dup.manifest");
    out << "a01\tsynth://0/1\t0\ttrain\tsrc\t-\n";
    out << "a01\tsynth://0/2\t0\ttrain\tsrc\t-\n";
  }
  CHECK_THROWS_WITH_AS(load_manifest(dir / "dup.manifest"),
                       doctest::Contains("duplicate record id \"a01\""), Error);

  {
    std::ofstream out(dir / "bad.manifest");
    out << "a\tsynth://0/1\t0\ttrain\tsrc\t-\n";
    out << "b\tonly-two-fields\n";
  }
  CHECK_THROWS_WITH_AS(load_manifest(dir / "bad.manifest"), doctest::Contains("line 2"), Error);

  {
    std::ofstream out(dir / "empty.manifest");
  }
  CHECK(load_manifest(dir / "empty.manifest").records.empty());
}

TEST_CASE("manifest round-trip is canonical") {
  const auto dir = temp_dir("roundtrip");
  DatasetManifest m;
  m.name = "m";
  m.records = {make_record("z", 1, "s"), make_record("a", 0, "s"), make_record("k", 2, "s")};
  save_manifest(m, dir / "m.manifest");
  const DatasetManifest loaded = load_manifest(dir / "m.manifest");
  save_manifest(loaded, dir / "m2.manifest");
  CHECK(slurp(dir / "m.manifest") == slurp(dir / "m2.manifest"));
}

TEST_CASE("concat_corpora sizes, namespacing and source preservation") {
  auto mk = [](const std::string& name, int n, const std::string& corpus) {
    DatasetManifest m;
    m.name = name;
    for (int i = 0; i < n; ++i) m.records.push_back(make_record("r" + std::to_string(i), 0, corpus));
    return m;
  };
  const auto combined =
      concat_corpora({mk("a", 3, "ca"), mk("b", 4, "cb"), mk("c", 5, "cc")}, "all");
  CHECK(combined.records.size() == 12);
  CHECK(combined.source_corpora() == std::vector<std::string>{"ca", "cb", "cc"});
  for (const auto& rec : combined.records) CHECK(rec.id.find('/') != std::string::npos);

  // base of 9 named sources plus one extra
  std::vector<DatasetManifest> base;
  for (int s = 0; s < 9; ++s) base.push_back(mk("src" + std::to_string(s), 2, "corpus" + std::to_string(s)));
  auto base_corpus = concat_corpora(base, "base");
  const auto extended = concat_corpora({base_corpus, mk("extra", 2, "corpus-extra")}, "ext");
  CHECK(extended.source_corpora().size() == 10);
  CHECK(extended.records.size() == 20);

  const auto renamed = concat_corpora({mk("solo", 3, "cs")}, "renamed");
  CHECK(renamed.records.size() == 3);
  CHECK(renamed.records[0].id.rfind("solo/", 0) == 0);

  CHECK_THROWS_AS(concat_corpora({}, "none"), Error);
}

TEST_CASE("synthetic chips are deterministic and class-distinct") {
  SynthConfig cfg;
  Rng rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const int cls = rng.below(cfg.num_classes);
    const std::uint64_t seed = rng.next_u64();
    const Matrixf a = synth_sar_chip<float>(cls, seed, cfg);
    const Matrixf b = synth_sar_chip<float>(cls, seed, cfg);
    REQUIRE(a.rows() == cfg.chip_size);
    REQUIRE((a.array() >= 0.0f).all());
    REQUIRE((a.array() <= 1.0f).all());
    REQUIRE(a.allFinite());
    REQUIRE(std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0);
  }

  const Matrixf c0 = synth_sar_chip<float>(0, 7, cfg);
  const Matrixf c1 = synth_sar_chip<float>(1, 7, cfg);
  Index diff = 0;
  for (Index i = 0; i < c0.size(); ++i) {
    if (c0.data()[i] != c1.data()[i]) ++diff;
  }
  CHECK(diff >= c0.size() / 100);  // >= 1% of pixels

  CHECK_THROWS_AS(synth_sar_chip<float>(cfg.num_classes, 1, cfg), Error);
  CHECK_THROWS_AS(synth_sar_chip<float>(-1, 1, cfg), Error);
}

TEST_CASE("speckle preserves the template mean (Monte-Carlo oracle)") {
  SynthConfig cfg;
  const Matrixf tmpl = class_template<float>(3, cfg);
  // pick a template pixel with a solidly nonzero value
  Index pr = 0, pc = 0;
  tmpl.maxCoeff(&pr, &pc);
  const double value = tmpl(pr, pc);
  REQUIRE(value > 0.05);

  const int draws = 20000;
  double sum = 0.0;
  for (int i = 0; i < draws; ++i) {
    const Matrixf chip = synth_sar_chip<float>(3, 0x1000 + static_cast<std::uint64_t>(i), cfg);
    sum += chip(pr, pc);
  }
  const double mean = sum / draws;
  CHECK(std::abs(mean - value) / value < 0.03);
}

TEST_CASE("to_three_channel replicates exactly") {
  Matrixf chip = Matrixf::Constant(7, 5, 0.5f);
  auto img = to_three_channel(chip);
  CHECK(img[0].rows() == 7);
  CHECK(img[0].cols() == 5);
  CHECK(img[0] == img[1]);
  CHECK((img[0] - img[2]).cwiseAbs().maxCoeff() == 0.0f);

  Matrixf varied(2, 2);
  varied << 0.1f, 0.2f, 0.3f, 0.4f;
  auto img2 = to_three_channel(varied);
  CHECK(img2[1] == varied);
}

TEST_CASE("pgm round trip and synth refs") {
  const auto dir = temp_dir("pgm");
  Matrixf chip(3, 4);
  for (Index r = 0; r < 3; ++r)
    for (Index c = 0; c < 4; ++c) chip(r, c) = static_cast<float>(r * 4 + c) / 11.0f;
  save_pgm(chip, dir / "img.pgm");
  const Matrixf back = load_pgm(dir / "img.pgm");
  REQUIRE(back.rows() == 3);
  REQUIRE(back.cols() == 4);
  CHECK((back - chip).cwiseAbs().maxCoeff() < 1.0f / 255.0f + 1e-6f);

  SynthConfig synth;
  const Matrixf via_ref = load_chip(synth_ref(2, 99), synth);
  const Matrixf direct = synth_sar_chip<float>(2, 99, synth);
  CHECK(via_ref == direct);
  CHECK_THROWS_AS(load_chip("synth://banana", synth), Error);
  CHECK_THROWS_AS(load_chip((dir / "missing.pgm").string(), synth), Error);
}

TEST_CASE("lowshot splits: counts, persistence, determinism") {
  const auto dir = temp_dir("lowshot");
  TaskSpec task;
  task.name = "toy40";
  task.num_classes = 40;
  task.train.name = "train";
  task.test.name = "test";
  for (int c = 0; c < 40; ++c) {
    task.class_names.push_back("cl" + std::to_string(c));
    for (int i = 0; i < 12; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "tr-%02d-%03d", c, i);
      task.train.records.push_back(make_record(id, c, "src"));
    }
    task.test.records.push_back(make_record("te-" + std::to_string(c), c, "src", "test"));
  }

  LowshotConfig cfg;
  cfg.shots = 10;
  cfg.num_splits = 3;
  cfg.seed = 5;
  const auto splits = make_lowshot_splits(task, cfg, dir / "splits");
  REQUIRE(splits.size() == 3);
  std::set<std::string> train_ids;
  for (const auto& rec : task.train.records) train_ids.insert(rec.id);
  for (const auto& split : splits) {
    CHECK(split.records.size() == 400);  // N=10, C=40
    std::map<int, int> per_class;
    std::set<std::string> ids;
    for (const auto& rec : split.records) {
      per_class[*rec.label] += 1;
      CHECK(train_ids.count(rec.id) == 1);  // subset of task.train
      ids.insert(rec.id);
    }
    CHECK(ids.size() == split.records.size());  // no duplicates
    for (const auto& [cls, count] : per_class) CHECK(count == 10);
  }

  // same seed, fresh root: byte-identical files
  const auto splits2 = make_lowshot_splits(task, cfg, dir / "splits2");
  for (int k = 0; k < 3; ++k) {
    const auto rel = fs::path(task.name) / "10shot" / "seed5" / ("split" + std::to_string(k) +
                                                                 ".manifest");
    CHECK(slurp(dir / "splits" / rel) == slurp(dir / "splits2" / rel));
  }

  // reuse: files untouched on second call against the same root
  const auto before = slurp(dir / "splits" / task.name / "10shot" / "seed5" / "split0.manifest");
  make_lowshot_splits(task, cfg, dir / "splits");
  const auto after = slurp(dir / "splits" / task.name / "10shot" / "seed5" / "split0.manifest");
  CHECK(before == after);

  LowshotConfig too_many;
  too_many.shots = 13;  // only 12 per class
  too_many.num_splits = 1;
  CHECK_THROWS_WITH_AS(make_lowshot_splits(task, too_many, dir / "splits3"),
                       doctest::Contains("cl0"), Error);
}

TEST_CASE("task round trip and validation") {
  const auto dir = temp_dir("task");
  TaskSpec task;
  task.name = "t2";
  task.num_classes = 2;
  task.class_names = {"a", "b"};
  task.condition_kind = "SOC";
  task.train.records = {make_record("tr0", 0, "s"), make_record("tr1", 1, "s")};
  task.test.records = {make_record("te0", 0, "s", "test"), make_record("te1", 1, "s", "test")};
  save_task(task, dir / "task.meta");
  const TaskSpec loaded = load_task(dir / "task.meta");
  CHECK(loaded.name == "t2");
  CHECK(loaded.num_classes == 2);
  CHECK(loaded.train.records.size() == 2);
  CHECK(loaded.test.records.size() == 2);

  TaskSpec bad = task;
  bad.test.records.push_back(make_record("tr0", 0, "s", "test"));  // id collision with train
  CHECK_THROWS_AS(bad.validate(), Error);

  TaskSpec bad2 = task;
  bad2.train.records[0].label = 2;  // out of range
  CHECK_THROWS_AS(bad2.validate(), Error);
}
