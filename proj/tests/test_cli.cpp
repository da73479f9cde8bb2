// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "sarfm/backbone.hpp"
#include "sarfm/checkpoint.hpp"
#include "sarfm/cli.hpp"
#include "sarfm/manifest.hpp"

using namespace sarfm;
namespace fs = std::filesystem;

namespace {

int cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("sarfm");
  for (const auto& arg : args) argv.push_back(arg.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

fs::path temp_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("sarfm_cli_" + tag);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

int count_lines(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

// tiny geometry shared by the command tests
const std::vector<std::string> kTinyVit = {
    "--set", "vit.img_size=32",  "--set", "vit.patch_size=8", "--set", "vit.embed_dim=32",
    "--set", "vit.depth=2",      "--set", "vit.num_heads=2",  "--set", "head.hidden=32",
    "--set", "head.bottleneck=8", "--set", "head.prototypes=16"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  args.insert(args.end(), kTinyVit.begin(), kTinyVit.end());
  return args;
}

}  // namespace

TEST_CASE("synth-data: counts, determinism, disjoint ids, force") {
  const fs::path out = temp_dir("synth");
  CHECK(cli({"synth-data", "--out", out.string(), "--seed", "5"}) == 0);
  CHECK(fs::exists(out / "resolved_config.txt"));

  const DatasetManifest corpus = load_manifest(out / "corpus.manifest");
  CHECK(corpus.records.size() == 4000);  // 8 classes x 500
  const TaskSpec task = load_task(out / "task.meta");
  CHECK(task.train.records.size() == 4000);
  CHECK(task.test.records.size() == 800);  // 8 x 100
  CHECK(task.num_classes == 8);

  // train/test ids disjoint (validate() enforces it, but check directly)
  std::set<std::string> train_ids;
  for (const auto& rec : task.train.records) train_ids.insert(rec.id);
  for (const auto& rec : task.test.records) CHECK(train_ids.count(rec.id) == 0);

  // corpus records are unlabeled
  for (const auto& rec : corpus.records) CHECK(!rec.label.has_value());

  // rerun without --force refused with a config-error exit code
  CHECK(cli({"synth-data", "--out", out.string(), "--seed", "5"}) == 2);

  // same seed reproduces identical bytes
  const fs::path out2 = temp_dir("synth2");
  CHECK(cli({"synth-data", "--out", out2.string(), "--seed", "5"}) == 0);
  CHECK(slurp(out / "corpus.manifest") == slurp(out2 / "corpus.manifest"));
  CHECK(slurp(out / "task.meta") == slurp(out2 / "task.meta"));
  CHECK(slurp(out / "synth8-train.manifest") == slurp(out2 / "synth8-train.manifest"));

  // different seed differs
  const fs::path out3 = temp_dir("synth3");
  CHECK(cli({"synth-data", "--out", out3.string(), "--seed", "6"}) == 0);
  CHECK(slurp(out / "corpus.manifest") != slurp(out3 / "corpus.manifest"));
}

TEST_CASE("pretrain: epochs=0 equals init, provenance and log recorded") {
  const fs::path data = temp_dir("pt_data");
  REQUIRE(cli({"synth-data", "--out", data.string(), "--seed", "1", "--set", "train_per_class=8",
               "--set", "test_per_class=4", "--set", "synth.classes=2"}) == 0);

  const fs::path out = temp_dir("pt_out");
  REQUIRE(cli(with_tiny({"pretrain", "--out", out.string(), "--seed", "9", "--set",
                         "corpus=" + (data / "corpus.manifest").string(), "--set", "epochs=0"})) ==
          0);
  const Checkpoint ckpt = load_checkpoint(out / "backbone.ckpt");
  CHECK(checkpoint_provenance(ckpt) == std::vector<std::string>{"synth8-train"});
  const Vit<float> loaded = vit_from_checkpoint<float>(ckpt);
  const Vit<float> expect = init_vit<float>(loaded.cfg, 9);
  bool same = true;
  visit_params2(loaded, expect, [&](const std::string&, const MatrixX<float>& a,
                                    const MatrixX<float>& b) {
    if (a != b) same = false;
  });
  CHECK(same);
  CHECK(count_lines(out / "run.log") == 1);  // header only

  // a short real run: log lines = steps + header, deterministic checkpoint
  const fs::path out2 = temp_dir("pt_out2");
  const std::vector<std::string> run_args = with_tiny(
      {"pretrain", "--seed", "9", "--set", "corpus=" + (data / "corpus.manifest").string(),
       "--set", "epochs=2", "--set", "batch_size=8", "--set", "warmup_epochs=1", "--set",
       "aug.global_size=32", "--set", "aug.local_size=16", "--set", "aug.n_local=2", "--jobs",
       "2"});
  auto args2 = run_args;
  args2.insert(args2.begin() + 1, {"--out", out2.string()});
  REQUIRE(cli(args2) == 0);
  CHECK(count_lines(out2 / "run.log") == 1 + 2 * 2);  // 16 records / 8 per batch x 2 epochs

  const fs::path out3 = temp_dir("pt_out3");
  auto args3 = run_args;
  args3.insert(args3.begin() + 1, {"--out", out3.string()});
  args3.push_back("--deterministic");
  REQUIRE(cli(args3) == 0);
  CHECK(slurp(out2 / "backbone.ckpt") == slurp(out3 / "backbone.ckpt"));
}

TEST_CASE("eval: grid report, lowshot rows, rerun refusal, errors") {
  const fs::path data = temp_dir("ev_data");
  REQUIRE(cli({"synth-data", "--out", data.string(), "--seed", "2", "--set", "train_per_class=6",
               "--set", "test_per_class=4", "--set", "synth.classes=2", "--set",
               "task_name=minitask"}) == 0);
  const fs::path pt = temp_dir("ev_pt");
  REQUIRE(cli(with_tiny({"pretrain", "--out", pt.string(), "--seed", "3", "--set",
                         "corpus=" + (data / "corpus.manifest").string(), "--set",
                         "epochs=0"})) == 0);

  const fs::path out = temp_dir("ev_out");
  REQUIRE(cli({"eval", "--out", out.string(), "--set",
               "backbones=" + (pt / "backbone.ckpt").string(), "--set", "recipes=nearest_neighbor",
               "--set", "tasks=" + (data / "task.meta").string(), "--set",
               "overlap=" + (data / "overlap.tsv").string()}) == 0);
  CHECK(count_lines(out / "report.csv") == 2);  // header + 1 row
  const std::string csv = slurp(out / "report.csv");
  CHECK(csv.find("backbone,recipe,task,shots,split,balanced_accuracy,delta_params,contaminated") !=
        std::string::npos);
  CHECK(csv.find("minitask") != std::string::npos);
  // provenance synth8-train overlaps minitask? overlap.tsv maps synth8-train -> minitask
  CHECK(csv.find(",T\n") != std::string::npos);
  CHECK(fs::exists(out / "report.md"));

  // rerun over existing outputs without --force is refused
  CHECK(cli({"eval", "--out", out.string(), "--set",
             "backbones=" + (pt / "backbone.ckpt").string(), "--set", "recipes=nearest_neighbor",
             "--set", "tasks=" + (data / "task.meta").string()}) == 2);

  // lowshot sweep cardinality: 2 shot values x 2 splits
  const fs::path out2 = temp_dir("ev_out2");
  REQUIRE(cli({"lowshot", "--out", out2.string(), "--set",
               "backbones=" + (pt / "backbone.ckpt").string(), "--set",
               "recipes=nearest_neighbor", "--set", "tasks=" + (data / "task.meta").string(),
               "--set", "lowshot.shots=2,3", "--set", "lowshot.splits=2", "--set",
               "lowshot.seed=4"}) == 0);
  CHECK(count_lines(out2 / "report.csv") == 1 + 1 + 4);  // header + full row + 2x2 lowshot rows
  CHECK(fs::exists(out2 / "lowshot_means.csv"));
  CHECK(count_lines(out2 / "lowshot_means.csv") == 3);
  CHECK(fs::exists(out2 / "lowshot_curves.svg"));
  // split files persisted beside the task
  CHECK(fs::exists(data / "splits" / "minitask" / "2shot" / "seed4" / "split0.manifest"));

  // unknown config key rejected before any work
  const fs::path out4 = temp_dir("ev_out4");
  CHECK(cli({"eval", "--out", out4.string(), "--set", "bogus_key=1", "--set",
             "backbones=" + (pt / "backbone.ckpt").string(), "--set", "tasks=" +
             (data / "task.meta").string()}) == 2);

  // unreadable backbone: data error
  const fs::path out5 = temp_dir("ev_out5");
  CHECK(cli({"eval", "--out", out5.string(), "--set", "backbones=/nonexistent.ckpt", "--set",
             "tasks=" + (data / "task.meta").string()}) == 3);
}

TEST_CASE("adapt command writes adapted model, predictions and summary") {
  const fs::path data = temp_dir("ad_data");
  REQUIRE(cli({"synth-data", "--out", data.string(), "--seed", "7", "--set", "train_per_class=6",
               "--set", "test_per_class=3", "--set", "synth.classes=2"}) == 0);
  const fs::path pt = temp_dir("ad_pt");
  REQUIRE(cli(with_tiny({"pretrain", "--out", pt.string(), "--seed", "8", "--set",
                         "corpus=" + (data / "corpus.manifest").string(), "--set",
                         "epochs=0"})) == 0);
  const fs::path out = temp_dir("ad_out");
  REQUIRE(cli({"adapt", "--out", out.string(), "--seed", "1", "--set",
               "backbone=" + (pt / "backbone.ckpt").string(), "--set",
               "task=" + (data / "task.meta").string(), "--set", "recipe=linear_probe", "--set",
               "recipe.epochs=2", "--set", "recipe.batch_size=6"}) == 0);
  CHECK(fs::exists(out / "adapted.ckpt"));
  CHECK(count_lines(out / "predictions.tsv") == 6);  // 2 classes x 3 test records
  const std::string summary = slurp(out / "summary.txt");
  CHECK(summary.find("recipe linear_probe") != std::string::npos);
  CHECK(summary.find("delta_params 66") != std::string::npos);  // 32*2 + 2
}

TEST_CASE("tsne command: row preservation, legend tags, deterministic bytes") {
  const fs::path data = temp_dir("ts_data");
  REQUIRE(cli({"synth-data", "--out", data.string(), "--seed", "4", "--set",
               "train_per_class=50", "--set", "test_per_class=4", "--set",
               "synth.classes=4"}) == 0);
  const fs::path pt = temp_dir("ts_pt");
  REQUIRE(cli(with_tiny({"pretrain", "--out", pt.string(), "--seed", "5", "--set",
                         "corpus=" + (data / "corpus.manifest").string(), "--set",
                         "epochs=0"})) == 0);

  const fs::path out = temp_dir("ts_out");
  const std::vector<std::string> args = {
      "tsne", "--seed", "6",
      "--set", "backbone=" + (pt / "backbone.ckpt").string(),
      "--set", "manifest=" + (data / "synth8-train.manifest").string(),
      "--set", "perplexity=15", "--set", "iterations=120"};
  auto args1 = args;
  args1.insert(args1.begin() + 1, {"--out", out.string()});
  REQUIRE(cli(args1) == 0);
  CHECK(count_lines(out / "tsne.csv") == 201);  // header + 200 rows
  CHECK(slurp(out / "tsne.csv").rfind("id,x,y,label,domain_tag", 0) == 0);
  CHECK(slurp(out / "tsne.svg").find("synthetic") != std::string::npos);

  const fs::path out2 = temp_dir("ts_out2");
  auto args2 = args;
  args2.insert(args2.begin() + 1, {"--out", out2.string()});
  REQUIRE(cli(args2) == 0);
  CHECK(slurp(out / "tsne.csv") == slurp(out2 / "tsne.csv"));
  CHECK(slurp(out / "tsne.svg") == slurp(out2 / "tsne.svg"));
}

TEST_CASE("report command re-renders csv to markdown") {
  const fs::path out = temp_dir("rep_out");
  fs::create_directories(out);
  const fs::path csv = out / "in.csv";
  {
    std::ofstream f(csv);
    f << "backbone,recipe,task,shots,split,balanced_accuracy,delta_params,contaminated\n";
    f << "bb,nearest_neighbor,taskA,,,0.8125,0,T\n";
    f << "bb,nearest_neighbor,taskB,,,0.5,0,F\n";
  }
  const fs::path out2 = temp_dir("rep_out2");
  REQUIRE(cli({"report", "--out", out2.string(), "--set", "in=" + csv.string()}) == 0);
  const std::string md = slurp(out2 / "report.md");
  CHECK(md.find("81.2") != std::string::npos);
  CHECK(md.find("| T |") != std::string::npos);
  // AVG table present with the mean of the two tasks
  CHECK(md.find("65.6") != std::string::npos);
}

TEST_CASE("usage errors exit with the config code") {
  CHECK(cli({"no-such-command"}) == 2);
  CHECK(cli({}) == 2);
  const fs::path out = temp_dir("use_out");
  CHECK(cli({"pretrain", "--out", out.string()}) == 2);  // missing corpus key
}
