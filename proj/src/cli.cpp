// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#include "sarfm/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "sarfm/adapt_io.hpp"
#include "sarfm/bench.hpp"
#include "sarfm/checkpoint.hpp"
#include "sarfm/cli.hpp"
#include "sarfm/ssl.hpp"
#include "sarfm/svg.hpp"
#include "sarfm/tsne.hpp"

namespace fs = std::filesystem;

namespace sarfm {
namespace {

/// Flat key-value run configuration: files, --set overrides, then flag
/// overrides. Every key a command consumes is validated up front and echoed
/// (defaults included) into the output directory before any work starts;
/// unconsumed keys are rejected.
class RunConfig {
 public:
  void load_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error::config("cannot open config file: " + path.string());
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty() || line[0] == '#') continue;
      const auto pos = line.find(' ');
      if (pos == std::string::npos || pos == 0) {
        throw Error::config("config parse error: " + path.string() + ":" +
                            std::to_string(line_no));
      }
      values_[line.substr(0, pos)] = line.substr(pos + 1);
    }
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string str(const std::string& key, const std::string& def) const {
    consumed_.insert(key);
    const auto it = values_.find(key);
    const std::string v = it == values_.end() ? def : it->second;
    resolved_[key] = v;
    return v;
  }

  std::string require(const std::string& key) const {
    consumed_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) throw Error::config("missing required config key: " + key);
    resolved_[key] = it->second;
    return it->second;
  }

  long long integer(const std::string& key, long long def) const {
    const std::string v = str(key, std::to_string(def));
    try {
      return std::stoll(v);
    } catch (const std::exception&) {
      throw Error::config("config key " + key + ": not an integer: " + v);
    }
  }

  std::uint64_t u64(const std::string& key, std::uint64_t def) const {
    const std::string v = str(key, std::to_string(def));
    try {
      return std::stoull(v);
    } catch (const std::exception&) {
      throw Error::config("config key " + key + ": not an unsigned integer: " + v);
    }
  }

  double real(const std::string& key, double def) const {
    std::ostringstream os;
    os << def;
    const std::string v = str(key, os.str());
    try {
      return std::stod(v);
    } catch (const std::exception&) {
      throw Error::config("config key " + key + ": not a number: " + v);
    }
  }

  bool boolean(const std::string& key, bool def) const {
    const std::string v = str(key, def ? "true" : "false");
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    throw Error::config("config key " + key + ": not a boolean: " + v);
  }

  std::vector<std::string> list(const std::string& key, const std::string& def) const {
    const std::string v = str(key, def);
    std::vector<std::string> out;
    std::string cur;
    for (char ch : v + ",") {
      if (ch == ',') {
        if (!cur.empty()) out.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(ch);
      }
    }
    return out;
  }

  /// Rejects unknown keys and writes the fully resolved configuration.
  void finish(const fs::path& out_dir) const {
    for (const auto& [key, value] : values_) {
      if (!consumed_.count(key)) throw Error::config("unknown config key: " + key);
    }
    std::ofstream out(out_dir / "resolved_config.txt");
    if (!out) throw Error::data("cannot write resolved config in " + out_dir.string());
    for (const auto& [key, value] : resolved_) out << key << ' ' << value << '\n';
  }

 private:
  std::map<std::string, std::string> values_;
  mutable std::map<std::string, std::string> resolved_;
  mutable std::set<std::string> consumed_;
};

fs::path prepare_out_dir(const std::string& out, bool force) {
  if (out.empty()) throw Error::config("missing --out / `out` setting");
  fs::path dir(out);
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw Error::config("output path is not a directory: " + out);
    if (!fs::is_empty(dir) && !force) {
      throw Error::config("output directory not empty (use --force): " + out);
    }
  }
  fs::create_directories(dir);
  return dir;
}

SynthConfig synth_from_config(const RunConfig& cfg) {
  SynthConfig synth;
  synth.chip_size = static_cast<int>(cfg.integer("synth.chip_size", synth.chip_size));
  synth.num_classes = static_cast<int>(cfg.integer("synth.classes", synth.num_classes));
  synth.scatterers = static_cast<int>(cfg.integer("synth.scatterers", synth.scatterers));
  synth.blur_sigma = cfg.real("synth.blur_sigma", synth.blur_sigma);
  synth.peak = cfg.real("synth.peak", synth.peak);
  synth.template_seed = cfg.u64("synth.template_seed", synth.template_seed);
  return synth;
}

AugConfig aug_from_config(const RunConfig& cfg, int default_global, int default_local) {
  AugConfig aug = AugConfig::desk();
  aug.global_size = static_cast<int>(cfg.integer("aug.global_size", default_global));
  aug.local_size = static_cast<int>(cfg.integer("aug.local_size", default_local));
  aug.n_local = static_cast<int>(cfg.integer("aug.n_local", aug.n_local));
  aug.global_scale_lo = cfg.real("aug.global_scale_lo", aug.global_scale_lo);
  aug.global_scale_hi = cfg.real("aug.global_scale_hi", aug.global_scale_hi);
  aug.local_scale_lo = cfg.real("aug.local_scale_lo", aug.local_scale_lo);
  aug.local_scale_hi = cfg.real("aug.local_scale_hi", aug.local_scale_hi);
  aug.clip_lo_pct = cfg.real("aug.clip_lo_pct", aug.clip_lo_pct);
  aug.clip_hi_pct = cfg.real("aug.clip_hi_pct", aug.clip_hi_pct);
  aug.pow_lo = cfg.real("aug.pow_lo", aug.pow_lo);
  aug.pow_hi = cfg.real("aug.pow_hi", aug.pow_hi);
  aug.noise_prob = cfg.real("aug.noise_prob", aug.noise_prob);
  aug.noise_sigma = cfg.real("aug.noise_sigma", aug.noise_sigma);
  aug.blur_prob = cfg.real("aug.blur_prob", aug.blur_prob);
  aug.blur_sigma_lo = cfg.real("aug.blur_sigma_lo", aug.blur_sigma_lo);
  aug.blur_sigma_hi = cfg.real("aug.blur_sigma_hi", aug.blur_sigma_hi);
  return aug;
}

RecipeConfig recipe_from_config(const RunConfig& cfg, RecipeKind kind, int jobs) {
  RecipeConfig recipe;
  recipe.kind = kind;
  recipe.k = static_cast<int>(cfg.integer("recipe.k", recipe.k));
  recipe.rank = static_cast<int>(cfg.integer("recipe.rank", recipe.rank));
  recipe.hidden_mult = cfg.real("recipe.hidden_mult", recipe.hidden_mult);
  recipe.epochs = static_cast<int>(cfg.integer("recipe.epochs", recipe.epochs));
  recipe.lr = cfg.real("recipe.lr", recipe.lr);
  recipe.label_smoothing = cfg.real("recipe.label_smoothing", recipe.label_smoothing);
  recipe.batch_size = static_cast<int>(cfg.integer("recipe.batch_size", recipe.batch_size));
  recipe.seed = cfg.u64("seed", 0);
  recipe.jobs = jobs;
  recipe.validate();
  return recipe;
}

OverlapTable overlap_from_config(const RunConfig& cfg) {
  OverlapTable table;
  for (const auto& path : cfg.list("overlap", "")) merge_overlap_table(table, path);
  return table;
}

struct LoadedBackbone {
  GridBackbone<float> grid;
  Checkpoint ckpt;
};

LoadedBackbone load_backbone(const std::string& path) {
  LoadedBackbone out;
  out.ckpt = load_checkpoint(path);
  out.grid.name = fs::path(path).stem().string();
  out.grid.vit = vit_from_checkpoint<float>(out.ckpt);
  out.grid.provenance = checkpoint_provenance(out.ckpt);
  return out;
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error::data("cannot write " + path.string());
  out << content;
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_synth_data(RunConfig& cfg, bool force) {
  const fs::path out = prepare_out_dir(cfg.require("out"), force);
  const std::uint64_t seed = cfg.u64("seed", 0);
  const SynthConfig synth = synth_from_config(cfg);
  const int train_per_class = static_cast<int>(cfg.integer("train_per_class", 500));
  const int test_per_class = static_cast<int>(cfg.integer("test_per_class", 100));
  const std::string task_name = cfg.str("task_name", "synth8");
  const std::string corpus_name = cfg.str("corpus_name", task_name + "-train");
  const std::string condition_kind = cfg.str("condition_kind", "SOC");
  cfg.finish(out);

  char idbuf[64];
  TaskSpec task;
  task.name = task_name;
  task.num_classes = synth.num_classes;
  task.condition_kind = condition_kind;
  task.notes = "synthetic scatterer-template corpus";
  task.train.name = task_name + "-train";
  task.test.name = task_name + "-test";
  for (int c = 0; c < synth.num_classes; ++c) {
    task.class_names.push_back("class" + std::to_string(c));
    for (int i = 0; i < train_per_class; ++i) {
      SampleRecord rec;
      std::snprintf(idbuf, sizeof idbuf, "tr-c%02d-%05d", c, i);
      rec.id = idbuf;
      rec.image_ref = synth_ref(c, mix_seed(seed, 0x7e57a11ULL, (c << 20) | i));
      rec.label = c;
      rec.split = "train";
      rec.source_corpus = corpus_name;
      rec.domain_tags = {"synthetic"};
      task.train.records.push_back(std::move(rec));
    }
    for (int i = 0; i < test_per_class; ++i) {
      SampleRecord rec;
      std::snprintf(idbuf, sizeof idbuf, "te-c%02d-%05d", c, i);
      rec.id = idbuf;
      rec.image_ref = synth_ref(c, mix_seed(seed, 0x7e57b22ULL, (c << 20) | i));
      rec.label = c;
      rec.split = "test";
      rec.source_corpus = task_name + "-test";
      rec.domain_tags = {"synthetic"};
      task.test.records.push_back(std::move(rec));
    }
  }
  save_task(task, out / "task.meta");

  DatasetManifest corpus;
  corpus.name = corpus_name;
  for (auto rec : task.train.records) {
    rec.label.reset();
    corpus.records.push_back(std::move(rec));
  }
  save_manifest(corpus, out / "corpus.manifest");

  // overlap declarations for this generated family
  std::ostringstream overlap;
  overlap << corpus_name << '\t' << task_name << '\n';
  overlap << task_name << "-test\t" << task_name << '\n';
  write_text(out / "overlap.tsv", overlap.str());

  std::cout << "wrote " << task.train.records.size() << " train / " << task.test.records.size()
            << " test records under " << out.string() << "\n";
  return 0;
}

int cmd_pretrain(RunConfig& cfg, bool force, int jobs) {
  const fs::path out = prepare_out_dir(cfg.require("out"), force);
  const fs::path corpus_path = cfg.require("corpus");
  const std::uint64_t seed = cfg.u64("seed", 0);

  BackboneConfig vit_cfg = desk_config();
  vit_cfg.img_size = static_cast<int>(cfg.integer("vit.img_size", vit_cfg.img_size));
  vit_cfg.patch_size = static_cast<int>(cfg.integer("vit.patch_size", vit_cfg.patch_size));
  vit_cfg.embed_dim = static_cast<int>(cfg.integer("vit.embed_dim", vit_cfg.embed_dim));
  vit_cfg.depth = static_cast<int>(cfg.integer("vit.depth", vit_cfg.depth));
  vit_cfg.num_heads = static_cast<int>(cfg.integer("vit.num_heads", vit_cfg.num_heads));
  vit_cfg.n_registers = static_cast<int>(cfg.integer("vit.n_registers", vit_cfg.n_registers));
  vit_cfg.mlp_ratio = cfg.real("vit.mlp_ratio", vit_cfg.mlp_ratio);
  vit_cfg.validate();

  SslConfig ssl = SslConfig::desk();
  ssl.epochs = static_cast<int>(cfg.integer("epochs", ssl.epochs));
  ssl.batch_size = static_cast<int>(cfg.integer("batch_size", ssl.batch_size));
  ssl.base_lr = cfg.real("base_lr", ssl.base_lr);
  ssl.warmup_epochs = static_cast<int>(cfg.integer("warmup_epochs", ssl.warmup_epochs));
  ssl.weight_decay = cfg.real("weight_decay", ssl.weight_decay);
  ssl.tau_s = cfg.real("tau_s", ssl.tau_s);
  ssl.tau_t = cfg.real("tau_t", ssl.tau_t);
  ssl.tau_t_start = cfg.real("tau_t_start", ssl.tau_t_start);
  ssl.tau_t_warmup_frac = cfg.real("tau_t_warmup_frac", ssl.tau_t_warmup_frac);
  ssl.momentum_start = cfg.real("momentum_start", ssl.momentum_start);
  ssl.center_momentum = cfg.real("center_momentum", ssl.center_momentum);
  ssl.checkpoint_every = static_cast<int>(cfg.integer("checkpoint_every", 0));
  ssl.head.hidden = static_cast<int>(cfg.integer("head.hidden", ssl.head.hidden));
  ssl.head.bottleneck = static_cast<int>(cfg.integer("head.bottleneck", ssl.head.bottleneck));
  ssl.head.num_prototypes =
      static_cast<int>(cfg.integer("head.prototypes", ssl.head.num_prototypes));
  ssl.seed = seed;
  ssl.jobs = jobs;
  ssl.validate();

  const SynthConfig synth = synth_from_config(cfg);
  const AugConfig aug = aug_from_config(cfg, vit_cfg.img_size, 32);
  cfg.finish(out);

  const DatasetManifest corpus = load_manifest(corpus_path);
  SslModel<float> model;
  model.vit = init_vit<float>(vit_cfg, seed);
  model.head = init_dino_head<float>(vit_cfg.embed_dim, ssl.head, seed);

  const auto stats = pretrain(corpus, model, ssl, aug, synth, out / "backbone.ckpt",
                              out / "run.log", corpus_path.parent_path());
  std::cout << "pretrained " << stats.steps << " steps; checkpoint at "
            << (out / "backbone.ckpt").string() << "\n";
  return 0;
}

int cmd_adapt(RunConfig& cfg, bool force, int jobs) {
  const fs::path out = prepare_out_dir(cfg.require("out"), force);
  auto backbone = load_backbone(cfg.require("backbone"));
  const fs::path task_path = cfg.require("task");
  const RecipeKind kind = parse_recipe_kind(cfg.require("recipe"));
  const RecipeConfig recipe = recipe_from_config(cfg, kind, jobs);
  const SynthConfig synth = synth_from_config(cfg);
  const AugConfig aug = aug_from_config(cfg, backbone.grid.vit.cfg.img_size, 32);
  cfg.finish(out);

  const TaskSpec task = load_task(task_path);
  AdaptedModel<float> model = adapt(backbone.grid.vit, task, recipe, task.train, aug, synth,
                                    task_path.parent_path());
  const std::vector<int> preds = predict(model, task.test, aug, synth, task_path.parent_path(),
                                         jobs);
  std::vector<int> labels;
  for (const auto& rec : task.test.records) labels.push_back(rec.label.value_or(-1));
  const double acc = balanced_accuracy(preds, labels, task.num_classes);

  Checkpoint ckpt = adapted_to_checkpoint(model);
  ckpt.meta["task"] = task.name;
  set_checkpoint_provenance(ckpt, backbone.grid.provenance);
  save_checkpoint(ckpt, out / "adapted.ckpt");

  std::ostringstream dump;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& rec = task.test.records[i];
    dump << rec.id << '\t' << (rec.label ? std::to_string(*rec.label) : "null") << '\t'
         << preds[i] << '\n';
  }
  write_text(out / "predictions.tsv", dump.str());

  std::ostringstream summary;
  summary << "backbone " << backbone.grid.name << "\nrecipe " << recipe_kind_name(kind)
          << "\ntask " << task.name << "\nbalanced_accuracy " << acc << "\ndelta_params "
          << model.delta_params << "\n";
  write_text(out / "summary.txt", summary.str());
  std::cout << summary.str();
  return 0;
}

int cmd_eval(RunConfig& cfg, bool force, int jobs) {
  const fs::path out = prepare_out_dir(cfg.require("out"), force);
  const auto backbone_paths = cfg.list("backbones", "");
  const auto recipe_names = cfg.list("recipes", "nearest_neighbor");
  const auto task_paths = cfg.list("tasks", "");
  if (backbone_paths.empty() || task_paths.empty()) {
    throw Error::config("eval: `backbones` and `tasks` must be non-empty");
  }
  const OverlapTable table = overlap_from_config(cfg);
  const bool lowshot = cfg.boolean("lowshot", false);
  const auto shot_strings = cfg.list("lowshot.shots", "10,25,50,100,250,500");
  const int lowshot_splits = static_cast<int>(cfg.integer("lowshot.splits", 10));
  const std::uint64_t lowshot_seed = cfg.u64("lowshot.seed", 7);
  const std::string splits_root_cfg = cfg.str("splits_root", "");
  const SynthConfig synth = synth_from_config(cfg);

  std::vector<LoadedBackbone> backbones;
  for (const auto& path : backbone_paths) backbones.push_back(load_backbone(path));
  const AugConfig aug = aug_from_config(cfg, backbones.front().grid.vit.cfg.img_size, 32);

  std::vector<RecipeConfig> recipes;
  for (const auto& name : recipe_names) {
    recipes.push_back(recipe_from_config(cfg, parse_recipe_kind(name), jobs));
  }
  cfg.finish(out);

  std::vector<TaskSpec> tasks;
  std::vector<fs::path> task_dirs;
  for (const auto& path : task_paths) {
    tasks.push_back(load_task(path));
    task_dirs.push_back(fs::path(path).parent_path());
  }

  EvalReport report;
  for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
    std::vector<GridBackbone<float>> grid;
    for (const auto& b : backbones) grid.push_back(b.grid);
    EvalReport part = run_grid(grid, recipes, {tasks[ti]}, table, aug, synth, task_dirs[ti]);
    report.append(part);
  }

  if (lowshot) {
    std::vector<int> shots;
    for (const auto& s : shot_strings) shots.push_back(std::stoi(s));
    for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
      const fs::path splits_root =
          splits_root_cfg.empty() ? task_dirs[ti] / "splits" : fs::path(splits_root_cfg);
      for (const auto& b : backbones) {
        for (const auto& recipe : recipes) {
          EvalReport part = lowshot_curve(b.grid, recipe, tasks[ti], shots, lowshot_splits,
                                          lowshot_seed, splits_root, table, aug, synth,
                                          task_dirs[ti]);
          report.append(part);
        }
      }
    }
  }

  write_text(out / "report.csv", render_report_csv(report));
  write_text(out / "report.md", render_report_markdown(report));
  if (!report.lowshot_means.empty()) {
    write_text(out / "lowshot_means.csv", render_lowshot_means_csv(report));
    std::vector<Curve> curves;
    std::map<std::pair<std::string, std::string>, Curve> by_cell;
    for (const auto& m : report.lowshot_means) {
      auto& curve = by_cell[{m.backbone, m.recipe}];
      curve.label = m.backbone + " / " + m.recipe;
      curve.x.push_back(m.shots);
      curve.y.push_back(m.mean * 100.0);
    }
    for (auto& [key, curve] : by_cell) curves.push_back(curve);
    write_curves_svg(out / "lowshot_curves.svg", curves, "shots per class",
                     "balanced accuracy (%)", "low-shot curves");
  }
  if (report.has_errors()) {
    std::ostringstream errs;
    for (const auto& row : report.rows) {
      if (!row.error.empty()) {
        errs << row.backbone << '/' << row.recipe << '/' << row.task << ": " << row.error << '\n';
      }
    }
    write_text(out / "errors.txt", errs.str());
    std::cerr << "eval finished with errors; see " << (out / "errors.txt").string() << "\n";
    return 5;
  }
  std::cout << "report written to " << (out / "report.csv").string() << "\n";
  return 0;
}

int cmd_lowshot(RunConfig& cfg, bool force, int jobs) {
  cfg.set("lowshot", "true");
  return cmd_eval(cfg, force, jobs);
}

int cmd_tsne(RunConfig& cfg, bool force, int jobs) {
  const fs::path out = prepare_out_dir(cfg.require("out"), force);
  auto backbone = load_backbone(cfg.require("backbone"));
  const fs::path manifest_path = cfg.require("manifest");
  TsneConfig tcfg;
  tcfg.perplexity = cfg.real("perplexity", tcfg.perplexity);
  tcfg.iterations = static_cast<int>(cfg.integer("iterations", tcfg.iterations));
  tcfg.learning_rate = cfg.real("learning_rate", tcfg.learning_rate);
  tcfg.early_exaggeration = cfg.real("early_exaggeration", tcfg.early_exaggeration);
  tcfg.exaggeration_iters =
      static_cast<int>(cfg.integer("exaggeration_iters", tcfg.exaggeration_iters));
  tcfg.seed = cfg.u64("seed", 0);
  const SynthConfig synth = synth_from_config(cfg);
  const AugConfig aug = aug_from_config(cfg, backbone.grid.vit.cfg.img_size, 32);
  cfg.finish(out);

  const DatasetManifest manifest = load_manifest(manifest_path);
  FeatureSet<float> fs_set = extract_features(backbone.grid.vit, manifest, aug, synth,
                                              manifest_path.parent_path(), jobs);
  const TsneResult result = tsne(fs_set.features, tcfg);

  std::ostringstream csv;
  csv << "id,x,y,label,domain_tag\n";
  char buf[64];
  for (Index i = 0; i < result.coords.rows(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g", result.coords(i, 0), result.coords(i, 1));
    csv << fs_set.ids[static_cast<std::size_t>(i)] << ',' << buf << ','
        << fs_set.labels[static_cast<std::size_t>(i)] << ','
        << fs_set.domain_tag[static_cast<std::size_t>(i)] << '\n';
  }
  write_text(out / "tsne.csv", csv.str());

  std::vector<std::string> tags;
  for (const auto& tag : fs_set.domain_tag) {
    const std::string t = tag.empty() ? "untagged" : tag;
    if (std::find(tags.begin(), tags.end(), t) == tags.end()) tags.push_back(t);
  }
  std::sort(tags.begin(), tags.end());
  std::set<int> label_set(fs_set.labels.begin(), fs_set.labels.end());
  std::vector<std::string> marker_names;
  std::map<int, int> label_to_marker;
  for (int lbl : label_set) {
    label_to_marker[lbl] = static_cast<int>(marker_names.size());
    marker_names.push_back("class " + std::to_string(lbl));
  }
  std::vector<ScatterPoint> points;
  for (Index i = 0; i < result.coords.rows(); ++i) {
    ScatterPoint pt;
    pt.x = result.coords(i, 0);
    pt.y = result.coords(i, 1);
    const std::string t = fs_set.domain_tag[static_cast<std::size_t>(i)].empty()
                              ? "untagged"
                              : fs_set.domain_tag[static_cast<std::size_t>(i)];
    pt.color_group = static_cast<int>(
        std::find(tags.begin(), tags.end(), t) - tags.begin());
    pt.marker_group = label_to_marker[fs_set.labels[static_cast<std::size_t>(i)]];
    points.push_back(pt);
  }
  write_scatter_svg(out / "tsne.svg", points, tags, marker_names,
                    "feature space (" + backbone.grid.name + ")");
  std::cout << "t-SNE: KL " << result.kl_initial << " -> " << result.kl_final << "; table at "
            << (out / "tsne.csv").string() << "\n";
  return 0;
}

int cmd_report(RunConfig& cfg, bool force) {
  const fs::path out = prepare_out_dir(cfg.require("out"), force);
  const fs::path in_path = cfg.require("in");
  cfg.finish(out);

  std::ifstream in(in_path);
  if (!in) throw Error::data("cannot open report csv: " + in_path.string());
  EvalReport report;
  std::string line;
  std::getline(in, line);
  const std::string expect =
      "backbone,recipe,task,shots,split,balanced_accuracy,delta_params,contaminated";
  if (line != expect) throw Error::data("unexpected report csv header in " + in_path.string());
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line + ",") {
      if (ch == ',') {
        fields.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(ch);
      }
    }
    if (fields.size() != 8) {
      throw Error::data("report csv parse error at line " + std::to_string(line_no));
    }
    EvalRow row;
    row.backbone = fields[0];
    row.recipe = fields[1];
    row.task = fields[2];
    row.shots = fields[3].empty() ? -1 : std::stoi(fields[3]);
    row.split = fields[4].empty() ? -1 : std::stoi(fields[4]);
    if (fields[5].empty()) {
      row.error = "error row";
    } else {
      row.balanced_accuracy = std::stod(fields[5]);
    }
    row.delta_params = std::stoll(fields[6]);
    row.contaminated = fields[7] == "T" ? Tri::yes : fields[7] == "F" ? Tri::no : Tri::unknown;
    report.rows.push_back(std::move(row));
  }
  report.finalize();
  write_text(out / "report.md", render_report_markdown(report));
  std::cout << "rendered " << (out / "report.md").string() << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"desk-scale SAR representation-learning toolkit"};
  app.require_subcommand(1);

  std::vector<std::string> config_files, sets;
  std::string out, seed_str;
  bool force = false, deterministic = false;
  int jobs = 1;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_files, "key-value config file(s)");
    sub->add_option("--set", sets, "override: key=value");
    sub->add_option("--seed", seed_str, "64-bit run seed");
    sub->add_option("--out", out, "output directory");
    sub->add_flag("--force", force, "allow writing into a non-empty output directory");
    sub->add_flag("--deterministic", deterministic, "single-worker execution");
    sub->add_option("--jobs", jobs, "parallel worker count");
  };

  CLI::App* synth = app.add_subcommand("synth-data", "generate a synthetic corpus and task");
  CLI::App* pretrain_cmd = app.add_subcommand("pretrain", "self-supervised pretraining");
  CLI::App* adapt_cmd = app.add_subcommand("adapt", "train one task-adaptation recipe");
  CLI::App* eval_cmd = app.add_subcommand("eval", "run the benchmark grid");
  CLI::App* lowshot_cmd = app.add_subcommand("lowshot", "low-shot sweep over saved splits");
  CLI::App* tsne_cmd = app.add_subcommand("tsne", "export a 2-D embedding of features");
  CLI::App* report_cmd = app.add_subcommand("report", "re-render a report csv as markdown");
  for (CLI::App* sub : {synth, pretrain_cmd, adapt_cmd, eval_cmd, lowshot_cmd, tsne_cmd,
                        report_cmd}) {
    add_common(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg;
    for (const auto& file : config_files) cfg.load_file(file);
    for (const auto& kv : sets) {
      const auto pos = kv.find('=');
      if (pos == std::string::npos || pos == 0) {
        throw Error::config("--set expects key=value, got: " + kv);
      }
      cfg.set(kv.substr(0, pos), kv.substr(pos + 1));
    }
    if (!out.empty()) cfg.set("out", out);
    if (!seed_str.empty()) cfg.set("seed", seed_str);
    if (deterministic) jobs = 1;

    if (synth->parsed()) return cmd_synth_data(cfg, force);
    if (pretrain_cmd->parsed()) return cmd_pretrain(cfg, force, jobs);
    if (adapt_cmd->parsed()) return cmd_adapt(cfg, force, jobs);
    if (eval_cmd->parsed()) return cmd_eval(cfg, force, jobs);
    if (lowshot_cmd->parsed()) return cmd_lowshot(cfg, force, jobs);
    if (tsne_cmd->parsed()) return cmd_tsne(cfg, force, jobs);
    if (report_cmd->parsed()) return cmd_report(cfg, force);
    throw Error::config("no subcommand");
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.kind()) {
      case ErrKind::config: return 2;
      case ErrKind::data: return 3;
      case ErrKind::state: return 2;
      case ErrKind::numeric: return 4;
    }
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace sarfm
