// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "sarfm/augment.hpp"
#include "sarfm/backbone.hpp"
#include "sarfm/image_io.hpp"
#include "sarfm/manifest.hpp"
#include "sarfm/optim.hpp"

namespace sarfm {

enum class RecipeKind {
  nearest_neighbor,
  linear_probe,
  multilayer_probe,
  lora_finetune,
  full_finetune,
};

inline std::string recipe_kind_name(RecipeKind kind) {
  switch (kind) {
    case RecipeKind::nearest_neighbor: return "nearest_neighbor";
    case RecipeKind::linear_probe: return "linear_probe";
    case RecipeKind::multilayer_probe: return "multilayer_probe";
    case RecipeKind::lora_finetune: return "lora_finetune";
    case RecipeKind::full_finetune: return "full_finetune";
  }
  return "?";
}

inline RecipeKind parse_recipe_kind(const std::string& name) {
  if (name == "nearest_neighbor") return RecipeKind::nearest_neighbor;
  if (name == "linear_probe") return RecipeKind::linear_probe;
  if (name == "multilayer_probe") return RecipeKind::multilayer_probe;
  if (name == "lora_finetune") return RecipeKind::lora_finetune;
  if (name == "full_finetune") return RecipeKind::full_finetune;
  throw Error::config("unknown recipe kind: " + name);
}

/// A task-adaptation recipe: head geometry, trainability scope and the shared
/// supervised training setup (100 epochs, Adam lr 0.001, cosine decay,
/// label-smoothed cross-entropy).
struct RecipeConfig {
  RecipeKind kind = RecipeKind::nearest_neighbor;
  int k = 1;                 // nearest_neighbor only
  double hidden_mult = 2.0;  // probe hidden width = hidden_mult * D
  int rank = 3;              // lora_finetune only
  int epochs = 100;
  double lr = 1e-3;
  double label_smoothing = 0.1;
  int batch_size = 64;
  std::uint64_t seed = 0;
  int jobs = 1;

  void validate() const {
    if (k < 1) throw Error::config("recipe: k must be >= 1");
    if (rank < 1) throw Error::config("recipe: rank must be >= 1");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
      throw Error::config("recipe: label smoothing must be in [0,1)");
    }
    if (epochs < 0 || batch_size < 1 || hidden_mult <= 0.0) {
      throw Error::config("recipe: bad epochs/batch/hidden_mult");
    }
  }

  bool trains_head() const { return kind != RecipeKind::nearest_neighbor; }
  bool mlp_head() const { return kind != RecipeKind::linear_probe && trains_head(); }
  bool touches_backbone() const {
    return kind == RecipeKind::lora_finetune || kind == RecipeKind::full_finetune;
  }
};

// ---------------------------------------------------------------------------
// task heads
// ---------------------------------------------------------------------------

/// Linear (D -> C) or two-layer (D -> hidden -> C, ReLU) classifier head.
template <typename Scalar>
struct TaskHead {
  bool mlp = false;
  MatrixX<Scalar> w1, b1;  // linear: C x D; mlp: hidden x D
  MatrixX<Scalar> w2, b2;  // mlp only: C x hidden

  long long param_count() const {
    long long n = static_cast<long long>(w1.size()) + b1.size();
    if (mlp) n += static_cast<long long>(w2.size()) + b2.size();
    return n;
  }
};

template <typename HeadA, typename HeadB, typename Fn>
void visit_task_head2(HeadA& a, HeadB& b, Fn&& fn) {
  fn("thead.w1", a.w1, b.w1);
  fn("thead.b1", a.b1, b.b1);
  if (a.mlp) {
    fn("thead.w2", a.w2, b.w2);
    fn("thead.b2", a.b2, b.b2);
  }
}

template <typename Scalar>
TaskHead<Scalar> init_task_head(int in_dim, int num_classes, bool mlp, double hidden_mult,
                                std::uint64_t seed) {
  TaskHead<Scalar> head;
  head.mlp = mlp;
  Rng rng(mix_seed(seed, 0x4eadu));
  const int hidden = mlp ? static_cast<int>(std::lround(hidden_mult * in_dim)) : num_classes;
  auto fill = [&](MatrixX<Scalar>& m, Index rows, Index cols) {
    m.resize(rows, cols);
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) m(r, c) = static_cast<Scalar>(rng.trunc_normal(0.02));
  };
  if (mlp) {
    fill(head.w1, hidden, in_dim);
    head.b1 = MatrixX<Scalar>::Zero(1, hidden);
    fill(head.w2, num_classes, hidden);
    head.b2 = MatrixX<Scalar>::Zero(1, num_classes);
  } else {
    fill(head.w1, num_classes, in_dim);
    head.b1 = MatrixX<Scalar>::Zero(1, num_classes);
  }
  return head;
}

template <typename Scalar>
TaskHead<Scalar> zeros_like(const TaskHead<Scalar>& head) {
  TaskHead<Scalar> out = head;
  out.w1.setZero();
  out.b1.setZero();
  if (out.mlp) {
    out.w2.setZero();
    out.b2.setZero();
  }
  return out;
}

template <typename Scalar>
struct TaskHeadCache {
  MatrixX<Scalar> x_in, pre, act;
};

template <typename Scalar>
MatrixX<Scalar> forward_task_head(const TaskHead<Scalar>& head, const MatrixX<Scalar>& feats,
                                  TaskHeadCache<Scalar>* cache = nullptr) {
  if (!head.mlp) {
    if (cache) cache->x_in = feats;
    return nn::linear(feats, head.w1, head.b1);
  }
  MatrixX<Scalar> pre = nn::linear(feats, head.w1, head.b1);
  MatrixX<Scalar> act = pre.cwiseMax(Scalar(0));
  MatrixX<Scalar> out = nn::linear(act, head.w2, head.b2);
  if (cache) {
    cache->x_in = feats;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return out;
}

/// Returns d(feats); accumulates head grads.
template <typename Scalar>
MatrixX<Scalar> backward_task_head(const TaskHead<Scalar>& head, const TaskHeadCache<Scalar>& cache,
                                   const MatrixX<Scalar>& dlogits, TaskHead<Scalar>& grads,
                                   bool compute_dx = true) {
  if (!head.mlp) {
    return nn::linear_backward(dlogits, cache.x_in, head.w1, &grads.w1, &grads.b1, compute_dx);
  }
  MatrixX<Scalar> dact = nn::linear_backward(dlogits, cache.act, head.w2, &grads.w2, &grads.b2);
  MatrixX<Scalar> dpre =
      (dact.array() * (cache.pre.array() > Scalar(0)).template cast<Scalar>()).matrix();
  return nn::linear_backward(dpre, cache.x_in, head.w1, &grads.w1, &grads.b1, compute_dx);
}

// ---------------------------------------------------------------------------
// losses and shape-only accounting
// ---------------------------------------------------------------------------

/// Label-smoothed cross-entropy for one logit vector:
/// q = (1-alpha) * onehot(label) + alpha / C.
template <typename Scalar>
Scalar smoothed_ce(const VectorX<Scalar>& logits, int label, double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw Error::config("smoothed_ce: alpha must be in [0,1)");
  const Index C = logits.size();
  if (label < 0 || label >= C) throw Error::state("smoothed_ce: label out of range");
  const Scalar mx = logits.maxCoeff();
  const Scalar lse = std::log((logits.array() - mx).exp().sum()) + mx;
  Scalar loss = 0;
  const Scalar uniform = static_cast<Scalar>(alpha) / static_cast<Scalar>(C);
  for (Index c = 0; c < C; ++c) {
    const Scalar q =
        uniform + (c == label ? static_cast<Scalar>(1.0 - alpha) : Scalar(0));
    loss -= q * (logits(c) - lse);
  }
  return loss;
}

/// Batch mean of smoothed_ce; optionally emits d(loss)/d(logits).
template <typename Scalar>
Scalar smoothed_ce_batch(const MatrixX<Scalar>& logits, const std::vector<int>& labels,
                         double alpha, MatrixX<Scalar>* dlogits = nullptr) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) {
    throw Error::state("smoothed_ce_batch: batch size mismatch");
  }
  const Index B = logits.rows(), C = logits.cols();
  const Scalar uniform = static_cast<Scalar>(alpha) / static_cast<Scalar>(C);
  if (dlogits) dlogits->resize(B, C);
  Scalar loss = 0;
  for (Index r = 0; r < B; ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    if (label < 0 || label >= C) throw Error::state("smoothed_ce_batch: label out of range");
    const Scalar mx = logits.row(r).maxCoeff();
    const auto ex = (logits.row(r).array() - mx).exp().eval();
    const Scalar sum = ex.sum();
    const Scalar lse = std::log(sum) + mx;
    for (Index c = 0; c < C; ++c) {
      const Scalar q = uniform + (c == label ? static_cast<Scalar>(1.0 - alpha) : Scalar(0));
      loss -= q * (logits(r, c) - lse);
      if (dlogits) {
        (*dlogits)(r, c) = (ex(c) / sum - q) / static_cast<Scalar>(B);
      }
    }
  }
  return loss / static_cast<Scalar>(B);
}

inline long long head_param_count(RecipeKind kind, int embed_dim, int num_classes,
                                  double hidden_mult) {
  switch (kind) {
    case RecipeKind::nearest_neighbor:
      return 0;
    case RecipeKind::linear_probe:
      return static_cast<long long>(embed_dim) * num_classes + num_classes;
    default: {
      const long long hidden = std::lround(hidden_mult * embed_dim);
      return static_cast<long long>(embed_dim) * hidden + hidden +
             hidden * static_cast<long long>(num_classes) + num_classes;
    }
  }
}

/// Trainable-parameter delta of a recipe on a backbone geometry, without
/// allocating any tensors. Matches count_trainable(...) of the trained model.
inline long long recipe_delta_params(const RecipeConfig& recipe, const BackboneConfig& cfg,
                                     int num_classes) {
  const long long head = head_param_count(recipe.kind, cfg.embed_dim, num_classes,
                                          recipe.hidden_mult);
  switch (recipe.kind) {
    case RecipeKind::nearest_neighbor:
    case RecipeKind::linear_probe:
    case RecipeKind::multilayer_probe:
      return head;
    case RecipeKind::lora_finetune:
      return lora_param_count(cfg, LoraConfig{recipe.rank, true, true}) + head;
    case RecipeKind::full_finetune:
      return count_params(cfg) + head;
  }
  return head;
}

// ---------------------------------------------------------------------------
// nearest neighbor
// ---------------------------------------------------------------------------

template <typename Scalar>
MatrixX<Scalar> normalize_rows(const MatrixX<Scalar>& x) {
  MatrixX<Scalar> out = x;
  for (Index r = 0; r < out.rows(); ++r) {
    const Scalar n = out.row(r).norm();
    if (n > Scalar(1e-12)) out.row(r) /= n;
  }
  return out;
}

/// Cosine-similarity k-NN vote. Majority label among the top-k neighbors;
/// ties resolve by larger summed similarity, then by smaller class index.
template <typename Scalar>
std::vector<int> knn_predict(const MatrixX<Scalar>& support, const std::vector<int>& support_labels,
                             const MatrixX<Scalar>& queries, int k) {
  if (support.rows() == 0) throw Error::config("knn: empty support set");
  if (static_cast<std::size_t>(support.rows()) != support_labels.size()) {
    throw Error::state("knn: support labels size mismatch");
  }
  if (support.cols() != queries.cols()) throw Error::state("knn: feature width mismatch");
  if (k < 1 || k > support.rows()) {
    throw Error::config("knn: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(support.rows()) + "]");
  }
  const int num_classes = 1 + *std::max_element(support_labels.begin(), support_labels.end());
  const MatrixX<Scalar> sn = normalize_rows(support);
  const MatrixX<Scalar> qn = normalize_rows(queries);
  MatrixX<Scalar> sims(qn.rows(), sn.rows());
  sims.noalias() = qn * sn.transpose();

  std::vector<int> preds(static_cast<std::size_t>(queries.rows()));
  std::vector<Index> idx(static_cast<std::size_t>(support.rows()));
  for (Index q = 0; q < qn.rows(); ++q) {
    std::iota(idx.begin(), idx.end(), Index(0));
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](Index a, Index b) {
      if (sims(q, a) != sims(q, b)) return sims(q, a) > sims(q, b);
      return a < b;
    });
    std::vector<int> votes(static_cast<std::size_t>(num_classes), 0);
    std::vector<double> simsum(static_cast<std::size_t>(num_classes), 0.0);
    for (int i = 0; i < k; ++i) {
      const int lbl = support_labels[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
      votes[static_cast<std::size_t>(lbl)] += 1;
      simsum[static_cast<std::size_t>(lbl)] +=
          static_cast<double>(sims(q, idx[static_cast<std::size_t>(i)]));
    }
    int best = -1;
    for (int c = 0; c < num_classes; ++c) {
      if (votes[static_cast<std::size_t>(c)] == 0) continue;
      if (best < 0 || votes[static_cast<std::size_t>(c)] > votes[static_cast<std::size_t>(best)] ||
          (votes[static_cast<std::size_t>(c)] == votes[static_cast<std::size_t>(best)] &&
           simsum[static_cast<std::size_t>(c)] > simsum[static_cast<std::size_t>(best)])) {
        best = c;
      }
    }
    preds[static_cast<std::size_t>(q)] = best;
  }
  return preds;
}

// ---------------------------------------------------------------------------
// feature extraction
// ---------------------------------------------------------------------------

template <typename Scalar>
struct FeatureSet {
  MatrixX<Scalar> features;  // row order = manifest order
  std::vector<int> labels;   // -1 when absent
  std::vector<std::string> ids;
  std::vector<std::string> domain_tag;  // first tag, or ""
};

/// Deterministic eval_preprocess + forward_features over a manifest. The
/// backbone is read-only; rows follow manifest order.
template <typename Scalar>
FeatureSet<Scalar> extract_features(const Vit<Scalar>& vit, const DatasetManifest& manifest,
                                    const AugConfig& aug, const SynthConfig& synth,
                                    const std::filesystem::path& base_dir = {}, int jobs = 1) {
  const Index n = static_cast<Index>(manifest.records.size());
  FeatureSet<Scalar> out;
  out.features.resize(n, vit.cfg.embed_dim);
  out.labels.resize(static_cast<std::size_t>(n), -1);
  out.ids.resize(static_cast<std::size_t>(n));
  out.domain_tag.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const auto& rec = manifest.records[static_cast<std::size_t>(i)];
    out.ids[static_cast<std::size_t>(i)] = rec.id;
    if (rec.label) out.labels[static_cast<std::size_t>(i)] = *rec.label;
    if (!rec.domain_tags.empty()) {
      out.domain_tag[static_cast<std::size_t>(i)] = *rec.domain_tags.begin();
    }
  }

  constexpr Index kBlock = 32;
  const Index blocks = (n + kBlock - 1) / kBlock;
  std::string first_error;
  std::mutex err_mutex;
  auto run_block = [&](Index blk) {
    const Index lo = blk * kBlock;
    const Index hi = std::min(n, lo + kBlock);
    try {
      std::vector<Image3<Scalar>> batch;
      batch.reserve(static_cast<std::size_t>(hi - lo));
      for (Index i = lo; i < hi; ++i) {
        const auto& rec = manifest.records[static_cast<std::size_t>(i)];
        try {
          MatrixX<Scalar> chip =
              load_chip(rec.image_ref, synth, base_dir).template cast<Scalar>();
          batch.push_back(eval_preprocess(chip, aug));
        } catch (const std::exception& ex) {
          throw Error::data("record " + rec.id + ": " + ex.what());
        }
      }
      const MatrixX<Scalar> feats = forward_features(vit, batch);
      out.features.middleRows(lo, hi - lo) = feats;
    } catch (const std::exception& ex) {
      const std::scoped_lock lock(err_mutex);
      if (first_error.empty()) first_error = ex.what();
    }
  };

  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(blocks)));
  if (workers <= 1 || blocks <= 1) {
    for (Index b = 0; b < blocks; ++b) run_block(b);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w]() {
        for (Index b = w; b < blocks; b += workers) run_block(b);
      });
    }
    for (auto& th : pool) th.join();
  }
  if (!first_error.empty()) throw Error::data(first_error);
  return out;
}

// ---------------------------------------------------------------------------
// adaptation
// ---------------------------------------------------------------------------

template <typename Scalar>
struct AdaptedModel {
  RecipeConfig recipe;
  int num_classes = 0;
  Vit<Scalar> vit;  // frozen recipes leave this bit-identical to the input
  std::optional<TaskHead<Scalar>> head;
  std::optional<FeatureSet<Scalar>> nn_index;
  long long delta_params = 0;
};

/// Cosine decay without warmup, the shared supervised schedule.
inline double cosine_lr(double base, long long step, long long total) {
  if (total <= 0) return 0.0;
  return base * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total)));
}

/// Trains a head on a fixed feature matrix (Adam, cosine decay, smoothed CE).
/// The shared loop with recomputed backbone features lives in adapt(); this
/// entry exists for feature-space experiments and tests.
template <typename Scalar>
void fit_head_on_features(TaskHead<Scalar>& head, const MatrixX<Scalar>& features,
                          const std::vector<int>& labels, const RecipeConfig& recipe) {
  recipe.validate();
  const Index n = features.rows();
  if (static_cast<std::size_t>(n) != labels.size()) {
    throw Error::state("fit_head_on_features: labels size mismatch");
  }
  AdamW<Scalar> opt;
  const long long steps_per_epoch = (n + recipe.batch_size - 1) / recipe.batch_size;
  const long long total = recipe.epochs * steps_per_epoch;
  long long step = 0;
  for (int epoch = 0; epoch < recipe.epochs; ++epoch) {
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index(0));
    Rng rng(mix_seed(recipe.seed, 0xf17u, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    for (Index start = 0; start < n; start += recipe.batch_size, ++step) {
      const Index bsz = std::min<Index>(recipe.batch_size, n - start);
      MatrixX<Scalar> x(bsz, features.cols());
      std::vector<int> y(static_cast<std::size_t>(bsz));
      for (Index b = 0; b < bsz; ++b) {
        x.row(b) = features.row(order[static_cast<std::size_t>(start + b)]);
        y[static_cast<std::size_t>(b)] =
            labels[static_cast<std::size_t>(order[static_cast<std::size_t>(start + b)])];
      }
      TaskHeadCache<Scalar> cache;
      MatrixX<Scalar> logits = forward_task_head(head, x, &cache);
      MatrixX<Scalar> dlogits;
      const Scalar loss = smoothed_ce_batch(logits, y, recipe.label_smoothing, &dlogits);
      if (!std::isfinite(static_cast<double>(loss))) {
        throw Error::numeric("fit_head_on_features: non-finite loss at step " +
                             std::to_string(step));
      }
      TaskHead<Scalar> grads = zeros_like(head);
      backward_task_head(head, cache, dlogits, grads, /*compute_dx=*/false);
      opt.begin_step();
      const double lr = cosine_lr(recipe.lr, step, total);
      visit_task_head2(head, grads,
                       [&](const std::string& name, MatrixX<Scalar>& p, const MatrixX<Scalar>& g) {
                         opt.update(name, p, g, lr, 0.0);
                       });
    }
  }
}

namespace detail {

/// Light train-time augmentation for supervised recipes: random crop
/// (scale [0.6, 1]) and flips only, then channel replication + normalization.
template <typename Scalar>
Image3<Scalar> train_aug(const MatrixX<Scalar>& chip, const AugConfig& aug, Rng& rng) {
  MatrixX<Scalar> v = random_resized_crop(chip, 0.6, 1.0, aug.global_size, rng);
  if (rng.bernoulli(0.5)) v = hflip(v);
  if (rng.bernoulli(0.5)) v = vflip(v);
  return normalize(to_three_channel(v), aug);
}

}  // namespace detail

template <typename Scalar>
AdaptedModel<Scalar> adapt(const Vit<Scalar>& backbone, const TaskSpec& task,
                           const RecipeConfig& recipe, const DatasetManifest& train_manifest,
                           const AugConfig& aug, const SynthConfig& synth,
                           const std::filesystem::path& base_dir = {}) {
  recipe.validate();
  // labels must cover every class
  std::vector<int> seen(static_cast<std::size_t>(task.num_classes), 0);
  for (const auto& rec : train_manifest.records) {
    if (!rec.label) throw Error::data("adapt: unlabeled train record " + rec.id);
    if (*rec.label >= task.num_classes) {
      throw Error::data("adapt: train label out of range for record " + rec.id);
    }
    seen[static_cast<std::size_t>(*rec.label)] = 1;
  }
  for (int c = 0; c < task.num_classes; ++c) {
    if (!seen[static_cast<std::size_t>(c)]) {
      throw Error::data("adapt: class " + std::to_string(c) + " has no train records");
    }
  }

  AdaptedModel<Scalar> model;
  model.recipe = recipe;
  model.num_classes = task.num_classes;
  model.vit = backbone;

  if (recipe.kind == RecipeKind::nearest_neighbor) {
    model.nn_index = extract_features(backbone, train_manifest, aug, synth, base_dir, recipe.jobs);
    model.delta_params = 0;
    return model;
  }

  switch (recipe.kind) {
    case RecipeKind::linear_probe:
    case RecipeKind::multilayer_probe:
      set_trainable(model.vit, TrainScope::none);
      break;
    case RecipeKind::lora_finetune:
      inject_lora(model.vit, LoraConfig{recipe.rank, true, true}, mix_seed(recipe.seed, 0x10adu));
      break;
    case RecipeKind::full_finetune:
      set_trainable(model.vit, TrainScope::all);
      break;
    default:
      break;
  }

  model.head = init_task_head<Scalar>(model.vit.cfg.embed_dim, task.num_classes,
                                      recipe.mlp_head(), recipe.hidden_mult,
                                      mix_seed(recipe.seed, 0x3eadu));
  model.delta_params = count_trainable(model.vit, model.head->param_count());

  const Index n = static_cast<Index>(train_manifest.records.size());
  std::vector<MatrixX<Scalar>> chips(static_cast<std::size_t>(n));
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const auto& rec = train_manifest.records[static_cast<std::size_t>(i)];
    chips[static_cast<std::size_t>(i)] =
        load_chip(rec.image_ref, synth, base_dir).template cast<Scalar>();
    labels[static_cast<std::size_t>(i)] = *rec.label;
  }

  const bool backbone_grads = recipe.touches_backbone();
  AdamW<Scalar> opt;
  const long long steps_per_epoch = (n + recipe.batch_size - 1) / recipe.batch_size;
  const long long total = recipe.epochs * steps_per_epoch;
  const int shard_count = std::min<int>(8, recipe.batch_size);
  const int workers = std::max(1, std::min(recipe.jobs, shard_count));

  struct Shard {
    Scalar loss = 0;
    Vit<Scalar> vgrads;
    TaskHead<Scalar> hgrads;
    bool used = false;
  };

  long long step = 0;
  for (int epoch = 0; epoch < recipe.epochs; ++epoch) {
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index(0));
    Rng rng(mix_seed(recipe.seed, 0xada9u, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    for (Index start = 0; start < n; start += recipe.batch_size, ++step) {
      const Index bsz = std::min<Index>(recipe.batch_size, n - start);
      std::vector<Shard> shards(static_cast<std::size_t>(shard_count));
      auto run_shard = [&](int s) {
        auto& sh = shards[static_cast<std::size_t>(s)];
        std::vector<Index> members;
        for (Index b = s; b < bsz; b += shard_count) members.push_back(order[start + b]);
        if (members.empty()) return;
        sh.used = true;
        std::vector<Image3<Scalar>> batch;
        std::vector<int> y;
        batch.reserve(members.size());
        for (Index rec : members) {
          Rng arng(mix_seed(recipe.seed ^ 0x7a21ULL, static_cast<std::uint64_t>(epoch),
                            static_cast<std::uint64_t>(rec)));
          batch.push_back(detail::train_aug(chips[static_cast<std::size_t>(rec)], aug, arng));
          y.push_back(labels[static_cast<std::size_t>(rec)]);
        }
        VitCache<Scalar> vcache;
        MatrixX<Scalar> feats =
            forward_features(model.vit, batch, backbone_grads ? &vcache : nullptr);
        TaskHeadCache<Scalar> hcache;
        MatrixX<Scalar> logits = forward_task_head(*model.head, feats, &hcache);
        MatrixX<Scalar> dlogits;
        const Scalar shard_loss = smoothed_ce_batch(logits, y, recipe.label_smoothing, &dlogits);
        const Scalar w = static_cast<Scalar>(members.size()) / static_cast<Scalar>(bsz);
        sh.loss = shard_loss * w;
        dlogits *= w;
        sh.hgrads = zeros_like(*model.head);
        MatrixX<Scalar> dfeat =
            backward_task_head(*model.head, hcache, dlogits, sh.hgrads, backbone_grads);
        if (backbone_grads) {
          sh.vgrads = zeros_like(model.vit);
          backward_features(model.vit, vcache, dfeat, sh.vgrads);
        }
      };

      if (workers <= 1) {
        for (int s = 0; s < shard_count; ++s) run_shard(s);
      } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) {
          pool.emplace_back([&, w]() {
            for (int s = w; s < shard_count; s += workers) run_shard(s);
          });
        }
        for (auto& th : pool) th.join();
      }

      Scalar loss = 0;
      TaskHead<Scalar> hgrads = zeros_like(*model.head);
      Vit<Scalar> vgrads;
      if (backbone_grads) vgrads = zeros_like(model.vit);
      for (const auto& sh : shards) {
        if (!sh.used) continue;
        loss += sh.loss;
        visit_task_head2(hgrads, sh.hgrads,
                         [](const std::string&, MatrixX<Scalar>& a, const MatrixX<Scalar>& b) {
                           a += b;
                         });
        if (backbone_grads) {
          visit_params2(vgrads, sh.vgrads,
                        [](const std::string&, MatrixX<Scalar>& a, const MatrixX<Scalar>& b) {
                          a += b;
                        });
        }
      }
      if (!std::isfinite(static_cast<double>(loss))) {
        throw Error::numeric("adapt aborted: non-finite loss at step " + std::to_string(step));
      }

      opt.begin_step();
      const double lr = cosine_lr(recipe.lr, step, total);
      visit_task_head2(*model.head, hgrads,
                       [&](const std::string& name, MatrixX<Scalar>& p, const MatrixX<Scalar>& g) {
                         opt.update(name, p, g, lr, 0.0);
                       });
      if (backbone_grads) {
        visit_params2(model.vit, vgrads,
                      [&](const std::string& name, MatrixX<Scalar>& p, const MatrixX<Scalar>& g) {
                        if (model.vit.is_trainable(name)) opt.update(name, p, g, lr, 0.0);
                      });
      }
    }
  }
  return model;
}

/// Deterministic prediction path: nn vote or head argmax over
/// eval-preprocessed features, aligned with manifest order.
template <typename Scalar>
std::vector<int> predict(const AdaptedModel<Scalar>& model, const DatasetManifest& manifest,
                         const AugConfig& aug, const SynthConfig& synth,
                         const std::filesystem::path& base_dir = {}, int jobs = 1) {
  if (model.nn_index.has_value() == model.head.has_value()) {
    throw Error::state("predict: model must have exactly one prediction path");
  }
  FeatureSet<Scalar> fs = extract_features(model.vit, manifest, aug, synth, base_dir, jobs);
  if (model.nn_index) {
    return knn_predict(model.nn_index->features, model.nn_index->labels, fs.features,
                       model.recipe.k);
  }
  const MatrixX<Scalar> logits = forward_task_head(*model.head, fs.features);
  std::vector<int> preds(static_cast<std::size_t>(logits.rows()));
  for (Index r = 0; r < logits.rows(); ++r) {
    Index best = 0;
    logits.row(r).maxCoeff(&best);
    preds[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return preds;
}

}  // namespace sarfm
