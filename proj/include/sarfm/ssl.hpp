// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>
#include <vector>

#include "sarfm/augment.hpp"
#include "sarfm/backbone.hpp"
#include "sarfm/checkpoint.hpp"
#include "sarfm/image_io.hpp"
#include "sarfm/manifest.hpp"
#include "sarfm/optim.hpp"

namespace sarfm {

// ---------------------------------------------------------------------------
// projection head
// ---------------------------------------------------------------------------

struct DinoHeadConfig {
  int hidden = 2048;
  int bottleneck = 256;
  int num_prototypes = 4096;

  static DinoHeadConfig desk() { return {512, 64, 256}; }

  void validate() const {
    if (hidden < 1 || bottleneck < 1 || num_prototypes < 2) {
      throw Error::config("dino head: hidden/bottleneck >= 1, prototypes >= 2");
    }
  }
};

/// 3-layer MLP (D -> hidden -> hidden -> bottleneck, GELU between) followed
/// by a prototype matrix applied to the unit-normalized bottleneck vector.
template <typename Scalar>
struct DinoHead {
  DinoHeadConfig cfg;
  int in_dim = 0;
  MatrixX<Scalar> w1, b1, w2, b2, w3, b3;
  MatrixX<Scalar> protos;  // K x bottleneck
};

template <typename HeadT, typename Fn>
void visit_head_params(HeadT& head, Fn&& fn) {
  fn("head.w1", head.w1);
  fn("head.b1", head.b1);
  fn("head.w2", head.w2);
  fn("head.b2", head.b2);
  fn("head.w3", head.w3);
  fn("head.b3", head.b3);
  fn("head.protos", head.protos);
}

template <typename HeadA, typename HeadB, typename Fn>
void visit_head_params2(HeadA& a, HeadB& b, Fn&& fn) {
  fn("head.w1", a.w1, b.w1);
  fn("head.b1", a.b1, b.b1);
  fn("head.w2", a.w2, b.w2);
  fn("head.b2", a.b2, b.b2);
  fn("head.w3", a.w3, b.w3);
  fn("head.b3", a.b3, b.b3);
  fn("head.protos", a.protos, b.protos);
}

template <typename Scalar>
DinoHead<Scalar> init_dino_head(int in_dim, const DinoHeadConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  DinoHead<Scalar> head;
  head.cfg = cfg;
  head.in_dim = in_dim;
  Rng rng(mix_seed(seed, 0xd1a0u));
  auto fill = [&](MatrixX<Scalar>& m, Index rows, Index cols, bool zero) {
    m.resize(rows, cols);
    if (zero) {
      m.setZero();
      return;
    }
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) m(r, c) = static_cast<Scalar>(rng.trunc_normal(0.02));
  };
  fill(head.w1, cfg.hidden, in_dim, false);
  fill(head.b1, 1, cfg.hidden, true);
  fill(head.w2, cfg.hidden, cfg.hidden, false);
  fill(head.b2, 1, cfg.hidden, true);
  fill(head.w3, cfg.bottleneck, cfg.hidden, false);
  fill(head.b3, 1, cfg.bottleneck, true);
  fill(head.protos, cfg.num_prototypes, cfg.bottleneck, false);
  // unit-norm prototype rows: keeps logits O(1) against the unit-normalized
  // bottleneck so the sharpened teacher carries signal from step one
  for (Index r = 0; r < head.protos.rows(); ++r) {
    head.protos.row(r) /= head.protos.row(r).norm();
  }
  return head;
}

template <typename Scalar>
DinoHead<Scalar> zeros_like(const DinoHead<Scalar>& head) {
  DinoHead<Scalar> out = head;
  visit_head_params(out, [](const std::string&, MatrixX<Scalar>& t) { t.setZero(); });
  return out;
}

template <typename Scalar>
struct DinoHeadCache {
  MatrixX<Scalar> x_in, pre1, act1, pre2, act2, z;
  MatrixX<Scalar> znorm;
  VectorX<Scalar> inv_norm;
};

template <typename Scalar>
MatrixX<Scalar> forward_head(const DinoHead<Scalar>& head, const MatrixX<Scalar>& feats,
                             DinoHeadCache<Scalar>* cache = nullptr) {
  MatrixX<Scalar> pre1 = nn::linear(feats, head.w1, head.b1);
  MatrixX<Scalar> act1 = nn::gelu(pre1);
  MatrixX<Scalar> pre2 = nn::linear(act1, head.w2, head.b2);
  MatrixX<Scalar> act2 = nn::gelu(pre2);
  MatrixX<Scalar> z = nn::linear(act2, head.w3, head.b3);
  MatrixX<Scalar> znorm(z.rows(), z.cols());
  VectorX<Scalar> inv_norm(z.rows());
  for (Index r = 0; r < z.rows(); ++r) {
    const Scalar n = std::max(z.row(r).norm(), static_cast<Scalar>(1e-12));
    inv_norm(r) = Scalar(1) / n;
    znorm.row(r) = z.row(r) * inv_norm(r);
  }
  MatrixX<Scalar> logits(z.rows(), head.protos.rows());
  logits.noalias() = znorm * head.protos.transpose();
  if (cache) {
    cache->x_in = feats;
    cache->pre1 = std::move(pre1);
    cache->act1 = std::move(act1);
    cache->pre2 = std::move(pre2);
    cache->act2 = std::move(act2);
    cache->z = std::move(z);
    cache->znorm = std::move(znorm);
    cache->inv_norm = std::move(inv_norm);
  }
  return logits;
}

/// Returns d(feats); accumulates head parameter grads.
template <typename Scalar>
MatrixX<Scalar> backward_head(const DinoHead<Scalar>& head, const DinoHeadCache<Scalar>& cache,
                              const MatrixX<Scalar>& dlogits, DinoHead<Scalar>& grads) {
  grads.protos.noalias() += dlogits.transpose() * cache.znorm;
  MatrixX<Scalar> dznorm(dlogits.rows(), head.cfg.bottleneck);
  dznorm.noalias() = dlogits * head.protos;
  MatrixX<Scalar> dz(dznorm.rows(), dznorm.cols());
  for (Index r = 0; r < dz.rows(); ++r) {
    const Scalar dot = cache.znorm.row(r).dot(dznorm.row(r));
    dz.row(r) = (dznorm.row(r) - dot * cache.znorm.row(r)) * cache.inv_norm(r);
  }
  MatrixX<Scalar> dact2 = nn::linear_backward(dz, cache.act2, head.w3, &grads.w3, &grads.b3);
  MatrixX<Scalar> dpre2 = (dact2.array() * nn::gelu_grad(cache.pre2).array()).matrix();
  MatrixX<Scalar> dact1 = nn::linear_backward(dpre2, cache.act1, head.w2, &grads.w2, &grads.b2);
  MatrixX<Scalar> dpre1 = (dact1.array() * nn::gelu_grad(cache.pre1).array()).matrix();
  return nn::linear_backward(dpre1, cache.x_in, head.w1, &grads.w1, &grads.b1);
}

// ---------------------------------------------------------------------------
// objective pieces
// ---------------------------------------------------------------------------

/// softmax((logits - center) / tau) per row.
template <typename Scalar>
MatrixX<Scalar> teacher_probs(const MatrixX<Scalar>& logits, const VectorX<Scalar>& center,
                              double tau) {
  if (!(tau > 0.0)) throw Error::config("teacher_probs: tau must be > 0");
  if (center.size() != logits.cols()) throw Error::state("teacher_probs: center size mismatch");
  MatrixX<Scalar> shifted = logits;
  shifted.rowwise() -= center.transpose();
  shifted /= static_cast<Scalar>(tau);
  return nn::softmax_rows(shifted);
}

/// Multi-crop self-distillation loss: mean over ordered (teacher global g,
/// student view v), v != g, of cross-entropy between the teacher distribution
/// and softmax(student/tau_s), then mean over the batch. Optionally emits
/// d(loss)/d(student logits) per view.
template <typename Scalar>
Scalar dino_loss(const std::vector<MatrixX<Scalar>>& teacher_views,
                 const std::vector<MatrixX<Scalar>>& student_views, double tau_s,
                 std::vector<MatrixX<Scalar>>* dlogits = nullptr) {
  if (teacher_views.size() != 2) {
    throw Error::state("dino_loss: expected exactly 2 teacher (global) views");
  }
  if (student_views.size() < 2) {
    throw Error::state("dino_loss: pairing error, need >= 2 student views");
  }
  const Index B = teacher_views[0].rows();
  const Index K = teacher_views[0].cols();
  int n_pairs = 0;
  for (std::size_t g = 0; g < teacher_views.size(); ++g) {
    for (std::size_t v = 0; v < student_views.size(); ++v) {
      if (v != g) ++n_pairs;
    }
  }
  if (dlogits) {
    dlogits->assign(student_views.size(), MatrixX<Scalar>::Zero(B, K));
  }
  const Scalar inv_tau = Scalar(1) / static_cast<Scalar>(tau_s);
  const Scalar norm = Scalar(1) / (static_cast<Scalar>(n_pairs) * static_cast<Scalar>(B));
  Scalar loss = 0;
  for (std::size_t v = 0; v < student_views.size(); ++v) {
    const auto& s = student_views[v];
    if (s.rows() != B || s.cols() != K) throw Error::state("dino_loss: view shape mismatch");
    // per-row stable log-softmax of s / tau
    MatrixX<Scalar> logp(B, K);
    MatrixX<Scalar> p(B, K);
    for (Index r = 0; r < B; ++r) {
      const auto row = (s.row(r).array() * inv_tau).eval();
      const Scalar mx = row.maxCoeff();
      const auto ex = (row - mx).exp().eval();
      const Scalar sum = ex.sum();
      logp.row(r) = (row - mx - std::log(sum)).matrix();
      p.row(r) = (ex / sum).matrix();
    }
    for (std::size_t g = 0; g < teacher_views.size(); ++g) {
      if (g == v) continue;
      const auto& t = teacher_views[g];
      loss -= norm * (t.array() * logp.array()).sum();
      if (dlogits) (*dlogits)[v] += (p - t) * (norm * inv_tau);
    }
  }
  return loss;
}

/// c <- m_c * c + (1 - m_c) * batch_mean
template <typename Scalar>
VectorX<Scalar> update_center(const VectorX<Scalar>& center, const VectorX<Scalar>& batch_mean,
                              double m_c) {
  if (m_c < 0.0 || m_c > 1.0) throw Error::config("update_center: m_c must be in [0,1]");
  return static_cast<Scalar>(m_c) * center + static_cast<Scalar>(1.0 - m_c) * batch_mean;
}

namespace detail {

template <typename Scalar>
void ema_tensor(MatrixX<Scalar>& teacher, const MatrixX<Scalar>& student, double m) {
  if (teacher.rows() != student.rows() || teacher.cols() != student.cols()) {
    throw Error::state("ema_update: teacher/student shape mismatch");
  }
  teacher = static_cast<Scalar>(m) * teacher + static_cast<Scalar>(1.0 - m) * student;
}

}  // namespace detail

/// teacher <- m * teacher + (1 - m) * student, every tensor.
template <typename Scalar>
void ema_update(Vit<Scalar>& teacher, const Vit<Scalar>& student, double m) {
  if (m < 0.0 || m > 1.0) throw Error::config("ema_update: m must be in [0,1]");
  visit_params2(teacher, student,
                [&](const std::string&, MatrixX<Scalar>& t, const MatrixX<Scalar>& s) {
                  detail::ema_tensor(t, s, m);
                });
}

template <typename Scalar>
void ema_update(DinoHead<Scalar>& teacher, const DinoHead<Scalar>& student, double m) {
  if (m < 0.0 || m > 1.0) throw Error::config("ema_update: m must be in [0,1]");
  visit_head_params2(teacher, student,
                     [&](const std::string&, MatrixX<Scalar>& t, const MatrixX<Scalar>& s) {
                       detail::ema_tensor(t, s, m);
                     });
}

// ---------------------------------------------------------------------------
// schedules
// ---------------------------------------------------------------------------

struct SslConfig {
  int epochs = 100;
  int batch_size = 64;
  double base_lr = 4e-4;
  double tau_s = 0.1;
  double tau_t = 0.04;
  double tau_t_start = 0.02;
  double tau_t_warmup_frac = 0.1;
  double momentum_start = 0.996;
  double center_momentum = 0.9;
  int warmup_epochs = 10;
  double weight_decay = 0.04;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs between snapshots; 0 = final only
  int jobs = 1;
  DinoHeadConfig head;

  static SslConfig desk() {
    SslConfig cfg;
    cfg.epochs = 30;
    cfg.warmup_epochs = 3;
    cfg.head = DinoHeadConfig::desk();
    return cfg;
  }

  void validate() const {
    if (epochs < 0 || batch_size < 1) throw Error::config("ssl: bad epochs/batch_size");
    if (!(tau_t > 0.0 && tau_s > tau_t)) throw Error::config("ssl: need 0 < tau_t < tau_s");
    if (warmup_epochs < 0 || (epochs > 0 && warmup_epochs > epochs)) {
      throw Error::config("ssl: warmup_epochs out of range");
    }
    head.validate();
  }
};

struct SchedulePoint {
  double lr = 0.0;
  double m = 1.0;
};

/// Learning rate: linear warmup over the warmup epochs, then cosine to 0.
/// Teacher momentum: cosine from momentum_start to 1.0 over all steps.
inline SchedulePoint schedule(long long step, long long total_steps, const SslConfig& cfg) {
  if (step < 0 || step > total_steps) throw Error::config("schedule: step out of range");
  SchedulePoint pt;
  if (total_steps == 0) {
    pt.lr = 0.0;
    pt.m = 1.0;
    return pt;
  }
  const double warmup_steps =
      cfg.epochs > 0 ? static_cast<double>(total_steps) * cfg.warmup_epochs / cfg.epochs : 0.0;
  const double s = static_cast<double>(step);
  if (warmup_steps > 0.0 && s < warmup_steps) {
    pt.lr = cfg.base_lr * s / warmup_steps;
  } else {
    const double span = static_cast<double>(total_steps) - warmup_steps;
    const double prog = span > 0.0 ? (s - warmup_steps) / span : 1.0;
    pt.lr = cfg.base_lr * 0.5 * (1.0 + std::cos(M_PI * prog));
  }
  pt.m = 1.0 - (1.0 - cfg.momentum_start) * 0.5 *
                   (1.0 + std::cos(M_PI * s / static_cast<double>(total_steps)));
  return pt;
}

inline double teacher_temperature(long long step, long long total_steps, const SslConfig& cfg) {
  const double warm = cfg.tau_t_warmup_frac * static_cast<double>(total_steps);
  if (warm <= 0.0 || static_cast<double>(step) >= warm) return cfg.tau_t;
  return cfg.tau_t_start + (cfg.tau_t - cfg.tau_t_start) * static_cast<double>(step) / warm;
}

// ---------------------------------------------------------------------------
// pretraining loop
// ---------------------------------------------------------------------------

template <typename Scalar>
struct SslModel {
  Vit<Scalar> vit;
  DinoHead<Scalar> head;
};

template <typename Scalar>
Checkpoint ssl_checkpoint(const SslModel<Scalar>& model, const std::vector<std::string>& provenance,
                          const SslConfig& cfg) {
  Checkpoint ckpt = vit_to_checkpoint(model.vit);
  visit_head_params(model.head, [&](const std::string& name, const MatrixX<Scalar>& t) {
    ckpt.tensors.push_back(to_named(name, t));
  });
  ckpt.meta["head.hidden"] = std::to_string(model.head.cfg.hidden);
  ckpt.meta["head.bottleneck"] = std::to_string(model.head.cfg.bottleneck);
  ckpt.meta["head.num_prototypes"] = std::to_string(model.head.cfg.num_prototypes);
  ckpt.meta["ssl.epochs"] = std::to_string(cfg.epochs);
  ckpt.meta["ssl.batch_size"] = std::to_string(cfg.batch_size);
  ckpt.meta["ssl.base_lr"] = std::to_string(cfg.base_lr);
  ckpt.meta["ssl.tau_s"] = std::to_string(cfg.tau_s);
  ckpt.meta["ssl.tau_t"] = std::to_string(cfg.tau_t);
  ckpt.meta["ssl.weight_decay"] = std::to_string(cfg.weight_decay);
  ckpt.meta["ssl.warmup_epochs"] = std::to_string(cfg.warmup_epochs);
  ckpt.meta["ssl.seed"] = std::to_string(cfg.seed);
  set_checkpoint_provenance(ckpt, provenance);
  return ckpt;
}

struct PretrainStats {
  std::vector<double> loss_history;
  long long steps = 0;
};

/// One training step's shard work product.
template <typename Scalar>
struct ShardOut {
  double loss = 0.0;
  Vit<Scalar> vgrads;
  DinoHead<Scalar> hgrads;
  VectorX<Scalar> teacher_logit_sum;
  VectorX<Scalar> teacher_prob_sum;
};

/// DINO-style self-distillation over an unlabeled corpus. Deterministic for a
/// fixed seed at any `jobs` value: per-sample augmentation streams are keyed
/// by (seed, epoch, record index) and shard gradients reduce in a fixed
/// order.
template <typename Scalar>
PretrainStats pretrain(const DatasetManifest& corpus, SslModel<Scalar>& model,
                       const SslConfig& cfg, const AugConfig& aug, const SynthConfig& synth,
                       const std::filesystem::path& ckpt_path,
                       const std::filesystem::path& log_path,
                       const std::filesystem::path& chip_base = {}) {
  cfg.validate();
  if (corpus.records.empty()) throw Error::data("pretrain: empty corpus");
  if (aug.global_size % model.vit.cfg.patch_size != 0 ||
      aug.local_size % model.vit.cfg.patch_size != 0) {
    throw Error::config("pretrain: view sizes must be divisible by the patch size");
  }

  const Index N = static_cast<Index>(corpus.records.size());
  const long long steps_per_epoch = (N + cfg.batch_size - 1) / cfg.batch_size;
  const long long total_steps = static_cast<long long>(cfg.epochs) * steps_per_epoch;
  const auto provenance = corpus.source_corpora();

  std::ofstream log;
  if (!log_path.empty()) {
    if (log_path.has_parent_path()) std::filesystem::create_directories(log_path.parent_path());
    log.open(log_path);
    if (!log) throw Error::data("cannot write run log: " + log_path.string());
    log << "step\tepoch\tloss\tlr\tm\tteacher_entropy\n";
  }

  PretrainStats stats;
  if (total_steps == 0) {
    if (!ckpt_path.empty()) save_checkpoint(ssl_checkpoint(model, provenance, cfg), ckpt_path);
    return stats;
  }

  // one decoded copy of every chip
  std::vector<MatrixX<Scalar>> chips(static_cast<std::size_t>(N));
  for (Index i = 0; i < N; ++i) {
    chips[static_cast<std::size_t>(i)] =
        load_chip(corpus.records[static_cast<std::size_t>(i)].image_ref, synth, chip_base)
            .template cast<Scalar>();
  }

  SslModel<Scalar> teacher = model;
  const Index K = model.head.cfg.num_prototypes;
  VectorX<Scalar> center = VectorX<Scalar>::Zero(K);
  AdamW<Scalar> opt;

  const int n_views = 2 + aug.n_local;
  const int shard_count = std::min<int>(8, cfg.batch_size);
  const int workers = std::max(1, std::min(cfg.jobs, shard_count));

  long long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<Index> order(static_cast<std::size_t>(N));
    for (Index i = 0; i < N; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng shuffle_rng(mix_seed(cfg.seed, 0x5affeULL, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    for (Index start = 0; start < N; start += cfg.batch_size, ++step) {
      const Index bsz = std::min<Index>(cfg.batch_size, N - start);
      const auto sched = schedule(step, total_steps, cfg);
      const double tau_t_now = teacher_temperature(step, total_steps, cfg);

      std::vector<ShardOut<Scalar>> shards(static_cast<std::size_t>(shard_count));
      auto run_shard = [&](int s) {
        auto& out = shards[static_cast<std::size_t>(s)];
        std::vector<Index> members;
        for (Index b = s; b < bsz; b += shard_count) members.push_back(order[start + b]);
        out.teacher_logit_sum = VectorX<Scalar>::Zero(K);
        out.teacher_prob_sum = VectorX<Scalar>::Zero(K);
        if (members.empty()) return;
        const Index M = static_cast<Index>(members.size());

        // views for this shard, grouped per view index
        std::vector<std::vector<Image3<Scalar>>> view_batches(
            static_cast<std::size_t>(n_views));
        for (auto& vb : view_batches) vb.reserve(static_cast<std::size_t>(M));
        for (Index mi = 0; mi < M; ++mi) {
          const Index rec = members[static_cast<std::size_t>(mi)];
          Rng rng(mix_seed(cfg.seed ^ 0xa06eedULL, static_cast<std::uint64_t>(epoch),
                           static_cast<std::uint64_t>(rec)));
          ViewSet<Scalar> views = make_views(chips[static_cast<std::size_t>(rec)], aug, rng);
          for (int v = 0; v < 2; ++v)
            view_batches[static_cast<std::size_t>(v)].push_back(std::move(views.globals[v]));
          for (int v = 0; v < aug.n_local; ++v)
            view_batches[static_cast<std::size_t>(2 + v)].push_back(std::move(views.locals[v]));
        }

        // teacher on the two globals (no caches, no grads)
        std::vector<MatrixX<Scalar>> tprobs(2);
        for (int g = 0; g < 2; ++g) {
          MatrixX<Scalar> feats =
              forward_features(teacher.vit, view_batches[static_cast<std::size_t>(g)]);
          MatrixX<Scalar> logits = forward_head(teacher.head, feats);
          out.teacher_logit_sum += logits.colwise().sum().transpose();
          tprobs[static_cast<std::size_t>(g)] = teacher_probs(logits, center, tau_t_now);
          out.teacher_prob_sum +=
              tprobs[static_cast<std::size_t>(g)].colwise().sum().transpose();
        }

        // student on every view, with caches
        std::vector<VitCache<Scalar>> vcaches(static_cast<std::size_t>(n_views));
        std::vector<DinoHeadCache<Scalar>> hcaches(static_cast<std::size_t>(n_views));
        std::vector<MatrixX<Scalar>> slogits(static_cast<std::size_t>(n_views));
        for (int v = 0; v < n_views; ++v) {
          MatrixX<Scalar> feats =
              forward_features(model.vit, view_batches[static_cast<std::size_t>(v)],
                               &vcaches[static_cast<std::size_t>(v)]);
          slogits[static_cast<std::size_t>(v)] = forward_head(
              model.head, feats, &hcaches[static_cast<std::size_t>(v)]);
        }

        std::vector<MatrixX<Scalar>> dlogits;
        const Scalar shard_loss = dino_loss(tprobs, slogits, cfg.tau_s, &dlogits);
        // dino_loss averages over shard rows; reweight to the global batch mean
        const Scalar w = static_cast<Scalar>(M) / static_cast<Scalar>(bsz);
        out.loss = static_cast<double>(shard_loss) * static_cast<double>(w);

        out.vgrads = zeros_like(model.vit);
        out.hgrads = zeros_like(model.head);
        for (int v = 0; v < n_views; ++v) {
          dlogits[static_cast<std::size_t>(v)] *= w;
          MatrixX<Scalar> dfeat =
              backward_head(model.head, hcaches[static_cast<std::size_t>(v)],
                            dlogits[static_cast<std::size_t>(v)], out.hgrads);
          backward_features(model.vit, vcaches[static_cast<std::size_t>(v)], dfeat, out.vgrads);
        }
      };

      if (workers <= 1) {
        for (int s = 0; s < shard_count; ++s) run_shard(s);
      } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w) {
          pool.emplace_back([&, w]() {
            for (int s = w; s < shard_count; s += workers) run_shard(s);
          });
        }
        for (auto& th : pool) th.join();
      }

      // fixed-order reduction
      double loss = 0.0;
      Vit<Scalar> vgrads = zeros_like(model.vit);
      DinoHead<Scalar> hgrads = zeros_like(model.head);
      VectorX<Scalar> tlogit_sum = VectorX<Scalar>::Zero(K);
      VectorX<Scalar> tprob_sum = VectorX<Scalar>::Zero(K);
      for (const auto& sh : shards) {
        loss += sh.loss;
        tlogit_sum += sh.teacher_logit_sum;
        tprob_sum += sh.teacher_prob_sum;
        if (sh.vgrads.blocks.empty()) continue;  // empty shard
        visit_params2(vgrads, sh.vgrads,
                      [](const std::string&, MatrixX<Scalar>& a, const MatrixX<Scalar>& b) {
                        a += b;
                      });
        visit_head_params2(hgrads, sh.hgrads,
                           [](const std::string&, MatrixX<Scalar>& a, const MatrixX<Scalar>& b) {
                             a += b;
                           });
      }

      double grad_sq = 0.0;
      visit_params(vgrads, [&](const std::string&, const MatrixX<Scalar>& g) {
        grad_sq += static_cast<double>(g.squaredNorm());
      });
      visit_head_params(hgrads, [&](const std::string&, const MatrixX<Scalar>& g) {
        grad_sq += static_cast<double>(g.squaredNorm());
      });
      if (!std::isfinite(loss) || !std::isfinite(grad_sq)) {
        throw Error::numeric("pretrain aborted: non-finite loss at step " + std::to_string(step) +
                             " (lr=" + std::to_string(sched.lr) +
                             ", grad_norm=" + std::to_string(std::sqrt(grad_sq)) + ")");
      }

      opt.begin_step();
      visit_params2(model.vit, vgrads,
                    [&](const std::string& name, MatrixX<Scalar>& p, const MatrixX<Scalar>& g) {
                      if (model.vit.is_trainable(name)) {
                        opt.update(name, p, g, sched.lr, cfg.weight_decay);
                      }
                    });
      // prototype layer follows the weight-norm convention: frozen for the
      // first epoch, rows renormalized to unit length after every step
      visit_head_params2(model.head, hgrads,
                         [&](const std::string& name, MatrixX<Scalar>& p,
                             const MatrixX<Scalar>& g) {
                           if (name == "head.protos" && epoch == 0 && cfg.epochs > 1) return;
                           opt.update(name, p, g, sched.lr, cfg.weight_decay);
                         });
      for (Index r = 0; r < model.head.protos.rows(); ++r) {
        const Scalar n = model.head.protos.row(r).norm();
        if (n > Scalar(0)) model.head.protos.row(r) /= n;
      }

      ema_update(teacher.vit, model.vit, sched.m);
      ema_update(teacher.head, model.head, sched.m);

      const VectorX<Scalar> batch_mean = tlogit_sum / static_cast<Scalar>(2 * bsz);
      center = update_center(center, batch_mean, cfg.center_momentum);

      // entropy of the batch-mean teacher distribution (collapse indicator)
      const VectorX<Scalar> mean_prob = tprob_sum / static_cast<Scalar>(2 * bsz);
      double entropy = 0.0;
      for (Index kIdx = 0; kIdx < K; ++kIdx) {
        const double p = static_cast<double>(mean_prob(kIdx));
        if (p > 0.0) entropy -= p * std::log(p);
      }

      stats.loss_history.push_back(loss);
      if (log) {
        log << step << '\t' << epoch << '\t' << loss << '\t' << sched.lr << '\t' << sched.m << '\t'
            << entropy << std::endl;
      }
    }

    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
        epoch + 1 < cfg.epochs && !ckpt_path.empty()) {
      auto snap = ckpt_path;
      snap.replace_filename(ckpt_path.stem().string() + "-e" + std::to_string(epoch + 1) +
                            ckpt_path.extension().string());
      save_checkpoint(ssl_checkpoint(model, provenance, cfg), snap);
    }
  }

  stats.steps = step;
  if (!ckpt_path.empty()) save_checkpoint(ssl_checkpoint(model, provenance, cfg), ckpt_path);
  return stats;
}

}  // namespace sarfm
