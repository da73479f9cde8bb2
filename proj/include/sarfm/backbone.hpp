// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sarfm/error.hpp"
#include "sarfm/rng.hpp"
#include "sarfm/types.hpp"

namespace sarfm {

struct BackboneConfig {
  int img_size = 64;
  int patch_size = 8;
  int embed_dim = 128;
  int depth = 4;
  int num_heads = 4;
  int n_registers = 4;
  double mlp_ratio = 4.0;

  int grid() const { return img_size / patch_size; }
  int patches() const { return grid() * grid(); }
  int tokens() const { return 1 + n_registers + patches(); }
  int tokens_for_side(int side) const {
    return 1 + n_registers + (side / patch_size) * (side / patch_size);
  }
  int mlp_hidden() const { return static_cast<int>(std::lround(mlp_ratio * embed_dim)); }
  int patch_dim() const { return 3 * patch_size * patch_size; }

  void validate() const {
    if (img_size < 1 || patch_size < 1 || img_size % patch_size != 0) {
      throw Error::config("backbone: img_size must be a positive multiple of patch_size");
    }
    if (embed_dim < 1 || num_heads < 1 || embed_dim % num_heads != 0) {
      throw Error::config("backbone: embed_dim must be a positive multiple of num_heads");
    }
    if (depth < 1 || n_registers < 0 || mlp_ratio <= 0.0) {
      throw Error::config("backbone: bad depth / registers / mlp_ratio");
    }
  }
};

/// ViT-B/14 with 4 registers; used shape-only for parameter accounting.
inline BackboneConfig vitb14_shape() {
  return BackboneConfig{224, 14, 768, 12, 12, 4, 4.0};
}

/// Desk-scale trainable configuration.
inline BackboneConfig desk_config() {
  return BackboneConfig{64, 8, 128, 4, 4, 4, 4.0};
}

/// Tiny double-precision geometry for finite-difference checks.
inline BackboneConfig gradcheck_config() {
  return BackboneConfig{32, 8, 32, 2, 2, 4, 2.0};
}

struct LoraConfig {
  int rank = 3;
  bool on_query = true;
  bool on_value = true;
};

enum class TrainScope { none, all, adapters_only };

/// ViT parameters. Every tensor is a row-major matrix (biases and norm
/// parameters are 1 x n) so that serialization, EMA mirrors, optimizer state
/// and gradient accumulators all share one visitation order.
template <typename Scalar>
struct Vit {
  struct Block {
    MatrixX<Scalar> ln1_g, ln1_b;
    MatrixX<Scalar> wq, bq, wk, bk, wv, bv;
    MatrixX<Scalar> lora_aq, lora_bq, lora_av, lora_bv;  // empty unless injected
    MatrixX<Scalar> wo, bo;
    MatrixX<Scalar> ln2_g, ln2_b;
    MatrixX<Scalar> fc1_w, fc1_b, fc2_w, fc2_b;
  };

  BackboneConfig cfg;
  std::optional<LoraConfig> lora;
  MatrixX<Scalar> patch_w, patch_b;  // D x Pd, 1 x D
  MatrixX<Scalar> cls, registers, pos;
  std::vector<Block> blocks;
  MatrixX<Scalar> final_g, final_b;
  std::map<std::string, bool> trainable;

  bool is_trainable(const std::string& name) const {
    const auto it = trainable.find(name);
    return it != trainable.end() && it->second;
  }
};

/// Visits (name, tensor) pairs in the fixed serialization order.
template <typename VitT, typename Fn>
void visit_params(VitT& vit, Fn&& fn) {
  fn("patch.w", vit.patch_w);
  fn("patch.b", vit.patch_b);
  fn("cls", vit.cls);
  fn("reg", vit.registers);
  fn("pos", vit.pos);
  for (std::size_t i = 0; i < vit.blocks.size(); ++i) {
    auto& blk = vit.blocks[i];
    const std::string p = "blk" + std::to_string(i) + ".";
    fn(p + "ln1.g", blk.ln1_g);
    fn(p + "ln1.b", blk.ln1_b);
    fn(p + "attn.wq", blk.wq);
    fn(p + "attn.bq", blk.bq);
    fn(p + "attn.wk", blk.wk);
    fn(p + "attn.bk", blk.bk);
    fn(p + "attn.wv", blk.wv);
    fn(p + "attn.bv", blk.bv);
    if (vit.lora) {
      if (vit.lora->on_query) {
        fn(p + "lora.aq", blk.lora_aq);
        fn(p + "lora.bq", blk.lora_bq);
      }
      if (vit.lora->on_value) {
        fn(p + "lora.av", blk.lora_av);
        fn(p + "lora.bv", blk.lora_bv);
      }
    }
    fn(p + "attn.wo", blk.wo);
    fn(p + "attn.bo", blk.bo);
    fn(p + "ln2.g", blk.ln2_g);
    fn(p + "ln2.b", blk.ln2_b);
    fn(p + "mlp.fc1.w", blk.fc1_w);
    fn(p + "mlp.fc1.b", blk.fc1_b);
    fn(p + "mlp.fc2.w", blk.fc2_w);
    fn(p + "mlp.fc2.b", blk.fc2_b);
  }
  fn("final.g", vit.final_g);
  fn("final.b", vit.final_b);
}

/// Pairwise visitation of two structurally identical models.
template <typename VitA, typename VitB, typename Fn>
void visit_params2(VitA& a, VitB& b, Fn&& fn) {
  std::vector<std::pair<std::string, decltype(&a.cls)>> lhs;
  visit_params(a, [&](const std::string& name, auto& t) { lhs.emplace_back(name, &t); });
  std::size_t i = 0;
  visit_params(b, [&](const std::string& name, auto& t) {
    if (i >= lhs.size() || lhs[i].first != name) {
      throw Error::state("model mismatch: tensor " + name);
    }
    fn(name, *lhs[i].second, t);
    ++i;
  });
  if (i != lhs.size()) throw Error::state("model mismatch: tensor count");
}

struct TensorShape {
  std::string name;
  Index rows, cols;
};

/// Shape-only parameter inventory for a configuration (serialization order).
inline std::vector<TensorShape> param_shapes(const BackboneConfig& cfg,
                                             const std::optional<LoraConfig>& lora = {}) {
  cfg.validate();
  const Index D = cfg.embed_dim, Pd = cfg.patch_dim(), T = cfg.tokens(), H = cfg.mlp_hidden();
  std::vector<TensorShape> out;
  out.push_back({"patch.w", D, Pd});
  out.push_back({"patch.b", 1, D});
  out.push_back({"cls", 1, D});
  out.push_back({"reg", cfg.n_registers, D});
  out.push_back({"pos", T, D});
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string p = "blk" + std::to_string(i) + ".";
    out.push_back({p + "ln1.g", 1, D});
    out.push_back({p + "ln1.b", 1, D});
    for (const char* nm : {"attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv"}) {
      const bool bias = nm[5] == 'b';
      out.push_back({p + nm, bias ? 1 : D, D});
    }
    if (lora) {
      const Index r = lora->rank;
      if (lora->on_query) {
        out.push_back({p + "lora.aq", r, D});
        out.push_back({p + "lora.bq", D, r});
      }
      if (lora->on_value) {
        out.push_back({p + "lora.av", r, D});
        out.push_back({p + "lora.bv", D, r});
      }
    }
    out.push_back({p + "attn.wo", D, D});
    out.push_back({p + "attn.bo", 1, D});
    out.push_back({p + "ln2.g", 1, D});
    out.push_back({p + "ln2.b", 1, D});
    out.push_back({p + "mlp.fc1.w", H, D});
    out.push_back({p + "mlp.fc1.b", 1, H});
    out.push_back({p + "mlp.fc2.w", D, H});
    out.push_back({p + "mlp.fc2.b", 1, D});
  }
  out.push_back({"final.g", 1, D});
  out.push_back({"final.b", 1, D});
  return out;
}

inline long long count_params(const BackboneConfig& cfg,
                              const std::optional<LoraConfig>& lora = {}) {
  long long n = 0;
  for (const auto& s : param_shapes(cfg, lora)) n += static_cast<long long>(s.rows) * s.cols;
  return n;
}

/// Adapter parameters added by inject_lora: depth * targets * 2 * r * D.
inline long long lora_param_count(const BackboneConfig& cfg, const LoraConfig& lora) {
  const long long per_target = 2LL * lora.rank * cfg.embed_dim;
  const int targets = (lora.on_query ? 1 : 0) + (lora.on_value ? 1 : 0);
  return static_cast<long long>(cfg.depth) * targets * per_target;
}

template <typename Scalar>
Vit<Scalar> init_vit(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Vit<Scalar> vit;
  vit.cfg = cfg;
  vit.blocks.resize(static_cast<std::size_t>(cfg.depth));
  Rng rng(mix_seed(seed, 0x17a5u));
  const auto shapes = param_shapes(cfg);
  std::map<std::string, std::pair<Index, Index>> dims;
  for (const auto& s : shapes) dims[s.name] = {s.rows, s.cols};
  visit_params(vit, [&](const std::string& name, MatrixX<Scalar>& t) {
    const auto [rows, cols] = dims.at(name);
    const auto leaf = name.substr(name.rfind('.') + 1);
    const bool is_gain = leaf == "g";
    const bool is_bias = !leaf.empty() && leaf[0] == 'b';
    if (is_gain) {
      t = MatrixX<Scalar>::Ones(rows, cols);
    } else if (is_bias) {
      t = MatrixX<Scalar>::Zero(rows, cols);
    } else {
      t.resize(rows, cols);
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) t(r, c) = static_cast<Scalar>(rng.trunc_normal(0.02));
    }
    vit.trainable[name] = true;
  });
  return vit;
}

/// Same-shape zero model, used as a gradient accumulator.
template <typename Scalar>
Vit<Scalar> zeros_like(const Vit<Scalar>& vit) {
  Vit<Scalar> out = vit;
  visit_params(out, [](const std::string&, MatrixX<Scalar>& t) { t.setZero(); });
  return out;
}

/// Adds per-block low-rank adapters on the chosen attention projections:
/// the adapted projection computes W x + B (A x). A gets a small random
/// init, B starts at zero, base tensors are frozen and adapters marked
/// trainable.
template <typename Scalar>
void inject_lora(Vit<Scalar>& vit, const LoraConfig& lora, std::uint64_t seed) {
  if (vit.lora) throw Error::state("inject_lora: adapters already present");
  if (lora.rank < 1) throw Error::config("inject_lora: rank must be >= 1");
  if (!lora.on_query && !lora.on_value) throw Error::config("inject_lora: no targets");
  const Index D = vit.cfg.embed_dim, r = lora.rank;
  Rng rng(mix_seed(seed, 0x10a7u));
  vit.lora = lora;
  for (auto& blk : vit.blocks) {
    auto fill_a = [&](MatrixX<Scalar>& a) {
      a.resize(r, D);
      for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < D; ++j) a(i, j) = static_cast<Scalar>(rng.trunc_normal(0.02));
    };
    if (lora.on_query) {
      fill_a(blk.lora_aq);
      blk.lora_bq = MatrixX<Scalar>::Zero(D, r);
    }
    if (lora.on_value) {
      fill_a(blk.lora_av);
      blk.lora_bv = MatrixX<Scalar>::Zero(D, r);
    }
  }
  for (auto& [name, flag] : vit.trainable) flag = false;
  visit_params(vit, [&](const std::string& name, MatrixX<Scalar>&) {
    if (name.find(".lora.") != std::string::npos) vit.trainable[name] = true;
  });
}

template <typename Scalar>
void set_trainable(Vit<Scalar>& vit, TrainScope scope) {
  if (scope == TrainScope::adapters_only && !vit.lora) {
    throw Error::state("set_trainable: adapters_only requires injected adapters");
  }
  visit_params(vit, [&](const std::string& name, MatrixX<Scalar>&) {
    const bool is_adapter = name.find(".lora.") != std::string::npos;
    switch (scope) {
      case TrainScope::none: vit.trainable[name] = false; break;
      case TrainScope::all: vit.trainable[name] = true; break;
      case TrainScope::adapters_only: vit.trainable[name] = is_adapter; break;
    }
  });
}

/// Exact count of trainable backbone parameters plus an optional head count.
template <typename Scalar>
long long count_trainable(const Vit<Scalar>& vit, long long head_params = 0) {
  long long n = head_params;
  visit_params(vit, [&](const std::string& name, const MatrixX<Scalar>& t) {
    if (vit.is_trainable(name)) n += static_cast<long long>(t.size());
  });
  return n;
}

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

namespace nn {

constexpr double kLnEps = 1e-6;

template <typename Scalar>
MatrixX<Scalar> linear(const MatrixX<Scalar>& x, const MatrixX<Scalar>& w,
                       const MatrixX<Scalar>& b) {
  MatrixX<Scalar> y(x.rows(), w.rows());
  y.noalias() = x * w.transpose();
  y.rowwise() += b.row(0);
  return y;
}

/// dW += dY^T X, db += colsum(dY), returns dX = dY W. Weight/bias grads are
/// skipped when the respective accumulator is null; pass compute_dx = false
/// at the bottom of the graph.
template <typename Scalar>
MatrixX<Scalar> linear_backward(const MatrixX<Scalar>& dy, const MatrixX<Scalar>& x,
                                const MatrixX<Scalar>& w, MatrixX<Scalar>* dw, MatrixX<Scalar>* db,
                                bool compute_dx = true) {
  if (dw) dw->noalias() += dy.transpose() * x;
  if (db) db->row(0) += dy.colwise().sum();
  MatrixX<Scalar> dx;
  if (compute_dx) {
    dx.resize(dy.rows(), w.cols());
    dx.noalias() = dy * w;
  }
  return dx;
}

template <typename Scalar>
MatrixX<Scalar> layernorm(const MatrixX<Scalar>& x, const MatrixX<Scalar>& g,
                          const MatrixX<Scalar>& b, MatrixX<Scalar>* xhat_out,
                          VectorX<Scalar>* rstd_out) {
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(x.cols());
  const VectorX<Scalar> mean = x.rowwise().sum() * inv_n;
  MatrixX<Scalar> xhat = x.colwise() - mean;
  const VectorX<Scalar> rstd =
      (xhat.array().square().rowwise().sum() * inv_n + static_cast<Scalar>(kLnEps))
          .rsqrt()
          .matrix();
  xhat.array().colwise() *= rstd.array();
  MatrixX<Scalar> y = xhat;
  y.array().rowwise() *= g.row(0).array();
  y.rowwise() += b.row(0);
  if (xhat_out) *xhat_out = std::move(xhat);
  if (rstd_out) *rstd_out = std::move(rstd);
  return y;
}

template <typename Scalar>
MatrixX<Scalar> layernorm_backward(const MatrixX<Scalar>& dy, const MatrixX<Scalar>& xhat,
                                   const VectorX<Scalar>& rstd, const MatrixX<Scalar>& g,
                                   MatrixX<Scalar>* dg, MatrixX<Scalar>* db) {
  if (dg) dg->row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  if (db) db->row(0) += dy.colwise().sum();
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(dy.cols());
  MatrixX<Scalar> dyh = dy;
  dyh.array().rowwise() *= g.row(0).array();
  const VectorX<Scalar> m1 = dyh.rowwise().sum() * inv_n;
  const VectorX<Scalar> m2 = (dyh.array() * xhat.array()).rowwise().sum() * inv_n;
  MatrixX<Scalar> dx = dyh;
  dx.colwise() -= m1;
  dx -= (xhat.array().colwise() * m2.array()).matrix();
  dx.array().colwise() *= rstd.array();
  return dx;
}

// tanh-form GELU; the tanh vectorizes where erf does not
constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;

template <typename Scalar>
Scalar gelu_one(Scalar x) {
  const Scalar u = static_cast<Scalar>(kGeluC0) * (x + static_cast<Scalar>(kGeluC1) * x * x * x);
  return x * Scalar(0.5) * (Scalar(1) + std::tanh(u));
}

template <typename Scalar>
Scalar gelu_grad_one(Scalar x) {
  const Scalar u = static_cast<Scalar>(kGeluC0) * (x + static_cast<Scalar>(kGeluC1) * x * x * x);
  const Scalar t = std::tanh(u);
  const Scalar du = static_cast<Scalar>(kGeluC0) * (Scalar(1) + Scalar(3) * static_cast<Scalar>(kGeluC1) * x * x);
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * (Scalar(1) - t * t) * du;
}

template <typename Scalar>
MatrixX<Scalar> gelu(const MatrixX<Scalar>& x) {
  const auto u = (static_cast<Scalar>(kGeluC0) *
                  (x.array() + static_cast<Scalar>(kGeluC1) * x.array().cube()))
                     .eval();
  return (x.array() * Scalar(0.5) * (Scalar(1) + u.tanh())).matrix();
}

template <typename Scalar>
MatrixX<Scalar> gelu_grad(const MatrixX<Scalar>& x) {
  const auto t = (static_cast<Scalar>(kGeluC0) *
                  (x.array() + static_cast<Scalar>(kGeluC1) * x.array().cube()))
                     .tanh()
                     .eval();
  const auto du = static_cast<Scalar>(kGeluC0) *
                  (Scalar(1) + Scalar(3) * static_cast<Scalar>(kGeluC1) * x.array().square());
  return (Scalar(0.5) * (Scalar(1) + t) +
          Scalar(0.5) * x.array() * (Scalar(1) - t.square()) * du)
      .matrix();
}

template <typename Scalar>
MatrixX<Scalar> softmax_rows(const MatrixX<Scalar>& x) {
  const VectorX<Scalar> mx = x.rowwise().maxCoeff();
  MatrixX<Scalar> y = ((x.colwise() - mx).array().exp()).matrix();
  const VectorX<Scalar> inv_sum = y.rowwise().sum().cwiseInverse();
  y.array().colwise() *= inv_sum.array();
  return y;
}

/// dS for P = softmax_rows(S): dS = P * (dP - rowsum(dP * P)).
template <typename Scalar>
MatrixX<Scalar> softmax_backward(const MatrixX<Scalar>& p, const MatrixX<Scalar>& dp) {
  const VectorX<Scalar> dot = (p.array() * dp.array()).rowwise().sum();
  MatrixX<Scalar> ds = dp;
  ds.colwise() -= dot;
  ds.array() *= p.array();
  return ds;
}

}  // namespace nn

/// Bilinear interpolation matrix mapping a g_in x g_in patch-position grid to
/// g_out x g_out (rows: target patches, cols: source patches).
template <typename Scalar>
MatrixX<Scalar> patch_pos_interp(int g_in, int g_out) {
  MatrixX<Scalar> m = MatrixX<Scalar>::Zero(static_cast<Index>(g_out) * g_out,
                                            static_cast<Index>(g_in) * g_in);
  const double scale = static_cast<double>(g_in) / g_out;
  for (int ro = 0; ro < g_out; ++ro) {
    const double fr = (ro + 0.5) * scale - 0.5;
    const int r0 = std::clamp(static_cast<int>(std::floor(fr)), 0, g_in - 1);
    const int r1 = std::min(r0 + 1, g_in - 1);
    const double wr = std::clamp(fr - r0, 0.0, 1.0);
    for (int co = 0; co < g_out; ++co) {
      const double fc = (co + 0.5) * scale - 0.5;
      const int c0 = std::clamp(static_cast<int>(std::floor(fc)), 0, g_in - 1);
      const int c1 = std::min(c0 + 1, g_in - 1);
      const double wc = std::clamp(fc - c0, 0.0, 1.0);
      const Index row = static_cast<Index>(ro) * g_out + co;
      m(row, static_cast<Index>(r0) * g_in + c0) += static_cast<Scalar>((1 - wr) * (1 - wc));
      m(row, static_cast<Index>(r0) * g_in + c1) += static_cast<Scalar>((1 - wr) * wc);
      m(row, static_cast<Index>(r1) * g_in + c0) += static_cast<Scalar>(wr * (1 - wc));
      m(row, static_cast<Index>(r1) * g_in + c1) += static_cast<Scalar>(wr * wc);
    }
  }
  return m;
}

template <typename Scalar>
struct VitCache {
  Index batch = 0, side = 0, tokens = 0, grid = 0;
  MatrixX<Scalar> patches;
  MatrixX<Scalar> pos_interp;  // empty when the native grid is used
  struct BlockCache {
    MatrixX<Scalar> ln1_xhat, ln1_out;
    VectorX<Scalar> ln1_rstd;
    MatrixX<Scalar> q, k, v, zq, zv;
    std::vector<MatrixX<Scalar>> attn;  // batch * heads, each T x T
    MatrixX<Scalar> attn_out;
    MatrixX<Scalar> ln2_xhat, ln2_out;
    VectorX<Scalar> ln2_rstd;
    MatrixX<Scalar> mlp_pre, mlp_act;
  };
  std::vector<BlockCache> blocks;
  MatrixX<Scalar> cls_in, fin_xhat;
  VectorX<Scalar> fin_rstd;
};

namespace detail {

template <typename Scalar>
MatrixX<Scalar> patchify(const std::vector<Image3<Scalar>>& batch, int patch) {
  const Index B = static_cast<Index>(batch.size());
  const Index side = batch[0][0].rows();
  const Index g = side / patch;
  const Index np = g * g;
  const Index pd = 3 * patch * patch;
  MatrixX<Scalar> out(B * np, pd);
  for (Index i = 0; i < B; ++i) {
    for (Index pr = 0; pr < g; ++pr) {
      for (Index pc = 0; pc < g; ++pc) {
        const Index row = i * np + pr * g + pc;
        for (int ch = 0; ch < 3; ++ch) {
          const auto& plane = batch[static_cast<std::size_t>(i)][static_cast<std::size_t>(ch)];
          for (int r = 0; r < patch; ++r) {
            for (int c = 0; c < patch; ++c) {
              out(row, ch * patch * patch + r * patch + c) = plane(pr * patch + r, pc * patch + c);
            }
          }
        }
      }
    }
  }
  return out;
}

/// Position table for the requested grid: cls/register rows unchanged, patch
/// rows bilinearly interpolated when the view resolution differs.
template <typename Scalar>
MatrixX<Scalar> effective_pos(const Vit<Scalar>& vit, int grid_out, MatrixX<Scalar>* interp_out) {
  const int g_in = vit.cfg.grid();
  const Index lead = 1 + vit.cfg.n_registers;
  if (grid_out == g_in) {
    if (interp_out) interp_out->resize(0, 0);
    return vit.pos;
  }
  MatrixX<Scalar> m = patch_pos_interp<Scalar>(g_in, grid_out);
  MatrixX<Scalar> pos(lead + m.rows(), vit.cfg.embed_dim);
  pos.topRows(lead) = vit.pos.topRows(lead);
  pos.bottomRows(m.rows()).noalias() = m * vit.pos.bottomRows(vit.cfg.patches());
  if (interp_out) *interp_out = std::move(m);
  return pos;
}

}  // namespace detail

/// Batched feature extraction: returns one final-layer-normed CLS embedding
/// per image (B x D). All images in `batch` must be square with equal side
/// divisible by patch_size. Passing `cache` records activations for
/// backward_features.
template <typename Scalar>
MatrixX<Scalar> forward_features(const Vit<Scalar>& vit, const std::vector<Image3<Scalar>>& batch,
                                 VitCache<Scalar>* cache = nullptr) {
  if (batch.empty()) throw Error::state("forward_features: empty batch");
  const Index side = batch[0][0].rows();
  for (const auto& img : batch) {
    for (const auto& plane : img) {
      if (plane.rows() != side || plane.cols() != side) {
        throw Error::state("forward_features: images must be square with equal sides");
      }
    }
  }
  if (side % vit.cfg.patch_size != 0) {
    throw Error::state("forward_features: image side " + std::to_string(side) +
                       " not divisible by patch size " + std::to_string(vit.cfg.patch_size));
  }
  const Index B = static_cast<Index>(batch.size());
  const int grid = static_cast<int>(side) / vit.cfg.patch_size;
  const Index np = static_cast<Index>(grid) * grid;
  const Index T = 1 + vit.cfg.n_registers + np;
  const Index D = vit.cfg.embed_dim;
  const Index R = vit.cfg.n_registers;
  const Index heads = vit.cfg.num_heads;
  const Index dh = D / heads;
  const Scalar att_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  MatrixX<Scalar> patches = detail::patchify(batch, vit.cfg.patch_size);
  MatrixX<Scalar> embed = nn::linear(patches, vit.patch_w, vit.patch_b);
  MatrixX<Scalar> pos = detail::effective_pos(vit, grid, cache ? &cache->pos_interp : nullptr);

  MatrixX<Scalar> x(B * T, D);
  for (Index i = 0; i < B; ++i) {
    x.row(i * T) = vit.cls.row(0);
    for (Index j = 0; j < R; ++j) x.row(i * T + 1 + j) = vit.registers.row(j);
    x.middleRows(i * T + 1 + R, np) = embed.middleRows(i * np, np);
    x.middleRows(i * T, T) += pos;
  }

  if (cache) {
    cache->batch = B;
    cache->side = side;
    cache->tokens = T;
    cache->grid = grid;
    cache->patches = std::move(patches);
    cache->blocks.assign(static_cast<std::size_t>(vit.cfg.depth), {});
  }

  for (int bi = 0; bi < vit.cfg.depth; ++bi) {
    const auto& blk = vit.blocks[static_cast<std::size_t>(bi)];
    auto* bc = cache ? &cache->blocks[static_cast<std::size_t>(bi)] : nullptr;

    MatrixX<Scalar> xhat;
    VectorX<Scalar> rstd;
    MatrixX<Scalar> ln1 = nn::layernorm(x, blk.ln1_g, blk.ln1_b, cache ? &xhat : nullptr,
                                        cache ? &rstd : nullptr);
    MatrixX<Scalar> q = nn::linear(ln1, blk.wq, blk.bq);
    MatrixX<Scalar> k = nn::linear(ln1, blk.wk, blk.bk);
    MatrixX<Scalar> v = nn::linear(ln1, blk.wv, blk.bv);
    MatrixX<Scalar> zq, zv;
    if (vit.lora && vit.lora->on_query) {
      zq.noalias() = ln1 * blk.lora_aq.transpose();
      q.noalias() += zq * blk.lora_bq.transpose();
    }
    if (vit.lora && vit.lora->on_value) {
      zv.noalias() = ln1 * blk.lora_av.transpose();
      v.noalias() += zv * blk.lora_bv.transpose();
    }

    MatrixX<Scalar> attn_out(B * T, D);
    std::vector<MatrixX<Scalar>> probs;
    if (cache) probs.resize(static_cast<std::size_t>(B * heads));
    for (Index i = 0; i < B; ++i) {
      for (Index h = 0; h < heads; ++h) {
        const auto qh = q.block(i * T, h * dh, T, dh);
        const auto kh = k.block(i * T, h * dh, T, dh);
        const auto vh = v.block(i * T, h * dh, T, dh);
        MatrixX<Scalar> scores(T, T);
        scores.noalias() = qh * kh.transpose();
        scores *= att_scale;
        MatrixX<Scalar> p = nn::softmax_rows(scores);
        attn_out.block(i * T, h * dh, T, dh).noalias() = p * vh;
        if (cache) probs[static_cast<std::size_t>(i * heads + h)] = std::move(p);
      }
    }
    x.noalias() += nn::linear(attn_out, blk.wo, blk.bo);

    MatrixX<Scalar> xhat2;
    VectorX<Scalar> rstd2;
    MatrixX<Scalar> ln2 = nn::layernorm(x, blk.ln2_g, blk.ln2_b, cache ? &xhat2 : nullptr,
                                        cache ? &rstd2 : nullptr);
    MatrixX<Scalar> pre = nn::linear(ln2, blk.fc1_w, blk.fc1_b);
    MatrixX<Scalar> act = nn::gelu(pre);
    x.noalias() += nn::linear(act, blk.fc2_w, blk.fc2_b);

    if (bc) {
      bc->ln1_xhat = std::move(xhat);
      bc->ln1_rstd = std::move(rstd);
      bc->ln1_out = std::move(ln1);
      bc->q = std::move(q);
      bc->k = std::move(k);
      bc->v = std::move(v);
      bc->zq = std::move(zq);
      bc->zv = std::move(zv);
      bc->attn = std::move(probs);
      bc->attn_out = std::move(attn_out);
      bc->ln2_xhat = std::move(xhat2);
      bc->ln2_rstd = std::move(rstd2);
      bc->ln2_out = std::move(ln2);
      bc->mlp_pre = std::move(pre);
      bc->mlp_act = std::move(act);
    }
  }

  MatrixX<Scalar> cls_in(B, D);
  for (Index i = 0; i < B; ++i) cls_in.row(i) = x.row(i * T);
  MatrixX<Scalar> out = nn::layernorm(cls_in, vit.final_g, vit.final_b,
                                      cache ? &cache->fin_xhat : nullptr,
                                      cache ? &cache->fin_rstd : nullptr);
  if (cache) cache->cls_in = std::move(cls_in);
  return out;
}

/// Reverse pass from d(embeddings) (B x D). Parameter gradients are
/// accumulated into `grads` (a zeros_like clone); gradients of frozen tensors
/// are skipped entirely.
template <typename Scalar>
void backward_features(const Vit<Scalar>& vit, const VitCache<Scalar>& cache,
                       const MatrixX<Scalar>& dout, Vit<Scalar>& grads) {
  const Index B = cache.batch, T = cache.tokens, D = vit.cfg.embed_dim;
  const Index R = vit.cfg.n_registers;
  const Index np = T - 1 - R;
  const Index heads = vit.cfg.num_heads;
  const Index dh = D / heads;
  const Scalar att_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const auto want = [&](const std::string& name) { return vit.is_trainable(name); };

  MatrixX<Scalar> dcls =
      nn::layernorm_backward(dout, cache.fin_xhat, cache.fin_rstd, vit.final_g,
                             want("final.g") ? &grads.final_g : nullptr,
                             want("final.b") ? &grads.final_b : nullptr);

  MatrixX<Scalar> dx = MatrixX<Scalar>::Zero(B * T, D);
  for (Index i = 0; i < B; ++i) dx.row(i * T) = dcls.row(i);

  for (int bi = vit.cfg.depth - 1; bi >= 0; --bi) {
    const auto& blk = vit.blocks[static_cast<std::size_t>(bi)];
    auto& gblk = grads.blocks[static_cast<std::size_t>(bi)];
    const auto& bc = cache.blocks[static_cast<std::size_t>(bi)];
    const std::string p = "blk" + std::to_string(bi) + ".";

    // MLP branch
    {
      MatrixX<Scalar> dact = nn::linear_backward(dx, bc.mlp_act, blk.fc2_w,
                                                 want(p + "mlp.fc2.w") ? &gblk.fc2_w : nullptr,
                                                 want(p + "mlp.fc2.b") ? &gblk.fc2_b : nullptr);
      MatrixX<Scalar> dpre = (dact.array() * nn::gelu_grad(bc.mlp_pre).array()).matrix();
      MatrixX<Scalar> dln2 = nn::linear_backward(dpre, bc.ln2_out, blk.fc1_w,
                                                 want(p + "mlp.fc1.w") ? &gblk.fc1_w : nullptr,
                                                 want(p + "mlp.fc1.b") ? &gblk.fc1_b : nullptr);
      dx.noalias() += nn::layernorm_backward(dln2, bc.ln2_xhat, bc.ln2_rstd, blk.ln2_g,
                                             want(p + "ln2.g") ? &gblk.ln2_g : nullptr,
                                             want(p + "ln2.b") ? &gblk.ln2_b : nullptr);
    }

    // attention branch
    {
      MatrixX<Scalar> dattn_out = nn::linear_backward(dx, bc.attn_out, blk.wo,
                                                      want(p + "attn.wo") ? &gblk.wo : nullptr,
                                                      want(p + "attn.bo") ? &gblk.bo : nullptr);
      MatrixX<Scalar> dq = MatrixX<Scalar>::Zero(B * T, D);
      MatrixX<Scalar> dk = MatrixX<Scalar>::Zero(B * T, D);
      MatrixX<Scalar> dv = MatrixX<Scalar>::Zero(B * T, D);
      for (Index i = 0; i < B; ++i) {
        for (Index h = 0; h < heads; ++h) {
          const auto& probs = bc.attn[static_cast<std::size_t>(i * heads + h)];
          const auto doh = dattn_out.block(i * T, h * dh, T, dh);
          const auto qh = bc.q.block(i * T, h * dh, T, dh);
          const auto kh = bc.k.block(i * T, h * dh, T, dh);
          const auto vh = bc.v.block(i * T, h * dh, T, dh);
          MatrixX<Scalar> dp(T, T);
          dp.noalias() = doh * vh.transpose();
          dv.block(i * T, h * dh, T, dh).noalias() += probs.transpose() * doh;
          MatrixX<Scalar> ds = nn::softmax_backward(probs, dp);
          ds *= att_scale;
          dq.block(i * T, h * dh, T, dh).noalias() += ds * kh;
          dk.block(i * T, h * dh, T, dh).noalias() += ds.transpose() * qh;
        }
      }

      MatrixX<Scalar> dln1 = nn::linear_backward(dq, bc.ln1_out, blk.wq,
                                                 want(p + "attn.wq") ? &gblk.wq : nullptr,
                                                 want(p + "attn.bq") ? &gblk.bq : nullptr);
      dln1.noalias() += nn::linear_backward(dk, bc.ln1_out, blk.wk,
                                            want(p + "attn.wk") ? &gblk.wk : nullptr,
                                            want(p + "attn.bk") ? &gblk.bk : nullptr);
      dln1.noalias() += nn::linear_backward(dv, bc.ln1_out, blk.wv,
                                            want(p + "attn.wv") ? &gblk.wv : nullptr,
                                            want(p + "attn.bv") ? &gblk.bv : nullptr);
      if (vit.lora && vit.lora->on_query) {
        if (want(p + "lora.bq")) gblk.lora_bq.noalias() += dq.transpose() * bc.zq;
        MatrixX<Scalar> dzq(B * T, vit.lora->rank);
        dzq.noalias() = dq * blk.lora_bq;
        if (want(p + "lora.aq")) gblk.lora_aq.noalias() += dzq.transpose() * bc.ln1_out;
        dln1.noalias() += dzq * blk.lora_aq;
      }
      if (vit.lora && vit.lora->on_value) {
        if (want(p + "lora.bv")) gblk.lora_bv.noalias() += dv.transpose() * bc.zv;
        MatrixX<Scalar> dzv(B * T, vit.lora->rank);
        dzv.noalias() = dv * blk.lora_bv;
        if (want(p + "lora.av")) gblk.lora_av.noalias() += dzv.transpose() * bc.ln1_out;
        dln1.noalias() += dzv * blk.lora_av;
      }
      dx.noalias() += nn::layernorm_backward(dln1, bc.ln1_xhat, bc.ln1_rstd, blk.ln1_g,
                                             want(p + "ln1.g") ? &gblk.ln1_g : nullptr,
                                             want(p + "ln1.b") ? &gblk.ln1_b : nullptr);
    }
  }

  // token assembly
  const bool want_pos = want("pos");
  MatrixX<Scalar> dpos_eff;
  if (want_pos) dpos_eff = MatrixX<Scalar>::Zero(T, D);
  MatrixX<Scalar> dembed(B * np, D);
  for (Index i = 0; i < B; ++i) {
    if (want("cls")) grads.cls.row(0) += dx.row(i * T);
    if (want("reg")) {
      for (Index j = 0; j < R; ++j) grads.registers.row(j) += dx.row(i * T + 1 + j);
    }
    if (want_pos) dpos_eff += dx.middleRows(i * T, T);
    dembed.middleRows(i * np, np) = dx.middleRows(i * T + 1 + R, np);
  }
  if (want_pos) {
    grads.pos.topRows(1 + R) += dpos_eff.topRows(1 + R);
    if (cache.pos_interp.size() == 0) {
      grads.pos.bottomRows(np) += dpos_eff.bottomRows(np);
    } else {
      grads.pos.bottomRows(vit.cfg.patches()).noalias() +=
          cache.pos_interp.transpose() * dpos_eff.bottomRows(np);
    }
  }
  nn::linear_backward(dembed, cache.patches, vit.patch_w,
                      want("patch.w") ? &grads.patch_w : nullptr,
                      want("patch.b") ? &grads.patch_b : nullptr, /*compute_dx=*/false);
}

}  // namespace sarfm
