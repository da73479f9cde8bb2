// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "sarfm/backbone.hpp"
#include "sarfm/error.hpp"
#include "sarfm/types.hpp"

namespace sarfm {

/// Checkpoint container: a key-value text header (config, provenance, run
/// echoes) followed by named tensor blobs, shape-prefixed, little-endian
/// 32-bit floats. Writes are atomic (temp file + rename).
struct NamedTensor {
  std::string name;
  Index rows = 0, cols = 0;
  std::vector<float> data;  // row-major
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
  std::string meta_or(const std::string& key, const std::string& fallback) const {
    const auto it = meta.find(key);
    return it == meta.end() ? fallback : it->second;
  }
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Pretraining source corpora recorded in a checkpoint ("provenance" meta
/// key, comma-joined). Drives downstream contamination flags.
std::vector<std::string> checkpoint_provenance(const Checkpoint& ckpt);
void set_checkpoint_provenance(Checkpoint& ckpt, const std::vector<std::string>& corpora);

// -- backbone binding --------------------------------------------------------

template <typename Scalar>
NamedTensor to_named(const std::string& name, const MatrixX<Scalar>& m) {
  NamedTensor t;
  t.name = name;
  t.rows = m.rows();
  t.cols = m.cols();
  t.data.resize(static_cast<std::size_t>(m.size()));
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c)
      t.data[static_cast<std::size_t>(r * m.cols() + c)] = static_cast<float>(m(r, c));
  return t;
}

template <typename Scalar>
MatrixX<Scalar> from_named(const NamedTensor& t) {
  MatrixX<Scalar> m(t.rows, t.cols);
  for (Index r = 0; r < t.rows; ++r)
    for (Index c = 0; c < t.cols; ++c)
      m(r, c) = static_cast<Scalar>(t.data[static_cast<std::size_t>(r * t.cols + c)]);
  return m;
}

template <typename Scalar>
Checkpoint vit_to_checkpoint(const Vit<Scalar>& vit) {
  Checkpoint ckpt;
  auto& meta = ckpt.meta;
  meta["cfg.img_size"] = std::to_string(vit.cfg.img_size);
  meta["cfg.patch_size"] = std::to_string(vit.cfg.patch_size);
  meta["cfg.embed_dim"] = std::to_string(vit.cfg.embed_dim);
  meta["cfg.depth"] = std::to_string(vit.cfg.depth);
  meta["cfg.num_heads"] = std::to_string(vit.cfg.num_heads);
  meta["cfg.n_registers"] = std::to_string(vit.cfg.n_registers);
  meta["cfg.mlp_ratio"] = std::to_string(vit.cfg.mlp_ratio);
  if (vit.lora) {
    meta["lora.rank"] = std::to_string(vit.lora->rank);
    meta["lora.on_query"] = vit.lora->on_query ? "1" : "0";
    meta["lora.on_value"] = vit.lora->on_value ? "1" : "0";
  }
  visit_params(vit, [&](const std::string& name, const MatrixX<Scalar>& t) {
    ckpt.tensors.push_back(to_named(name, t));
    if (!vit.is_trainable(name)) meta["frozen." + name] = "1";
  });
  return ckpt;
}

template <typename Scalar>
Vit<Scalar> vit_from_checkpoint(const Checkpoint& ckpt) {
  BackboneConfig cfg;
  try {
    cfg.img_size = std::stoi(ckpt.meta.at("cfg.img_size"));
    cfg.patch_size = std::stoi(ckpt.meta.at("cfg.patch_size"));
    cfg.embed_dim = std::stoi(ckpt.meta.at("cfg.embed_dim"));
    cfg.depth = std::stoi(ckpt.meta.at("cfg.depth"));
    cfg.num_heads = std::stoi(ckpt.meta.at("cfg.num_heads"));
    cfg.n_registers = std::stoi(ckpt.meta.at("cfg.n_registers"));
    cfg.mlp_ratio = std::stod(ckpt.meta.at("cfg.mlp_ratio"));
  } catch (const std::out_of_range&) {
    throw Error::data("checkpoint: missing backbone config keys");
  }
  Vit<Scalar> vit = init_vit<Scalar>(cfg, 0);
  if (ckpt.meta.count("lora.rank")) {
    LoraConfig lora;
    lora.rank = std::stoi(ckpt.meta.at("lora.rank"));
    lora.on_query = ckpt.meta_or("lora.on_query", "1") == "1";
    lora.on_value = ckpt.meta_or("lora.on_value", "1") == "1";
    inject_lora(vit, lora, 0);
  }
  visit_params(vit, [&](const std::string& name, MatrixX<Scalar>& t) {
    const NamedTensor* src = ckpt.find(name);
    if (!src) throw Error::data("checkpoint: missing tensor " + name);
    if (src->rows != t.rows() || src->cols != t.cols()) {
      throw Error::data("checkpoint: tensor " + name + " has wrong shape");
    }
    t = from_named<Scalar>(*src);
    vit.trainable[name] = !ckpt.meta.count("frozen." + name);
  });
  return vit;
}

}  // namespace sarfm
