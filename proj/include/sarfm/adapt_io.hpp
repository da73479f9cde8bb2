// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "sarfm/adapt.hpp"
#include "sarfm/checkpoint.hpp"

namespace sarfm {

/// Adapted models reuse the checkpoint container: backbone tensors (adapters
/// included), a head/nn section, and a recipe echo in the header.
template <typename Scalar>
Checkpoint adapted_to_checkpoint(const AdaptedModel<Scalar>& model) {
  Checkpoint ckpt = vit_to_checkpoint(model.vit);
  ckpt.meta["recipe.kind"] = recipe_kind_name(model.recipe.kind);
  ckpt.meta["recipe.k"] = std::to_string(model.recipe.k);
  ckpt.meta["recipe.rank"] = std::to_string(model.recipe.rank);
  ckpt.meta["recipe.hidden_mult"] = std::to_string(model.recipe.hidden_mult);
  ckpt.meta["recipe.epochs"] = std::to_string(model.recipe.epochs);
  ckpt.meta["recipe.lr"] = std::to_string(model.recipe.lr);
  ckpt.meta["recipe.label_smoothing"] = std::to_string(model.recipe.label_smoothing);
  ckpt.meta["recipe.batch_size"] = std::to_string(model.recipe.batch_size);
  ckpt.meta["recipe.seed"] = std::to_string(model.recipe.seed);
  ckpt.meta["num_classes"] = std::to_string(model.num_classes);
  ckpt.meta["delta_params"] = std::to_string(model.delta_params);
  if (model.head) {
    ckpt.meta["thead.mlp"] = model.head->mlp ? "1" : "0";
    ckpt.tensors.push_back(to_named("thead.w1", model.head->w1));
    ckpt.tensors.push_back(to_named("thead.b1", model.head->b1));
    if (model.head->mlp) {
      ckpt.tensors.push_back(to_named("thead.w2", model.head->w2));
      ckpt.tensors.push_back(to_named("thead.b2", model.head->b2));
    }
  }
  if (model.nn_index) {
    ckpt.tensors.push_back(to_named("nn.features", model.nn_index->features));
    MatrixX<Scalar> labels(static_cast<Index>(model.nn_index->labels.size()), 1);
    for (Index i = 0; i < labels.rows(); ++i) {
      labels(i, 0) = static_cast<Scalar>(model.nn_index->labels[static_cast<std::size_t>(i)]);
    }
    ckpt.tensors.push_back(to_named("nn.labels", labels));
  }
  return ckpt;
}

template <typename Scalar>
AdaptedModel<Scalar> adapted_from_checkpoint(const Checkpoint& ckpt) {
  AdaptedModel<Scalar> model;
  model.vit = vit_from_checkpoint<Scalar>(ckpt);
  model.recipe.kind = parse_recipe_kind(ckpt.meta.at("recipe.kind"));
  model.recipe.k = std::stoi(ckpt.meta.at("recipe.k"));
  model.recipe.rank = std::stoi(ckpt.meta.at("recipe.rank"));
  model.recipe.hidden_mult = std::stod(ckpt.meta.at("recipe.hidden_mult"));
  model.recipe.epochs = std::stoi(ckpt.meta.at("recipe.epochs"));
  model.recipe.lr = std::stod(ckpt.meta.at("recipe.lr"));
  model.recipe.label_smoothing = std::stod(ckpt.meta.at("recipe.label_smoothing"));
  model.recipe.batch_size = std::stoi(ckpt.meta.at("recipe.batch_size"));
  model.recipe.seed = std::stoull(ckpt.meta.at("recipe.seed"));
  model.num_classes = std::stoi(ckpt.meta.at("num_classes"));
  model.delta_params = std::stoll(ckpt.meta.at("delta_params"));
  if (ckpt.meta.count("thead.mlp")) {
    TaskHead<Scalar> head;
    head.mlp = ckpt.meta.at("thead.mlp") == "1";
    head.w1 = from_named<Scalar>(*ckpt.find("thead.w1"));
    head.b1 = from_named<Scalar>(*ckpt.find("thead.b1"));
    if (head.mlp) {
      head.w2 = from_named<Scalar>(*ckpt.find("thead.w2"));
      head.b2 = from_named<Scalar>(*ckpt.find("thead.b2"));
    }
    model.head = std::move(head);
  }
  if (const NamedTensor* feats = ckpt.find("nn.features")) {
    FeatureSet<Scalar> nn;
    nn.features = from_named<Scalar>(*feats);
    const NamedTensor* labels = ckpt.find("nn.labels");
    if (!labels) throw Error::data("adapted checkpoint: nn.labels missing");
    nn.labels.resize(static_cast<std::size_t>(labels->rows));
    for (Index i = 0; i < labels->rows; ++i) {
      nn.labels[static_cast<std::size_t>(i)] =
          static_cast<int>(labels->data[static_cast<std::size_t>(i)]);
    }
    model.nn_index = std::move(nn);
  }
  return model;
}

}  // namespace sarfm
