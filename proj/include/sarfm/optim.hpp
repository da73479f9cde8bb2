// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>

#include "sarfm/types.hpp"

namespace sarfm {

/// Adam with decoupled weight decay. Weight decay is applied to weight
/// matrices only (both dims > 1, excluding the position/register tables);
/// passing weight_decay = 0 gives plain Adam.
template <typename Scalar>
class AdamW {
 public:
  explicit AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void begin_step() { ++t_; }

  long long step_count() const { return t_; }

  void update(const std::string& name, MatrixX<Scalar>& param, const MatrixX<Scalar>& grad,
              double lr, double weight_decay) {
    auto& [m, v] = moments_[name];
    if (m.size() == 0) {
      m = MatrixX<Scalar>::Zero(param.rows(), param.cols());
      v = MatrixX<Scalar>::Zero(param.rows(), param.cols());
    }
    const Scalar b1 = static_cast<Scalar>(beta1_), b2 = static_cast<Scalar>(beta2_);
    m = b1 * m + (Scalar(1) - b1) * grad;
    v = (b2 * v.array() + (Scalar(1) - b2) * grad.array().square()).matrix();
    // param -= lr * (m / bc1) / (sqrt(v / bc2) + eps)
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const Scalar step_size = static_cast<Scalar>(lr / bc1);
    const Scalar denom_scale = static_cast<Scalar>(1.0 / std::sqrt(bc2));
    param.array() -=
        step_size * (m.array() / (v.array().sqrt() * denom_scale + static_cast<Scalar>(eps_)));
    if (weight_decay > 0.0 && decays(name, param)) {
      param *= (Scalar(1) - static_cast<Scalar>(lr * weight_decay));
    }
  }

 private:
  static bool decays(const std::string& name, const MatrixX<Scalar>& param) {
    return param.rows() > 1 && param.cols() > 1 && name != "pos" && name != "reg";
  }

  double beta1_, beta2_, eps_;
  long long t_ = 0;
  std::map<std::string, std::pair<MatrixX<Scalar>, MatrixX<Scalar>>> moments_;
};

}  // namespace sarfm
