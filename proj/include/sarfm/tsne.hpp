// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>

#include "sarfm/error.hpp"
#include "sarfm/rng.hpp"
#include "sarfm/types.hpp"

namespace sarfm {

struct TsneConfig {
  double perplexity = 30.0;
  int iterations = 1000;
  double learning_rate = 200.0;
  double early_exaggeration = 12.0;
  int exaggeration_iters = 250;
  double momentum_start = 0.5;
  double momentum_end = 0.8;
  int momentum_switch = 250;
  std::uint64_t seed = 0;
};

struct TsneResult {
  MatrixX<double> coords;  // N x 2
  double kl_initial = 0.0;
  double kl_final = 0.0;
};

namespace detail {

/// Perplexity-calibrated conditional probabilities p(j|i) via bisection on
/// the per-point precision beta.
inline MatrixX<double> conditional_probs(const MatrixX<double>& d2, double perplexity) {
  const Index n = d2.rows();
  const double target_entropy = std::log(perplexity);
  MatrixX<double> p = MatrixX<double>::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    double beta = 1.0, beta_lo = 0.0, beta_hi = std::numeric_limits<double>::infinity();
    VectorX<double> row(n);
    for (int it = 0; it < 64; ++it) {
      double sum = 0.0;
      for (Index j = 0; j < n; ++j) {
        row(j) = j == i ? 0.0 : std::exp(-beta * d2(i, j));
        sum += row(j);
      }
      double entropy = 0.0;
      if (sum > 0.0) {
        for (Index j = 0; j < n; ++j) {
          if (j == i || row(j) <= 0.0) continue;
          const double pj = row(j) / sum;
          entropy -= pj * std::log(pj);
        }
      }
      const double diff = entropy - target_entropy;
      if (std::abs(diff) < 1e-7) break;
      if (diff > 0.0) {
        beta_lo = beta;
        beta = std::isinf(beta_hi) ? beta * 2.0 : 0.5 * (beta + beta_hi);
      } else {
        beta_hi = beta;
        beta = beta_lo > 0.0 ? 0.5 * (beta + beta_lo) : beta / 2.0;
      }
      if (sum <= 0.0 && beta_lo == 0.0) break;  // degenerate: identical points
    }
    double sum = row.sum();
    if (sum <= 0.0) {
      // identical points: spread mass uniformly
      for (Index j = 0; j < n; ++j) row(j) = j == i ? 0.0 : 1.0;
      sum = row.sum();
    }
    p.row(i) = (row / sum).transpose();
  }
  return p;
}

}  // namespace detail

/// Exact t-SNE: symmetric SNE affinities with a Student-t low-dimensional
/// kernel, gradient descent with momentum, gains and early exaggeration.
/// Deterministic under a fixed seed; kl_final <= kl_initial on any sane run.
template <typename Scalar>
TsneResult tsne(const MatrixX<Scalar>& features, const TsneConfig& cfg) {
  const Index n = features.rows();
  if (static_cast<double>(n) < 3.0 * cfg.perplexity) {
    throw Error::config("tsne: need at least 3*perplexity points, have " + std::to_string(n));
  }
  if (!features.allFinite()) throw Error::data("tsne: non-finite features");

  MatrixX<double> x = features.template cast<double>();
  // pairwise squared distances
  VectorX<double> sq = x.rowwise().squaredNorm();
  MatrixX<double> d2 = (-2.0 * x * x.transpose());
  d2.colwise() += sq;
  d2.rowwise() += sq.transpose();
  d2 = d2.cwiseMax(0.0);

  MatrixX<double> pc = detail::conditional_probs(d2, cfg.perplexity);
  MatrixX<double> p = (pc + pc.transpose()) / (2.0 * static_cast<double>(n));
  p = p.cwiseMax(1e-12);

  Rng rng(mix_seed(cfg.seed, 0x75e3ULL));
  MatrixX<double> y(n, 2);
  for (Index i = 0; i < n; ++i) {
    y(i, 0) = 1e-4 * rng.normal();
    y(i, 1) = 1e-4 * rng.normal();
  }

  MatrixX<double> dy = MatrixX<double>::Zero(n, 2);
  MatrixX<double> gains = MatrixX<double>::Ones(n, 2);

  const auto q_terms = [&](const MatrixX<double>& yy, MatrixX<double>& qnum, double& z) {
    qnum.resize(n, n);
    z = 0.0;
    for (Index i = 0; i < n; ++i) {
      qnum(i, i) = 0.0;
      for (Index j = i + 1; j < n; ++j) {
        const double dx = yy(i, 0) - yy(j, 0);
        const double dyv = yy(i, 1) - yy(j, 1);
        const double t = 1.0 / (1.0 + dx * dx + dyv * dyv);
        qnum(i, j) = t;
        qnum(j, i) = t;
        z += 2.0 * t;
      }
    }
  };
  const auto kl = [&](const MatrixX<double>& qnum, double z) {
    double out = 0.0;
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < n; ++j) {
        if (i == j) continue;
        const double q = std::max(qnum(i, j) / z, 1e-12);
        out += p(i, j) * std::log(p(i, j) / q);
      }
    }
    return out;
  };

  TsneResult result;
  MatrixX<double> qnum;
  double z = 0.0;
  q_terms(y, qnum, z);
  result.kl_initial = kl(qnum, z);

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    const double exag = iter < cfg.exaggeration_iters ? cfg.early_exaggeration : 1.0;
    const double momentum = iter < cfg.momentum_switch ? cfg.momentum_start : cfg.momentum_end;
    if (iter > 0) q_terms(y, qnum, z);

    MatrixX<double> grad = MatrixX<double>::Zero(n, 2);
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < n; ++j) {
        if (i == j) continue;
        const double q = qnum(i, j) / z;
        const double mult = 4.0 * (exag * p(i, j) - q) * qnum(i, j);
        grad(i, 0) += mult * (y(i, 0) - y(j, 0));
        grad(i, 1) += mult * (y(i, 1) - y(j, 1));
      }
    }
    for (Index i = 0; i < n; ++i) {
      for (int d = 0; d < 2; ++d) {
        const bool same_sign = (grad(i, d) > 0.0) == (dy(i, d) > 0.0);
        gains(i, d) = same_sign ? std::max(gains(i, d) * 0.8, 0.01) : gains(i, d) + 0.2;
        dy(i, d) = momentum * dy(i, d) - cfg.learning_rate * gains(i, d) * grad(i, d);
        y(i, d) += dy(i, d);
      }
    }
    y.rowwise() -= y.colwise().mean();
  }

  q_terms(y, qnum, z);
  result.kl_final = kl(qnum, z);
  result.coords = std::move(y);
  return result;
}

/// Mean fraction of each point's k nearest neighbors (Euclidean, excluding
/// itself) that share its label. Used on 2-D embeddings as a separation
/// score.
double knn_label_purity(const MatrixX<double>& points, const std::vector<int>& labels, int k);

}  // namespace sarfm
