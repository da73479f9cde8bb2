// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "sarfm/error.hpp"
#include "sarfm/rng.hpp"
#include "sarfm/synth.hpp"  // separable_gaussian_blur
#include "sarfm/types.hpp"

namespace sarfm {

/// SSL view-generation settings. Crop scale ranges follow the pretraining
/// recipe (globals [0.6, 1.0], locals [0.2, 0.6]); the photometric stages are
/// standard SAR dynamic-range conditioning with mild defaults, all exposed
/// here so runs can log the exact chain.
struct AugConfig {
  double global_scale_lo = 0.6, global_scale_hi = 1.0;
  double local_scale_lo = 0.2, local_scale_hi = 0.6;
  int global_size = 224;
  int local_size = 98;  // must be divisible by the backbone patch size
  int n_local = 8;
  bool rotate90_enabled = true;
  double flip_prob = 0.5;
  bool clip_enabled = true;
  double clip_lo_pct = 1.0, clip_hi_pct = 99.0;
  double pow_lo = 0.7, pow_hi = 1.4;
  double noise_prob = 0.5;
  double noise_sigma = 0.02;
  double blur_prob = 0.5;
  double blur_sigma_lo = 0.1, blur_sigma_hi = 1.0;
  // ImageNet per-channel normalization constants
  double norm_mean[3] = {0.485, 0.456, 0.406};
  double norm_std[3] = {0.229, 0.224, 0.225};

  /// Desk-scale preset for the 64 px / patch-8 backbone.
  static AugConfig desk() {
    AugConfig cfg;
    cfg.global_size = 64;
    cfg.local_size = 32;
    cfg.n_local = 4;
    return cfg;
  }
};

template <typename Scalar>
struct ViewSet {
  std::vector<Image3<Scalar>> globals;  // exactly 2
  std::vector<Image3<Scalar>> locals;   // n_local
};

/// Bilinear resample of a rectangular window [top, top+h) x [left, left+w)
/// to out_h x out_w (half-pixel convention, clamped).
template <typename Scalar>
MatrixX<Scalar> resize_bilinear_window(const MatrixX<Scalar>& img, double top, double left,
                                       double h, double w, Index out_h, Index out_w) {
  MatrixX<Scalar> out(out_h, out_w);
  const double sr = h / static_cast<double>(out_h);
  const double sc = w / static_cast<double>(out_w);
  for (Index r = 0; r < out_h; ++r) {
    const double fr = top + (static_cast<double>(r) + 0.5) * sr - 0.5;
    const Index r0 = std::clamp<Index>(static_cast<Index>(std::floor(fr)), 0, img.rows() - 1);
    const Index r1 = std::min<Index>(r0 + 1, img.rows() - 1);
    const double wr = std::clamp(fr - static_cast<double>(r0), 0.0, 1.0);
    for (Index c = 0; c < out_w; ++c) {
      const double fc = left + (static_cast<double>(c) + 0.5) * sc - 0.5;
      const Index c0 = std::clamp<Index>(static_cast<Index>(std::floor(fc)), 0, img.cols() - 1);
      const Index c1 = std::min<Index>(c0 + 1, img.cols() - 1);
      const double wc = std::clamp(fc - static_cast<double>(c0), 0.0, 1.0);
      const double v = (1 - wr) * ((1 - wc) * img(r0, c0) + wc * img(r0, c1)) +
                       wr * ((1 - wc) * img(r1, c0) + wc * img(r1, c1));
      out(r, c) = static_cast<Scalar>(v);
    }
  }
  return out;
}

template <typename Scalar>
MatrixX<Scalar> resize_bilinear(const MatrixX<Scalar>& img, Index out_h, Index out_w) {
  return resize_bilinear_window(img, 0.0, 0.0, static_cast<double>(img.rows()),
                                static_cast<double>(img.cols()), out_h, out_w);
}

struct CropRect {
  double top = 0, left = 0, height = 0, width = 0;
};

/// Picks a crop window with area fraction in [scale_lo, scale_hi] and aspect
/// ratio in [3/4, 4/3]. After 10 rejected draws, falls back to a centered
/// square at the mid scale; the area-fraction guarantee holds either way.
inline CropRect select_crop_rect(Index rows, Index cols, double scale_lo, double scale_hi,
                                 Rng& rng) {
  if (!(scale_lo > 0.0 && scale_lo <= scale_hi && scale_hi <= 1.0)) {
    throw Error::config("random_resized_crop: scale range must lie in (0,1]");
  }
  const double H = static_cast<double>(rows);
  const double W = static_cast<double>(cols);
  const double area = H * W;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double frac = rng.uniform(scale_lo, scale_hi);
    const double aspect = std::exp(rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
    const double cw = std::round(std::sqrt(frac * area * aspect));
    const double ch = std::round(std::sqrt(frac * area / aspect));
    if (cw < 1 || ch < 1 || cw > W || ch > H) continue;
    const double got = (cw * ch) / area;
    if (got < scale_lo || got > scale_hi) continue;  // rounding pushed it out
    const double top = std::floor(rng.uniform() * (H - ch + 1));
    const double left = std::floor(rng.uniform() * (W - cw + 1));
    return {top, left, ch, cw};
  }
  const double mid = 0.5 * (scale_lo + scale_hi);
  double side = std::round(std::sqrt(mid * area));
  side = std::clamp(side, 1.0, std::min(H, W));
  return {std::floor(0.5 * (H - side)), std::floor(0.5 * (W - side)), side, side};
}

/// Random crop per select_crop_rect, bilinearly resized to out_size x out_size.
template <typename Scalar>
MatrixX<Scalar> random_resized_crop(const MatrixX<Scalar>& chip, double scale_lo, double scale_hi,
                                    Index out_size, Rng& rng) {
  if (chip.rows() < 2 || chip.cols() < 2) {
    throw Error::data("degenerate-input error: chip smaller than 2x2");
  }
  if (out_size < 1) throw Error::config("random_resized_crop: out_size must be >= 1");
  const CropRect rect = select_crop_rect(chip.rows(), chip.cols(), scale_lo, scale_hi, rng);
  return resize_bilinear_window(chip, rect.top, rect.left, rect.height, rect.width, out_size,
                                out_size);
}

/// Exact pixel permutation: k * 90-degree counter-clockwise rotation.
template <typename Scalar>
MatrixX<Scalar> rotate90_k(const MatrixX<Scalar>& chip, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return chip;
  if (k != 2 && chip.rows() != chip.cols()) {
    throw Error::config("rotate90: odd quarter-turns require square input");
  }
  MatrixX<Scalar> out;
  switch (k) {
    case 1: {  // out(r,c) = in(c, W-1-r)
      out.resize(chip.cols(), chip.rows());
      for (Index r = 0; r < out.rows(); ++r)
        for (Index c = 0; c < out.cols(); ++c) out(r, c) = chip(c, chip.cols() - 1 - r);
      break;
    }
    case 2: {
      out.resize(chip.rows(), chip.cols());
      for (Index r = 0; r < out.rows(); ++r)
        for (Index c = 0; c < out.cols(); ++c)
          out(r, c) = chip(chip.rows() - 1 - r, chip.cols() - 1 - c);
      break;
    }
    default: {  // k == 3: out(r,c) = in(H-1-c, r)
      out.resize(chip.cols(), chip.rows());
      for (Index r = 0; r < out.rows(); ++r)
        for (Index c = 0; c < out.cols(); ++c) out(r, c) = chip(chip.rows() - 1 - c, r);
      break;
    }
  }
  return out;
}

template <typename Scalar>
MatrixX<Scalar> rotate90(const MatrixX<Scalar>& chip, Rng& rng) {
  return rotate90_k(chip, rng.below(4));
}

template <typename Scalar>
MatrixX<Scalar> hflip(const MatrixX<Scalar>& chip) {
  return chip.rowwise().reverse();
}

template <typename Scalar>
MatrixX<Scalar> vflip(const MatrixX<Scalar>& chip) {
  return chip.colwise().reverse();
}

/// Nearest-rank percentile of the chip's value multiset, p in [0,100].
template <typename Scalar>
Scalar percentile_nearest_rank(const MatrixX<Scalar>& chip, double p) {
  std::vector<Scalar> vals(chip.data(), chip.data() + chip.size());
  std::sort(vals.begin(), vals.end());
  if (p <= 0.0) return vals.front();
  const std::size_t rank =
      std::min(vals.size(), static_cast<std::size_t>(std::ceil(p / 100.0 * vals.size())));
  return vals[rank - 1];
}

/// Clips to the [low_pct, high_pct] empirical percentiles and rescales that
/// range to [0,1]; coincident percentiles yield an all-zero chip.
template <typename Scalar>
MatrixX<Scalar> clip_and_scale(const MatrixX<Scalar>& chip, double low_pct, double high_pct) {
  if (!(low_pct >= 0.0 && low_pct < high_pct && high_pct <= 100.0)) {
    throw Error::config("clip_and_scale: need 0 <= low < high <= 100");
  }
  const Scalar lo = percentile_nearest_rank(chip, low_pct);
  const Scalar hi = percentile_nearest_rank(chip, high_pct);
  if (!(hi > lo)) return MatrixX<Scalar>::Zero(chip.rows(), chip.cols());
  return ((chip.array().max(lo).min(hi) - lo) / (hi - lo)).matrix();
}

/// Elementwise gamma map x -> x^g on [0,1] data.
template <typename Scalar>
MatrixX<Scalar> pow_scale(const MatrixX<Scalar>& chip, double gamma) {
  if (!(gamma > 0.0)) throw Error::config("pow_scale: gamma must be > 0");
  return chip.array().pow(static_cast<Scalar>(gamma)).matrix();
}

template <typename Scalar>
MatrixX<Scalar> gaussian_noise(const MatrixX<Scalar>& chip, double sigma, Rng& rng) {
  MatrixX<Scalar> out = chip;
  for (Index r = 0; r < out.rows(); ++r)
    for (Index c = 0; c < out.cols(); ++c)
      out(r, c) += static_cast<Scalar>(sigma * rng.normal());
  return out;
}

template <typename Scalar>
MatrixX<Scalar> gaussian_blur(const MatrixX<Scalar>& chip, double sigma) {
  return detail::separable_gaussian_blur(chip, sigma);
}

/// Replicates a single plane into 3 identical channels.
template <typename Scalar>
Image3<Scalar> to_three_channel(const MatrixX<Scalar>& chip) {
  return {chip, chip, chip};
}

template <typename Scalar>
Image3<Scalar> normalize(const Image3<Scalar>& img, const AugConfig& cfg) {
  Image3<Scalar> out;
  for (int ch = 0; ch < 3; ++ch) {
    out[ch] = ((img[ch].array() - static_cast<Scalar>(cfg.norm_mean[ch])) /
               static_cast<Scalar>(cfg.norm_std[ch]))
                  .matrix();
  }
  return out;
}

template <typename Scalar>
Image3<Scalar> denormalize(const Image3<Scalar>& img, const AugConfig& cfg) {
  Image3<Scalar> out;
  for (int ch = 0; ch < 3; ++ch) {
    out[ch] = (img[ch].array() * static_cast<Scalar>(cfg.norm_std[ch]) +
               static_cast<Scalar>(cfg.norm_mean[ch]))
                  .matrix();
  }
  return out;
}

namespace detail {

template <typename Scalar>
Image3<Scalar> make_one_view(const MatrixX<Scalar>& chip, const AugConfig& cfg, double scale_lo,
                             double scale_hi, Index size, Rng& rng) {
  MatrixX<Scalar> v = random_resized_crop(chip, scale_lo, scale_hi, size, rng);
  if (cfg.rotate90_enabled) v = rotate90(v, rng);
  if (cfg.flip_prob > 0.0) {
    if (rng.bernoulli(cfg.flip_prob)) v = hflip(v);
    if (rng.bernoulli(cfg.flip_prob)) v = vflip(v);
  }
  if (cfg.clip_enabled) v = clip_and_scale(v, cfg.clip_lo_pct, cfg.clip_hi_pct);
  const double gamma =
      cfg.pow_lo == cfg.pow_hi ? cfg.pow_lo : rng.uniform(cfg.pow_lo, cfg.pow_hi);
  if (gamma != 1.0) {
    v = pow_scale(((v.array().max(Scalar(0))).min(Scalar(1))).matrix().eval(), gamma);
  }
  if (cfg.noise_prob > 0.0 && rng.bernoulli(cfg.noise_prob)) {
    v = gaussian_noise(v, cfg.noise_sigma, rng);
  }
  if (cfg.blur_prob > 0.0 && rng.bernoulli(cfg.blur_prob)) {
    v = gaussian_blur(v, rng.uniform(cfg.blur_sigma_lo, cfg.blur_sigma_hi));
  }
  return normalize(to_three_channel(v), cfg);
}

}  // namespace detail

/// Per-view chain, in order: crop, rotate90, flips, clip+scale, gamma, noise,
/// blur, channel replication, normalization. 2 global views then n_local
/// locals; bit-deterministic under a fixed rng.
template <typename Scalar>
ViewSet<Scalar> make_views(const MatrixX<Scalar>& chip, const AugConfig& cfg, Rng& rng) {
  ViewSet<Scalar> views;
  views.globals.reserve(2);
  for (int i = 0; i < 2; ++i) {
    views.globals.push_back(detail::make_one_view(chip, cfg, cfg.global_scale_lo,
                                                  cfg.global_scale_hi, cfg.global_size, rng));
  }
  views.locals.reserve(static_cast<std::size_t>(cfg.n_local));
  for (int i = 0; i < cfg.n_local; ++i) {
    views.locals.push_back(detail::make_one_view(chip, cfg, cfg.local_scale_lo, cfg.local_scale_hi,
                                                 cfg.local_size, rng));
  }
  return views;
}

/// Deterministic evaluation-time preprocessing: resize to global_size,
/// replicate channels, normalize. No randomness.
template <typename Scalar>
Image3<Scalar> eval_preprocess(const MatrixX<Scalar>& chip, const AugConfig& cfg) {
  return normalize(to_three_channel(resize_bilinear(chip, cfg.global_size, cfg.global_size)), cfg);
}

}  // namespace sarfm
