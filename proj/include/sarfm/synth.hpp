// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "sarfm/error.hpp"
#include "sarfm/rng.hpp"
#include "sarfm/types.hpp"

namespace sarfm {

/// Synthetic SAR-like chip generator. A class is a fixed layout of point
/// scatterers (positions + amplitudes keyed by class id); a chip is that
/// layout blurred by a small Gaussian and multiplied by unit-mean exponential
/// speckle, clipped to [0,1].
struct SynthConfig {
  int chip_size = 64;
  int num_classes = 8;
  int scatterers = 12;
  double blur_sigma = 0.9;
  double peak = 0.2;  // template maximum; kept well below 1 so clipping is negligible
  std::uint64_t template_seed = 0x5a17c0ffee1234ULL;
};

namespace detail {

template <typename Scalar>
MatrixX<Scalar> separable_gaussian_blur(const MatrixX<Scalar>& img, double sigma) {
  if (sigma <= 0.0) return img;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  VectorX<Scalar> kernel(2 * radius + 1);
  Scalar sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * (i * i) / (sigma * sigma));
    kernel(i + radius) = static_cast<Scalar>(w);
    sum += static_cast<Scalar>(w);
  }
  kernel /= sum;

  const Index h = img.rows(), w = img.cols();
  MatrixX<Scalar> tmp(h, w), out(h, w);
  // horizontal pass, clamped borders
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < w; ++c) {
      Scalar acc = 0;
      for (int k = -radius; k <= radius; ++k) {
        const Index cc = std::clamp<Index>(c + k, 0, w - 1);
        acc += kernel(k + radius) * img(r, cc);
      }
      tmp(r, c) = acc;
    }
  }
  for (Index c = 0; c < w; ++c) {
    for (Index r = 0; r < h; ++r) {
      Scalar acc = 0;
      for (int k = -radius; k <= radius; ++k) {
        const Index rr = std::clamp<Index>(r + k, 0, h - 1);
        acc += kernel(k + radius) * tmp(rr, c);
      }
      out(r, c) = acc;
    }
  }
  return out;
}

}  // namespace detail

/// Deterministic per-class scatterer template (blurred, max normalized to
/// cfg.peak). Chips of one class differ only by their speckle draw.
template <typename Scalar = float>
MatrixX<Scalar> class_template(int class_id, const SynthConfig& cfg) {
  if (class_id < 0 || class_id >= cfg.num_classes) {
    throw Error::config("range error: class_id " + std::to_string(class_id) +
                        " outside [0, " + std::to_string(cfg.num_classes) + ")");
  }
  Rng rng(mix_seed(cfg.template_seed, static_cast<std::uint64_t>(class_id)));
  const int s = cfg.chip_size;
  MatrixX<Scalar> img = MatrixX<Scalar>::Zero(s, s);
  const double cx = 0.5 * (s - 1), cy = 0.5 * (s - 1);
  const double radius = 0.35 * s;
  for (int i = 0; i < cfg.scatterers; ++i) {
    // uniform in a centered disc
    double x, y;
    do {
      x = rng.uniform(-1.0, 1.0);
      y = rng.uniform(-1.0, 1.0);
    } while (x * x + y * y > 1.0);
    const int r = static_cast<int>(std::lround(cy + y * radius));
    const int c = static_cast<int>(std::lround(cx + x * radius));
    const double amp = rng.uniform(0.3, 1.0);
    img(std::clamp(r, 0, s - 1), std::clamp(c, 0, s - 1)) += static_cast<Scalar>(amp);
  }
  img = detail::separable_gaussian_blur(img, cfg.blur_sigma);
  const Scalar peak = img.maxCoeff();
  if (peak > Scalar(0)) img *= static_cast<Scalar>(cfg.peak) / peak;
  return img;
}

/// Chip = template(class) * unit-mean exponential speckle, clipped to [0,1].
/// Bit-deterministic in (class_id, seed, cfg).
template <typename Scalar = float>
MatrixX<Scalar> synth_sar_chip(int class_id, std::uint64_t seed, const SynthConfig& cfg) {
  MatrixX<Scalar> img = class_template<Scalar>(class_id, cfg);
  Rng rng(mix_seed(seed, 0xb10b5c0de5ULL));
  for (Index r = 0; r < img.rows(); ++r) {
    for (Index c = 0; c < img.cols(); ++c) {
      const double speckled = static_cast<double>(img(r, c)) * rng.exponential();
      img(r, c) = static_cast<Scalar>(std::clamp(speckled, 0.0, 1.0));
    }
  }
  return img;
}

/// synth:// reference scheme used in manifests.
inline std::string synth_ref(int class_id, std::uint64_t seed) {
  return "synth://" + std::to_string(class_id) + "/" + std::to_string(seed);
}

}  // namespace sarfm
