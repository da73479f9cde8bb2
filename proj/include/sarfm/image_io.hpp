// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>

#include "sarfm/synth.hpp"
#include "sarfm/types.hpp"

namespace sarfm {

/// Reads a PGM (P5 binary or P2 ascii) image as intensities in [0,1],
/// dividing by the container's declared max value.
Matrixf load_pgm(const std::filesystem::path& path);

/// Writes a [0,1] chip as 8-bit binary PGM.
void save_pgm(const Matrixf& chip, const std::filesystem::path& path);

/// Resolves a manifest image_ref: either a `synth://class/seed` generator
/// reference or a raster file path (PGM). `base_dir` anchors relative paths.
Matrixf load_chip(const std::string& image_ref, const SynthConfig& synth_cfg,
                  const std::filesystem::path& base_dir = {});

}  // namespace sarfm
