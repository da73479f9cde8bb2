// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace sarfm {

/// Deterministic standalone SVG emitters for the two report plots. Byte
/// output depends only on the inputs.

struct ScatterPoint {
  double x = 0.0, y = 0.0;
  int marker_group = 0;  // marker shape (e.g. class)
  int color_group = 0;   // fill color (e.g. domain tag)
};

void write_scatter_svg(const std::filesystem::path& path, const std::vector<ScatterPoint>& points,
                       const std::vector<std::string>& color_names,
                       const std::vector<std::string>& marker_names, const std::string& title);

struct Curve {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

void write_curves_svg(const std::filesystem::path& path, const std::vector<Curve>& curves,
                      const std::string& x_label, const std::string& y_label,
                      const std::string& title);

}  // namespace sarfm
