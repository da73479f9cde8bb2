// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#include "sarfm/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "sarfm/error.hpp"

namespace sarfm {

namespace {

constexpr int kWidth = 760;
constexpr int kHeight = 560;
constexpr int kMargin = 56;

const char* kPalette[] = {"#e6762a", "#2a62e6", "#2aa05a", "#c02ab0", "#807020",
                          "#208080", "#a04040", "#4040a0", "#606060", "#a0a020"};
constexpr int kPaletteSize = 10;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void pad() {
    if (!(hi > lo)) {
      lo -= 1.0;
      hi += 1.0;
    }
    const double m = 0.05 * (hi - lo);
    lo -= m;
    hi += m;
  }
  double to_px(double v, double px_lo, double px_hi) const {
    return px_lo + (v - lo) / (hi - lo) * (px_hi - px_lo);
  }
};

void marker(std::ofstream& out, int shape, double x, double y, const char* color) {
  const double s = 4.0;
  switch (shape % 4) {
    case 0:
      out << "<circle cx=\"" << fmt(x) << "\" cy=\"" << fmt(y) << "\" r=\"" << fmt(s * 0.8)
          << "\" fill=\"" << color << "\"/>\n";
      break;
    case 1:
      out << "<rect x=\"" << fmt(x - s * 0.7) << "\" y=\"" << fmt(y - s * 0.7) << "\" width=\""
          << fmt(1.4 * s) << "\" height=\"" << fmt(1.4 * s) << "\" fill=\"" << color << "\"/>\n";
      break;
    case 2:
      out << "<polygon points=\"" << fmt(x) << "," << fmt(y - s) << " " << fmt(x - s) << ","
          << fmt(y + s) << " " << fmt(x + s) << "," << fmt(y + s) << "\" fill=\"" << color
          << "\"/>\n";
      break;
    default:
      out << "<polygon points=\"" << fmt(x) << "," << fmt(y - s) << " " << fmt(x + s) << ","
          << fmt(y) << " " << fmt(x) << "," << fmt(y + s) << " " << fmt(x - s) << "," << fmt(y)
          << "\" fill=\"" << color << "\"/>\n";
  }
}

std::ofstream open_svg(const std::filesystem::path& path, const std::string& title) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error::data("cannot write plot: " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
      << kHeight << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\""
      << " font-size=\"16\">" << title << "</text>\n";
  return out;
}

}  // namespace

void write_scatter_svg(const std::filesystem::path& path, const std::vector<ScatterPoint>& points,
                       const std::vector<std::string>& color_names,
                       const std::vector<std::string>& marker_names, const std::string& title) {
  if (points.empty()) throw Error::config("scatter plot: no points");
  Range rx, ry;
  for (const auto& pt : points) {
    rx.add(pt.x);
    ry.add(pt.y);
  }
  rx.pad();
  ry.pad();
  auto out = open_svg(path, title);
  out << "<rect x=\"" << kMargin << "\" y=\"" << kMargin << "\" width=\"" << kWidth - 2 * kMargin
      << "\" height=\"" << kHeight - 2 * kMargin
      << "\" fill=\"none\" stroke=\"#404040\" stroke-width=\"1\"/>\n";
  for (const auto& pt : points) {
    const double px = rx.to_px(pt.x, kMargin, kWidth - kMargin);
    const double py = ry.to_px(pt.y, kHeight - kMargin, kMargin);
    marker(out, pt.marker_group, px, py,
           kPalette[static_cast<std::size_t>(pt.color_group % kPaletteSize)]);
  }
  double ly = kMargin + 18.0;
  for (std::size_t i = 0; i < color_names.size(); ++i) {
    out << "<circle cx=\"" << kMargin + 12 << "\" cy=\"" << fmt(ly - 4) << "\" r=\"5\" fill=\""
        << kPalette[i % kPaletteSize] << "\"/>\n";
    out << "<text x=\"" << kMargin + 22 << "\" y=\"" << fmt(ly)
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << color_names[i] << "</text>\n";
    ly += 18.0;
  }
  // marker legend along the bottom
  double lx = kMargin;
  for (std::size_t i = 0; i < marker_names.size(); ++i) {
    marker(out, static_cast<int>(i), lx + 6, kHeight - kMargin + 22, "#404040");
    out << "<text x=\"" << fmt(lx + 14) << "\" y=\"" << kHeight - kMargin + 26
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << marker_names[i] << "</text>\n";
    lx += 14.0 + 9.0 * static_cast<double>(marker_names[i].size()) + 12.0;
  }
  out << "</svg>\n";
}

void write_curves_svg(const std::filesystem::path& path, const std::vector<Curve>& curves,
                      const std::string& x_label, const std::string& y_label,
                      const std::string& title) {
  if (curves.empty()) throw Error::config("curve plot: no curves");
  Range rx, ry;
  for (const auto& c : curves) {
    for (double v : c.x) rx.add(v);
    for (double v : c.y) ry.add(v);
  }
  rx.pad();
  ry.pad();
  auto out = open_svg(path, title);
  out << "<rect x=\"" << kMargin << "\" y=\"" << kMargin << "\" width=\"" << kWidth - 2 * kMargin
      << "\" height=\"" << kHeight - 2 * kMargin
      << "\" fill=\"none\" stroke=\"#404040\" stroke-width=\"1\"/>\n";
  out << "<text x=\"" << kWidth / 2 << "\" y=\"" << kHeight - 12
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << x_label
      << "</text>\n";
  out << "<text x=\"16\" y=\"" << kHeight / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 "
      << kHeight / 2 << ")\">" << y_label << "</text>\n";
  for (std::size_t ci = 0; ci < curves.size(); ++ci) {
    const auto& c = curves[ci];
    const char* color = kPalette[ci % kPaletteSize];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < c.x.size(); ++i) {
      out << fmt(rx.to_px(c.x[i], kMargin, kWidth - kMargin)) << ","
          << fmt(ry.to_px(c.y[i], kHeight - kMargin, kMargin)) << " ";
    }
    out << "\"/>\n";
    for (std::size_t i = 0; i < c.x.size(); ++i) {
      marker(out, 0, rx.to_px(c.x[i], kMargin, kWidth - kMargin),
             ry.to_px(c.y[i], kHeight - kMargin, kMargin), color);
    }
    out << "<text x=\"" << kWidth - kMargin - 200 << "\" y=\"" << kMargin + 16 + 16 * ci
        << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << color << "\">" << c.label
        << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace sarfm
