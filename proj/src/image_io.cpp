// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#include "sarfm/image_io.hpp"

#include <fstream>
#include <vector>

#include "sarfm/error.hpp"

namespace sarfm {

namespace {

// Skips whitespace and '#' comments between PGM header tokens.
int next_header_int(std::istream& in, const std::string& path) {
  for (;;) {
    int ch = in.peek();
    if (ch == '#') {
      std::string dummy;
      std::getline(in, dummy);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      break;
    }
  }
  int value = 0;
  if (!(in >> value)) throw Error::data("bad PGM header in " + path);
  return value;
}

}  // namespace

Matrixf load_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error::data("cannot open image: " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P2") {
    throw Error::data("unsupported raster container (want PGM P5/P2): " + path.string());
  }
  const int w = next_header_int(in, path.string());
  const int h = next_header_int(in, path.string());
  const int maxval = next_header_int(in, path.string());
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) {
    throw Error::data("bad PGM dimensions in " + path.string());
  }
  Matrixf img(h, w);
  const float scale = 1.0f / static_cast<float>(maxval);
  if (magic == "P2") {
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        int v;
        if (!(in >> v)) throw Error::data("truncated PGM data in " + path.string());
        img(r, c) = static_cast<float>(v) * scale;
      }
    }
    return img;
  }
  in.get();  // single whitespace after maxval
  const bool wide = maxval > 255;
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * (wide ? 2 : 1));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in.gcount()) != buf.size()) {
    throw Error::data("truncated PGM data in " + path.string());
  }
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * w + c;
      const int v = wide ? (buf[2 * i] << 8) | buf[2 * i + 1] : buf[i];  // big-endian 16-bit
      img(r, c) = static_cast<float>(v) * scale;
    }
  }
  return img;
}

void save_pgm(const Matrixf& chip, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error::data("cannot write image: " + path.string());
  out << "P5\n" << chip.cols() << " " << chip.rows() << "\n255\n";
  for (Index r = 0; r < chip.rows(); ++r) {
    for (Index c = 0; c < chip.cols(); ++c) {
      const float v = std::clamp(chip(r, c), 0.0f, 1.0f);
      out.put(static_cast<char>(std::lround(v * 255.0f)));
    }
  }
}

Matrixf load_chip(const std::string& image_ref, const SynthConfig& synth_cfg,
                  const std::filesystem::path& base_dir) {
  constexpr const char* kScheme = "synth://";
  if (image_ref.rfind(kScheme, 0) == 0) {
    const std::string rest = image_ref.substr(std::string(kScheme).size());
    const auto slash = rest.find('/');
    if (slash == std::string::npos) throw Error::data("bad synth ref: " + image_ref);
    try {
      const int class_id = std::stoi(rest.substr(0, slash));
      const std::uint64_t seed = std::stoull(rest.substr(slash + 1));
      return synth_sar_chip<float>(class_id, seed, synth_cfg);
    } catch (const Error&) {
      throw;
    } catch (const std::exception&) {
      throw Error::data("bad synth ref: " + image_ref);
    }
  }
  std::filesystem::path p(image_ref);
  if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
  return load_pgm(p);
}

}  // namespace sarfm
