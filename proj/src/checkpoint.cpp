// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#include "sarfm/checkpoint.hpp"

#include <fstream>

static_assert(__BYTE_ORDER__ == __ORDER_LITTLE_ENDIAN__,
              "checkpoint container stores little-endian floats");

namespace sarfm {

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error::data("cannot write checkpoint: " + path.string());
    out << "SARFM-CKPT 1\n";
    out << "meta " << ckpt.meta.size() << "\n";
    for (const auto& [key, value] : ckpt.meta) {
      if (key.find_first_of("\t\n") != std::string::npos ||
          value.find('\n') != std::string::npos) {
        throw Error::data("checkpoint meta may not contain tabs/newlines: " + key);
      }
      out << key << '\t' << value << '\n';
    }
    out << "tensors " << ckpt.tensors.size() << "\n";
    for (const auto& t : ckpt.tensors) {
      if (static_cast<Index>(t.data.size()) != t.rows * t.cols) {
        throw Error::state("checkpoint tensor " + t.name + " size mismatch");
      }
      out << t.name << ' ' << t.rows << ' ' << t.cols << '\n';
      out.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
    if (!out) throw Error::data("short write on checkpoint: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error::data("cannot open checkpoint: " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "SARFM-CKPT 1") throw Error::data("bad checkpoint magic in " + path.string());

  Checkpoint ckpt;
  std::getline(in, line);
  if (line.rfind("meta ", 0) != 0) throw Error::data("bad checkpoint header in " + path.string());
  const std::size_t n_meta = std::stoull(line.substr(5));
  for (std::size_t i = 0; i < n_meta; ++i) {
    if (!std::getline(in, line)) throw Error::data("truncated checkpoint: " + path.string());
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error::data("bad meta line in " + path.string());
    ckpt.meta[line.substr(0, tab)] = line.substr(tab + 1);
  }

  std::getline(in, line);
  if (line.rfind("tensors ", 0) != 0) {
    throw Error::data("bad checkpoint tensor header in " + path.string());
  }
  const std::size_t n_tensors = std::stoull(line.substr(8));
  ckpt.tensors.reserve(n_tensors);
  for (std::size_t i = 0; i < n_tensors; ++i) {
    if (!std::getline(in, line)) throw Error::data("truncated checkpoint: " + path.string());
    NamedTensor t;
    const auto s1 = line.find(' ');
    const auto s2 = line.find(' ', s1 + 1);
    if (s1 == std::string::npos || s2 == std::string::npos) {
      throw Error::data("bad tensor header in " + path.string());
    }
    t.name = line.substr(0, s1);
    t.rows = std::stoll(line.substr(s1 + 1, s2 - s1 - 1));
    t.cols = std::stoll(line.substr(s2 + 1));
    if (t.rows < 0 || t.cols < 0) throw Error::data("bad tensor shape in " + path.string());
    t.data.resize(static_cast<std::size_t>(t.rows * t.cols));
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != t.data.size() * sizeof(float)) {
      throw Error::data("truncated tensor data in " + path.string());
    }
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

std::vector<std::string> checkpoint_provenance(const Checkpoint& ckpt) {
  std::vector<std::string> out;
  const auto it = ckpt.meta.find("provenance");
  if (it == ckpt.meta.end() || it->second.empty() || it->second == "-") return out;
  std::string cur;
  for (char ch : it->second) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

void set_checkpoint_provenance(Checkpoint& ckpt, const std::vector<std::string>& corpora) {
  std::string joined;
  for (const auto& name : corpora) {
    if (name.find(',') != std::string::npos) {
      throw Error::data("corpus name may not contain a comma: " + name);
    }
    if (!joined.empty()) joined.push_back(',');
    joined += name;
  }
  ckpt.meta["provenance"] = joined.empty() ? "-" : joined;
}

}  // namespace sarfm
