// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace sarfm {

/// Error category, mapped one-to-one onto CLI exit codes.
enum class ErrKind {
  config,   // bad flags, bad config keys, invalid arguments
  data,     // unreadable/malformed/insufficient input data
  state,    // operation illegal for the current object state
  numeric,  // non-finite values, diverged optimization
};

class Error : public std::runtime_error {
 public:
  Error(ErrKind kind, std::string msg) : std::runtime_error(std::move(msg)), kind_(kind) {}

  ErrKind kind() const noexcept { return kind_; }

  static Error config(std::string msg) { return {ErrKind::config, std::move(msg)}; }
  static Error data(std::string msg) { return {ErrKind::data, std::move(msg)}; }
  static Error state(std::string msg) { return {ErrKind::state, std::move(msg)}; }
  static Error numeric(std::string msg) { return {ErrKind::numeric, std::move(msg)}; }

 private:
  ErrKind kind_;
};

}  // namespace sarfm
