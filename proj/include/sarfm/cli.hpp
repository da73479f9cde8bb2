// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace sarfm {

/// Entry point for the `sarfm` command-line tool. Returns the process exit
/// code: 0 ok, 2 config error, 3 data error, 4 numeric abort, 5 partial grid
/// failure, 1 unexpected.
int run_cli(int argc, const char* const* argv);

}  // namespace sarfm
