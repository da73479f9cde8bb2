// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#include "sarfm/cli.hpp"

int main(int argc, char** argv) { return sarfm::run_cli(argc, argv); }
