// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>

namespace sarfm {

// Row-major throughout: a batch of token/feature vectors is one matrix with
// one row per token/sample, so batched layers are single GEMMs.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrixf = MatrixX<float>;
using Matrixd = MatrixX<double>;
using Vectorf = VectorX<float>;
using Vectord = VectorX<double>;

/// Single-channel intensity image, values in [0,1] after load. rows = height.
template <typename Scalar>
using Chip = MatrixX<Scalar>;

/// 3-channel image as separate planes (channel replication keeps planes equal
/// until per-channel normalization).
template <typename Scalar>
using Image3 = std::array<MatrixX<Scalar>, 3>;

using Index = Eigen::Index;

}  // namespace sarfm
