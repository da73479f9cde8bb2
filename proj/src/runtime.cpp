// Copyright (c) 2026 sarfm contributors
// SPDX-License-Identifier: Apache-2.0

#include <malloc.h>

namespace sarfm {
namespace {

// Training allocates and frees multi-megabyte activation buffers every step.
// With glibc defaults those round-trip through mmap/munmap, which serializes
// worker threads on the VM lock and dominates the step time. Raising the
// thresholds keeps the buffers on the heap for reuse.
struct MallocTuning {
  MallocTuning() {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
  }
};
const MallocTuning tuning;

}  // namespace
}  // namespace sarfm
