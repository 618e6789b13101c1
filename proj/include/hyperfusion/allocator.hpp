#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace hyperfusion {

/// Keeps large tensor buffers on the heap instead of fresh mmap pages each
/// step. Training allocates and frees many same-sized buffers per step.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace hyperfusion
