#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace invigil {

/// Keep freed blocks in the process heap. Training reallocates activations
/// of tens of megabytes every step; by default glibc serves those with fresh
/// mappings that are page-faulted in on first touch, which costs more than
/// the arithmetic on them. Process-wide and idempotent; a no-op elsewhere.
inline void retain_freed_memory() {
#if defined(__GLIBC__)
  static const bool applied = [] {
    mallopt(M_MMAP_MAX, 0);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)applied;
#endif
}

} // namespace invigil
