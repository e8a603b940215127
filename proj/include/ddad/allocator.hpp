#pragma once

#include <mutex>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ddad {

/// Keeps large activation buffers in the heap between training steps instead
/// of returning them to the OS, which otherwise costs a page fault per 4 KiB
/// on every step. Idempotent; a no-op outside glibc.
inline void configure_allocator() {
    static std::once_flag once;
    std::call_once(once, [] {
#if defined(__GLIBC__)
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    });
}

} // namespace ddad
