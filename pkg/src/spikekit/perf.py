"""Process-level performance knobs.

Training allocates many multi-megabyte temporaries per batch; with glibc's
default malloc they each become an mmap/munmap pair and the page faults
dominate elementwise op time. Raising the mmap threshold keeps those
buffers on the heap for reuse (roughly 2x faster batches on Linux).
"""

from __future__ import annotations

import ctypes

M_TRIM_THRESHOLD = -1
M_MMAP_THRESHOLD = -3

_configured = False


def configure_allocator() -> bool:
    """Keep large allocations on the heap; returns True when applied.

    Safe no-op on platforms without glibc mallopt.
    """
    global _configured
    if _configured:
        return True
    try:
        libc = ctypes.CDLL(None)
        ok = bool(libc.mallopt(M_MMAP_THRESHOLD, 1 << 30))
        ok = bool(libc.mallopt(M_TRIM_THRESHOLD, 1 << 30)) and ok
        _configured = ok
        return ok
    except Exception:
        return False
