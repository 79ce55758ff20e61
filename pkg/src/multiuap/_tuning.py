"""Process-level allocator tuning.

The training loops churn through 10-60 MB numpy temporaries; with glibc's
default mmap threshold every one triggers fresh page faults. Raising the
threshold keeps those buffers on the reusable heap, which cuts step time by
roughly a third. Set MULTIUAP_NO_MALLOC_TUNING=1 to skip.
"""

import ctypes
import os

_M_MMAP_THRESHOLD = -3


def tune_allocator() -> bool:
    if os.environ.get("MULTIUAP_NO_MALLOC_TUNING"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        return bool(libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30))
    except OSError:
        return False
