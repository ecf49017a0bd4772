"""Vision-based multi-task behavior cloning on a simulated planar arm."""

import ctypes as _ctypes

__version__ = "0.1.0"

# Training loops churn through >100 MB of float64 buffers per iteration.
# glibc serves such blocks via mmap/munmap, so every iteration pays a page
# fault storm; pinning large allocations to the heap keeps them reusable.
try:
    _libc = _ctypes.CDLL("libc.so.6", use_errno=True)
    _libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
    _libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
except (OSError, AttributeError):
    pass
