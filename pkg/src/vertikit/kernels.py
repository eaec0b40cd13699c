"""Backend selection for the simulator kernels.

The compiled extension is used when it was built; otherwise, or when
``VERTIKIT_PURE_PYTHON=1`` is set, the numpy fallback is loaded instead.
"""
import math
import os

from . import _kernels_py
from .errors import ShapeError

if os.environ.get("VERTIKIT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"

bilinear_sample = _impl.bilinear_sample
sample_patch = _impl.sample_patch


def lattice_upsample(lattice, nrows, ncols, period):
    """Smoothstep value-noise upsampling; the lattice must cover the grid plus one node per axis."""
    need = (int(math.floor((nrows - 1) / period)) + 2, int(math.floor((ncols - 1) / period)) + 2)
    if lattice.ndim != 2 or lattice.shape[0] < need[0] or lattice.shape[1] < need[1]:
        raise ShapeError(f"lattice {tuple(lattice.shape)} too small for a {nrows}x{ncols} grid at period {period}; "
                         f"need at least {need}")
    return _impl.lattice_upsample(lattice, nrows, ncols, period)


__all__ = ["BACKEND", "bilinear_sample", "sample_patch", "lattice_upsample"]
