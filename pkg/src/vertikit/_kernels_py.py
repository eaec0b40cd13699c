"""Pure-numpy implementations of the simulator kernels.

Every function mirrors ``_kernels.pyx`` operation for operation so that both
backends produce bit-identical float64 output.
"""
import numpy as np


def bilinear_sample(grid, rows, cols):
    """Sample ``grid`` at fractional (row, col) cell coordinates.

    Coordinates must already be inside ``[0, n-1]``; the caller checks bounds.
    """
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    nr, nc = grid.shape
    r0 = np.clip(np.floor(rows).astype(np.intp), 0, nr - 2)
    c0 = np.clip(np.floor(cols).astype(np.intp), 0, nc - 2)
    fr = rows - r0
    fc = cols - c0
    g00 = grid[r0, c0]
    g01 = grid[r0, c0 + 1]
    g10 = grid[r0 + 1, c0]
    g11 = grid[r0 + 1, c0 + 1]
    # lerp form: exact on constant cells
    top = g00 + fc * (g01 - g00)
    bot = g10 + fc * (g11 - g10)
    return top + fr * (bot - top)


def patch_coords(origin_x, origin_y, res, cx, cy, cos_yaw, sin_yaw, n, cell):
    """Fractional map (row, col) coordinates of an ``n x n`` yaw-aligned patch."""
    half = (n - 1) / 2.0
    idx = np.arange(n, dtype=np.float64)
    ly = ((idx - half) * cell)[:, None]
    lx = ((idx - half) * cell)[None, :]
    wx = cx + cos_yaw * lx - sin_yaw * ly
    wy = cy + sin_yaw * lx + cos_yaw * ly
    cols = (wx - origin_x) / res
    rows = (wy - origin_y) / res
    return rows, cols


def sample_patch(grid, origin_x, origin_y, res, cx, cy, cos_yaw, sin_yaw, n, cell):
    rows, cols = patch_coords(origin_x, origin_y, res, cx, cy, cos_yaw, sin_yaw, n, cell)
    return bilinear_sample(grid, rows, cols)


def lattice_upsample(lattice, nrows, ncols, period):
    """Smoothstep-interpolate a coarse random lattice onto an ``nrows x ncols`` grid.

    ``period`` is the lattice spacing measured in output cells.
    """
    lattice = np.ascontiguousarray(lattice, dtype=np.float64)
    v = np.arange(nrows, dtype=np.float64) / period
    u = np.arange(ncols, dtype=np.float64) / period
    i0 = np.floor(v).astype(np.intp)
    j0 = np.floor(u).astype(np.intp)
    tv = v - i0
    tu = u - j0
    sv = (tv * tv * (3.0 - 2.0 * tv))[:, None]
    su = (tu * tu * (3.0 - 2.0 * tu))[None, :]
    i0 = i0[:, None]
    j0 = j0[None, :]
    a = lattice[i0, j0]
    b = lattice[i0, j0 + 1]
    c = lattice[i0 + 1, j0]
    d = lattice[i0 + 1, j0 + 1]
    top = a + su * (b - a)
    bot = c + su * (d - c)
    return top + sv * (bot - top)
