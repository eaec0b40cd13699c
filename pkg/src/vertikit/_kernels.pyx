# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled simulator kernels; see ``_kernels_py`` for the reference versions."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline double _bilinear(const double[:, ::1] g, Py_ssize_t nr, Py_ssize_t nc,
                             double r, double c) noexcept nogil:
    cdef Py_ssize_t r0 = <Py_ssize_t>floor(r)
    cdef Py_ssize_t c0 = <Py_ssize_t>floor(c)
    if r0 < 0:
        r0 = 0
    elif r0 > nr - 2:
        r0 = nr - 2
    if c0 < 0:
        c0 = 0
    elif c0 > nc - 2:
        c0 = nc - 2
    cdef double fr = r - r0
    cdef double fc = c - c0
    cdef double top = g[r0, c0] + fc * (g[r0, c0 + 1] - g[r0, c0])
    cdef double bot = g[r0 + 1, c0] + fc * (g[r0 + 1, c0 + 1] - g[r0 + 1, c0])
    return top + fr * (bot - top)


def bilinear_sample(grid, rows, cols):
    cdef const double[:, ::1] g = np.ascontiguousarray(grid, dtype=np.float64)
    r_arr = np.asarray(rows, dtype=np.float64)
    c_arr = np.asarray(cols, dtype=np.float64)
    shape = np.broadcast(r_arr, c_arr).shape
    cdef const double[::1] rv = np.ascontiguousarray(np.broadcast_to(r_arr, shape)).ravel()
    cdef const double[::1] cv = np.ascontiguousarray(np.broadcast_to(c_arr, shape)).ravel()
    cdef Py_ssize_t n = rv.shape[0], i
    cdef Py_ssize_t nr = g.shape[0], nc = g.shape[1]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _bilinear(g, nr, nc, rv[i], cv[i])
    return out.reshape(shape)


def sample_patch(grid, double origin_x, double origin_y, double res, double cx, double cy,
                 double cos_yaw, double sin_yaw, Py_ssize_t n, double cell):
    cdef const double[:, ::1] g = np.ascontiguousarray(grid, dtype=np.float64)
    cdef Py_ssize_t nr = g.shape[0], nc = g.shape[1], i, j
    cdef double half = (n - 1) / 2.0
    cdef double lx, ly, wx, wy
    out = np.empty((n, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            ly = (i - half) * cell
            for j in range(n):
                lx = (j - half) * cell
                wx = cx + cos_yaw * lx - sin_yaw * ly
                wy = cy + sin_yaw * lx + cos_yaw * ly
                o[i, j] = _bilinear(g, nr, nc, (wy - origin_y) / res, (wx - origin_x) / res)
    return out


def lattice_upsample(lattice, Py_ssize_t nrows, Py_ssize_t ncols, double period):
    cdef const double[:, ::1] L = np.ascontiguousarray(lattice, dtype=np.float64)
    cdef Py_ssize_t i, j, i0, j0
    cdef double v, u, tv, tu, sv, su, a, b, c, d, top, bot
    out = np.empty((nrows, ncols), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(nrows):
            v = i / period
            i0 = <Py_ssize_t>floor(v)
            tv = v - i0
            sv = tv * tv * (3.0 - 2.0 * tv)
            for j in range(ncols):
                u = j / period
                j0 = <Py_ssize_t>floor(u)
                tu = u - j0
                su = tu * tu * (3.0 - 2.0 * tu)
                a = L[i0, j0]
                b = L[i0, j0 + 1]
                c = L[i0 + 1, j0]
                d = L[i0 + 1, j0 + 1]
                top = a + su * (b - a)
                bot = c + su * (d - c)
                o[i, j] = top + sv * (bot - top)
    return out
