# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Semantics and summation order mirror _pykernels."""
import numpy as np
from libc.math cimport floor

ctypedef fused real:
    float
    double


def _unfold(real[:, :, :, :, ::1] xpad, real[:, :, :, ::1] cols,
            int ks, int stride, int n):
    # cols viewed as (B, n**3, ks**3, C)
    cdef Py_ssize_t B = xpad.shape[0], C = xpad.shape[4]
    cdef Py_ssize_t b, i, j, l, a, p, q, c, o, k
    cdef real* dst
    cdef real* src
    for b in range(B):
        for i in range(n):
            for j in range(n):
                for l in range(n):
                    o = (i * n + j) * n + l
                    dst = &cols[b, o, 0, 0]
                    k = 0
                    for a in range(ks):
                        for p in range(ks):
                            src = &xpad[b, i * stride + a, j * stride + p, l * stride, 0]
                            for q in range(ks * C):
                                dst[k + q] = src[q]
                            k += ks * C


def _fold(real[:, :, :, ::1] cols, real[:, :, :, :, ::1] out, int n, int ks, int stride):
    # input voxels outermost; each output element therefore accumulates its
    # contributions in descending (a, p, q) tap order
    cdef Py_ssize_t B = cols.shape[0], C = cols.shape[3]
    cdef Py_ssize_t b, i, j, l, a, p, q, c, o
    cdef real* dst
    cdef real* src
    for b in range(B):
        for i in range(n):
            for j in range(n):
                for l in range(n):
                    o = (i * n + j) * n + l
                    src = &cols[b, o, 0, 0]
                    for a in range(ks):
                        for p in range(ks):
                            dst = &out[b, i * stride + a, j * stride + p, l * stride, 0]
                            for q in range(ks):
                                for c in range(C):
                                    dst[q * C + c] += src[c]
                                src += C


def unfold3d(xpad, int ks, int stride, int n):
    xpad = np.ascontiguousarray(xpad)
    B = xpad.shape[0]
    C = xpad.shape[4]
    cols = np.empty((B, n ** 3, ks ** 3, C), dtype=xpad.dtype)
    if xpad.dtype == np.float64:
        _unfold(xpad, cols, ks, stride, n)
    elif xpad.dtype == np.float32:
        _unfold(xpad, cols, ks, stride, n)
    else:
        raise TypeError(f"unsupported dtype {xpad.dtype}")
    return cols.reshape(B, n, n, n, ks, ks, ks, C)


def fold3d(cols, int stride, int size):
    B, n, _, _, ks = cols.shape[:5]
    C = cols.shape[7]
    flat = np.ascontiguousarray(cols).reshape(B, n ** 3, ks ** 3, C)
    out = np.zeros((B, size, size, size, C), dtype=cols.dtype)
    if cols.dtype == np.float64:
        _fold(flat, out, n, ks, stride)
    elif cols.dtype == np.float32:
        _fold(flat, out, n, ks, stride)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return out


cdef void _smooth(double[:, :, ::1] g, double[:, :, ::1] acc) noexcept nogil:
    cdef Py_ssize_t n0 = g.shape[0], n1 = g.shape[1], n2 = g.shape[2]
    cdef Py_ssize_t a, b, c, x, y, z, xx, yy, zz
    for x in range(n0):
        for y in range(n1):
            for z in range(n2):
                acc[x, y, z] = 0.0
    for a in range(3):
        for b in range(3):
            for c in range(3):
                for x in range(n0):
                    xx = x + a - 1
                    for y in range(n1):
                        yy = y + b - 1
                        for z in range(n2):
                            zz = z + c - 1
                            if 0 <= xx < n0 and 0 <= yy < n1 and 0 <= zz < n2:
                                acc[x, y, z] += g[xx, yy, zz]
                            else:
                                acc[x, y, z] += 0.0
    for x in range(n0):
        for y in range(n1):
            for z in range(n2):
                acc[x, y, z] = acc[x, y, z] / 27.0


def box_smooth3d(grid):
    cdef double[:, :, ::1] g = np.ascontiguousarray(grid, dtype=np.float64)
    out = np.empty((g.shape[0], g.shape[1], g.shape[2]), dtype=np.float64)
    cdef double[:, :, ::1] acc = out
    _smooth(g, acc)
    return out


def nms3d(grid):
    cdef double[:, :, ::1] g = np.ascontiguousarray(grid, dtype=np.float64)
    cdef Py_ssize_t n0 = g.shape[0], n1 = g.shape[1], n2 = g.shape[2]
    smooth = np.empty((n0, n1, n2), dtype=np.float64)
    out = np.zeros((n0, n1, n2), dtype=np.float64)
    cdef double[:, :, ::1] s = smooth
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t x, y, z, a, b, c, xx, yy, zz
    cdef double v
    cdef bint keep
    _smooth(g, s)
    for x in range(n0):
        for y in range(n1):
            for z in range(n2):
                v = s[x, y, z]
                keep = True
                for a in range(3):
                    xx = x + a - 1
                    if xx < 0 or xx >= n0:
                        continue
                    for b in range(3):
                        yy = y + b - 1
                        if yy < 0 or yy >= n1:
                            continue
                        for c in range(3):
                            zz = z + c - 1
                            if zz < 0 or zz >= n2:
                                continue
                            if a == 1 and b == 1 and c == 1:
                                continue
                            if not v > s[xx, yy, zz]:
                                keep = False
                if keep:
                    o[x, y, z] = v
    return out


def trilinear(grid, coords):
    cdef double[:, :, ::1] g = np.ascontiguousarray(grid, dtype=np.float64)
    cdef double[:, ::1] u = np.ascontiguousarray(np.asarray(coords, dtype=np.float64).reshape(-1, 3))
    cdef Py_ssize_t N = u.shape[0]
    vals_arr = np.zeros(N, dtype=np.float64)
    grads_arr = np.zeros((N, 3), dtype=np.float64)
    cdef double[::1] vals = vals_arr
    cdef double[:, ::1] grads = grads_arr
    cdef Py_ssize_t k, dx, dy, dz, ix, iy, iz
    cdef Py_ssize_t n0 = g.shape[0], n1 = g.shape[1], n2 = g.shape[2]
    cdef double bx, by, bz, fx, fy, fz, wx, wy, wz, sx, sy, sz, v
    for k in range(N):
        bx = floor(u[k, 0]); by = floor(u[k, 1]); bz = floor(u[k, 2])
        fx = u[k, 0] - bx; fy = u[k, 1] - by; fz = u[k, 2] - bz
        for dx in range(2):
            for dy in range(2):
                for dz in range(2):
                    ix = <Py_ssize_t>bx + dx
                    iy = <Py_ssize_t>by + dy
                    iz = <Py_ssize_t>bz + dz
                    if 0 <= ix < n0 and 0 <= iy < n1 and 0 <= iz < n2:
                        v = g[ix, iy, iz]
                    else:
                        v = 0.0
                    if dx:
                        wx = fx; sx = 1.0
                    else:
                        wx = 1.0 - fx; sx = -1.0
                    if dy:
                        wy = fy; sy = 1.0
                    else:
                        wy = 1.0 - fy; sy = -1.0
                    if dz:
                        wz = fz; sz = 1.0
                    else:
                        wz = 1.0 - fz; sz = -1.0
                    vals[k] += wx * wy * wz * v
                    grads[k, 0] += sx * wy * wz * v
                    grads[k, 1] += wx * sy * wz * v
                    grads[k, 2] += wx * wy * sz * v
    return vals_arr, grads_arr
