"""Pure numpy versions of the hot kernels.

Used when the compiled extension is unavailable or ``CHARPOSE_PURE_PYTHON``
is set. Results match the compiled kernels bit for bit: summation order is
the same fixed offset order in both.
"""
import numpy as np


def unfold3d(xpad, ks, stride, n):
    """Gather sliding windows of ``xpad`` (B, P, P, P, C).

    Returns cols of shape (B, n, n, n, ks, ks, ks, C) with
    ``cols[b, i, j, l, a, c_, d] = xpad[b, i*stride + a, j*stride + c_, l*stride + d]``.
    """
    B = xpad.shape[0]
    C = xpad.shape[-1]
    cols = np.empty((B, n, n, n, ks, ks, ks, C), dtype=xpad.dtype)
    span = stride * (n - 1) + 1
    for a in range(ks):
        for b in range(ks):
            for c in range(ks):
                cols[:, :, :, :, a, b, c, :] = xpad[
                    :, a:a + span:stride, b:b + span:stride, c:c + span:stride, :
                ]
    return cols


def fold3d(cols, stride, size):
    """Adjoint of :func:`unfold3d`: scatter-add windows into a (B, size³, C) grid.

    Taps are visited in descending order, which is the per-element summation
    order of the compiled kernel's input-voxel-major loop.
    """
    B, n, _, _, ks, _, _, C = cols.shape
    out = np.zeros((B, size, size, size, C), dtype=cols.dtype)
    span = stride * (n - 1) + 1
    for a in reversed(range(ks)):
        for b in reversed(range(ks)):
            for c in reversed(range(ks)):
                out[:, a:a + span:stride, b:b + span:stride, c:c + span:stride, :] += (
                    cols[:, :, :, :, a, b, c, :]
                )
    return out


def box_smooth3d(grid):
    """3x3x3 mean filter with zero padding."""
    g = np.asarray(grid, dtype=np.float64)
    n0, n1, n2 = g.shape
    pad = np.zeros((n0 + 2, n1 + 2, n2 + 2))
    pad[1:-1, 1:-1, 1:-1] = g
    acc = np.zeros_like(g)
    for a in range(3):
        for b in range(3):
            for c in range(3):
                acc += pad[a:a + n0, b:b + n1, c:c + n2]
    return acc / 27.0


def nms3d(grid):
    """Smooth, then keep only strict maxima of each 3x3x3 neighbourhood."""
    s = box_smooth3d(grid)
    n0, n1, n2 = s.shape
    pad = np.full((n0 + 2, n1 + 2, n2 + 2), -np.inf)
    pad[1:-1, 1:-1, 1:-1] = s
    keep = np.ones(s.shape, dtype=bool)
    for a in range(3):
        for b in range(3):
            for c in range(3):
                if a == 1 and b == 1 and c == 1:
                    continue
                keep &= s > pad[a:a + n0, b:b + n1, c:c + n2]
    return np.where(keep, s, 0.0)


def trilinear(grid, coords):
    """Trilinear interpolation on the voxel-centre lattice, zero outside it.

    ``coords`` are continuous lattice coordinates (N, 3): integer values hit
    voxel centres. Returns values (N,) and gradients w.r.t. coords (N, 3).
    """
    g = np.asarray(grid, dtype=np.float64)
    u = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    n = np.array(g.shape)
    base = np.floor(u).astype(np.int64)
    f = u - base
    vals = np.zeros(len(u))
    grads = np.zeros((len(u), 3))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                idx = base + (dx, dy, dz)
                inside = np.all((idx >= 0) & (idx < n), axis=1)
                v = np.zeros(len(u))
                ii = idx[inside]
                v[inside] = g[ii[:, 0], ii[:, 1], ii[:, 2]]
                wx = f[:, 0] if dx else 1.0 - f[:, 0]
                wy = f[:, 1] if dy else 1.0 - f[:, 1]
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                sx = 1.0 if dx else -1.0
                sy = 1.0 if dy else -1.0
                sz = 1.0 if dz else -1.0
                vals += wx * wy * wz * v
                grads[:, 0] += sx * wy * wz * v
                grads[:, 1] += wx * sy * wz * v
                grads[:, 2] += wx * wy * sz * v
    return vals, grads
