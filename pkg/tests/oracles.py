"""Slow, obviously-correct reference implementations used only by the tests."""
import itertools
import math

import numpy as np


def dense_attention(q, k, v):
    """Loop-based softmax(q k^T / sqrt(D)) v for 2-D inputs."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    n, D = q.shape
    N = k.shape[0]
    a = np.zeros((n, N))
    for i in range(n):
        s = [sum(q[i, d] * k[j, d] for d in range(D)) / math.sqrt(D) for j in range(N)]
        m = max(s)
        e = [math.exp(x - m) for x in s]
        z = sum(e)
        a[i] = [x / z for x in e]
    return a @ v, a


def box_smooth(grid):
    """3x3x3 mean with zero padding (divide by 27 everywhere)."""
    g = np.asarray(grid, dtype=np.float64)
    n = g.shape[0]
    out = np.zeros_like(g)
    for x, y, z in itertools.product(range(n), repeat=3):
        s = 0.0
        for dx, dy, dz in itertools.product((-1, 0, 1), repeat=3):
            i, j, k = x + dx, y + dy, z + dz
            if 0 <= i < n and 0 <= j < n and 0 <= k < n:
                s += g[i, j, k]
        out[x, y, z] = s / 27.0
    return out


def brute_nms(grid):
    """Keep a smoothed voxel only if it is strictly above all in-grid neighbours."""
    s = box_smooth(grid)
    n = s.shape[0]
    out = np.zeros_like(s)
    for x, y, z in itertools.product(range(n), repeat=3):
        v = s[x, y, z]
        keep = True
        for dx, dy, dz in itertools.product((-1, 0, 1), repeat=3):
            if dx == dy == dz == 0:
                continue
            i, j, k = x + dx, y + dy, z + dz
            if 0 <= i < n and 0 <= j < n and 0 <= k < n and s[i, j, k] >= v:
                keep = False
                break
        if keep:
            out[x, y, z] = v
    return out


def naive_conv3d(x, w, b, pad):
    """Direct-loop 'same'-style convolution, channels last. w: (k, k, k, Cin, Cout)."""
    B, X, Y, Z, C = x.shape
    ks = w.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0)))
    ox, oy, oz = X + 2 * pad - ks + 1, Y + 2 * pad - ks + 1, Z + 2 * pad - ks + 1
    out = np.zeros((B, ox, oy, oz, w.shape[-1]))
    for bi, i, j, k in itertools.product(range(B), range(ox), range(oy), range(oz)):
        patch = xp[bi, i:i + ks, j:j + ks, k:k + ks]
        out[bi, i, j, k] = np.tensordot(patch, w, axes=([0, 1, 2, 3], [0, 1, 2, 3])) + b
    return out


def naive_conv_transpose3d(x, w, b, stride, pad):
    """Scatter form of a transposed convolution, channels last. w: (Cin, k, k, k, Cout)."""
    B, X, Y, Z, C = x.shape
    ks = w.shape[1]
    full = [(n - 1) * stride + ks for n in (X, Y, Z)]
    out = np.zeros((B, *full, w.shape[-1]))
    for bi, i, j, k in itertools.product(range(B), range(X), range(Y), range(Z)):
        contrib = np.tensordot(x[bi, i, j, k], w, axes=([0], [0]))
        out[bi, i * stride:i * stride + ks, j * stride:j * stride + ks, k * stride:k * stride + ks] += contrib
    cropped = out[:, pad:full[0] - pad, pad:full[1] - pad, pad:full[2] - pad]
    return cropped + b


def trilinear(grid, p):
    """Trilinear interpolation at lattice point ``p``; outside corners read 0."""
    n = grid.shape[0]
    base = [math.floor(c) for c in p]
    val = 0.0
    for corner in itertools.product((0, 1), repeat=3):
        idx = [base[a] + corner[a] for a in range(3)]
        if not all(0 <= i < n for i in idx):
            continue
        wgt = 1.0
        for a in range(3):
            f = p[a] - base[a]
            wgt *= f if corner[a] else 1.0 - f
        val += wgt * grid[tuple(idx)]
    return val


def mpjpe(pred, target):
    pred, target = np.asarray(pred), np.asarray(target)
    return sum(math.dist(pred[j], target[j]) for j in range(len(pred))) / len(pred)
