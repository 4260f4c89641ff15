"""Volumetric heatmaps on a 16³ grid: transforms, targets, bins, NMS, sampling.

Grids are numpy arrays indexed ``[x, y, z]``. Logit grids carry a trailing
axis of 10 bin logits. Continuous grids hold one value in [0, 1] per voxel.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import kernels
from .numeric import log_softmax_np
from .skeleton import ROOT

RES = 16
N_BINS = 10
CUBE_SIDE = 2.0
GAUSS_SIGMA = 3.0
GAUSS_RADIUS = 2  # kernel size 5
BIN_CENTERS = (np.arange(N_BINS) + 0.5) / N_BINS


class Form(IntEnum):
    LOGITS = 0
    CONTINUOUS = 1


class HeatmapError(ValueError):
    pass


@dataclass(frozen=True)
class GridTransform:
    origin: np.ndarray = field(default_factory=lambda: np.full(3, -CUBE_SIDE / 2))
    voxel_size: float = CUBE_SIDE / RES
    resolution: int = RES

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise HeatmapError(f"voxel_size must be positive, got {self.voxel_size}")
        if self.resolution != RES:
            raise HeatmapError(f"resolution must be {RES}, got {self.resolution}")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))

    @classmethod
    def for_pose(cls, pose, side=CUBE_SIDE):
        """Cube of side ``side`` centred on the pose's Mid-Hip joint."""
        hip = np.asarray(pose, dtype=np.float64)[ROOT]
        return cls(origin=hip - side / 2, voxel_size=side / RES)

    @property
    def center(self):
        return self.origin + self.voxel_size * RES / 2

    def to_lattice(self, points):
        """Continuous lattice coordinates; integers land on voxel centres."""
        return (np.asarray(points, dtype=np.float64) - self.origin) / self.voxel_size - 0.5

    def voxel_center(self, index):
        return self.origin + (np.asarray(index, dtype=np.float64) + 0.5) * self.voxel_size

    def contains(self, points):
        u = (np.asarray(points, dtype=np.float64) - self.origin) / self.voxel_size
        return np.all((u >= 0) & (u < RES), axis=-1)


def world_to_voxel(t: GridTransform, p):
    """Voxel index triple containing ``p``, or None when outside the grid."""
    u = np.floor((np.asarray(p, dtype=np.float64) - t.origin) / t.voxel_size).astype(np.int64)
    if np.any(u < 0) or np.any(u >= RES):
        return None
    return tuple(int(v) for v in u)


def world_to_voxels(t: GridTransform, points):
    """Vectorised :func:`world_to_voxel`: ``(indices, inside)`` for (N, 3) points."""
    u = np.floor((np.asarray(points, dtype=np.float64) - t.origin) / t.voxel_size).astype(np.int64)
    inside = np.all((u >= 0) & (u < RES), axis=-1)
    return u, inside


def gaussian_target(center) -> np.ndarray:
    """Unnormalised Gaussian (peak 1) truncated to the 5³ box around ``center``."""
    c = np.asarray(center, dtype=np.int64)
    if c.shape != (3,) or np.any(c < 0) or np.any(c >= RES):
        raise HeatmapError(f"gaussian centre {tuple(center)} outside the {RES}³ grid")
    grid = np.zeros((RES, RES, RES))
    lo = np.maximum(c - GAUSS_RADIUS, 0)
    hi = np.minimum(c + GAUSS_RADIUS, RES - 1) + 1
    ax = [np.arange(lo[i], hi[i]) - c[i] for i in range(3)]
    d2 = ax[0][:, None, None] ** 2 + ax[1][None, :, None] ** 2 + ax[2][None, None, :] ** 2
    grid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = np.exp(-d2 / (2 * GAUSS_SIGMA ** 2))
    return grid


def discretize(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
        raise HeatmapError("continuous heatmap values must lie in [0, 1]")
    return np.minimum(np.floor(v * N_BINS), N_BINS - 1).astype(np.int64)


def bin_probabilities(logits) -> np.ndarray:
    return np.exp(log_softmax_np(np.asarray(logits, dtype=np.float64)))


def expected_value_grid(logits) -> np.ndarray:
    """Per-voxel expectation of bin centres under the softmax of the logits."""
    return bin_probabilities(logits) @ BIN_CENTERS


def sampling_grid(logits) -> np.ndarray:
    """Expected-value grid with no-probability voxels zeroed.

    A voxel whose most likely class is bin 0 carries no probability mass for
    sampling. If that removes every voxel, the plain expected-value grid is
    returned instead so the result always has positive mass.
    """
    p = bin_probabilities(logits)
    ev = p @ BIN_CENTERS
    masked = np.where(np.argmax(p, axis=-1) > 0, ev, 0.0)
    return masked if np.any(masked > 0) else ev


def box_smooth(grid) -> np.ndarray:
    return kernels.box_smooth3d(grid)


def nms(grid) -> np.ndarray:
    """3³ box smoothing, then zero every voxel that is not a strict local maximum."""
    g = np.asarray(grid, dtype=np.float64)
    if g.shape != (RES, RES, RES):
        raise HeatmapError(f"nms expects a {RES}³ grid, got {g.shape}")
    return kernels.nms3d(g)


def ranked_maxima(suppressed) -> np.ndarray:
    """Flat indices of positive survivors, by value descending then index ascending."""
    flat = np.asarray(suppressed).reshape(-1)
    idx = np.flatnonzero(flat > 0)
    order = np.lexsort((idx, -flat[idx]))
    return idx[order]


def top_maxima_quota(k: int) -> int:
    """How many of ``k`` draws come from the ranked local maxima."""
    return max(min(k, 2), math.ceil(k / 2))


def sample_voxel(grid, k: int, seed, suppressed=None) -> np.ndarray:
    """Draw ``k`` voxel indices (k, 3) from a continuous heatmap.

    The first ``top_maxima_quota(k)`` draws are the highest NMS survivors in
    rank order (fewer if there are fewer survivors); the rest are independent
    categorical draws from the NMS-filtered grid normalised to sum 1.
    ``seed`` only affects the categorical draws.
    """
    if k < 1:
        raise HeatmapError(f"k must be at least 1, got {k}")
    g = np.asarray(grid, dtype=np.float64)
    if not np.any(g > 0):
        raise HeatmapError("cannot sample from a heatmap without positive voxels")
    if suppressed is None:
        suppressed = nms(g)
    ranked = ranked_maxima(suppressed)
    n_top = min(top_maxima_quota(k), len(ranked))
    flat = list(ranked[:n_top])
    rest = k - n_top
    if rest:
        mass = suppressed.reshape(-1)
        if not np.any(mass > 0):  # plateau: no strict maxima survive
            mass = box_smooth(g).reshape(-1)
        rng = np.random.default_rng(seed)
        flat.extend(rng.choice(mass.size, size=rest, p=mass / mass.sum()))
    return np.stack(np.unravel_index(np.asarray(flat, dtype=np.int64), (RES, RES, RES)), axis=1)


# files -----------------------------------------------------------------------

MAGIC = b"CPHM"
VERSION = 1
_HEADER = struct.Struct("<4sIIf")


def write_heatmap(path, values, form: Form, voxel_size: float):
    """Binary dump: 16-byte header then little-endian f32 values, row-major."""
    v = np.asarray(values)
    expected = (RES, RES, RES, N_BINS) if form == Form.LOGITS else (RES, RES, RES)
    if v.shape != expected:
        raise HeatmapError(f"{Form(form).name} heatmap must have shape {expected}, got {v.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, int(form), voxel_size))
        fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_heatmap(path):
    """Inverse of :func:`write_heatmap`: ``(values, form, voxel_size)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise HeatmapError(f"{path}: truncated header")
    magic, version, tag, voxel_size = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise HeatmapError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise HeatmapError(f"{path}: unsupported version {version}")
    form = Form(tag)
    shape = (RES, RES, RES, N_BINS) if form == Form.LOGITS else (RES, RES, RES)
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if body.size != np.prod(shape):
        raise HeatmapError(f"{path}: expected {np.prod(shape)} values, found {body.size}")
    return body.reshape(shape).copy(), form, float(voxel_size)


def slice_image(grid, axis: int, index: int) -> np.ndarray:
    """8-bit image of one axis-aligned slice, value scaled by 255."""
    g = np.asarray(grid, dtype=np.float64)
    if not 0 <= axis < 3 or not 0 <= index < RES:
        raise HeatmapError(f"slice axis {axis} / index {index} out of range")
    sl = np.take(g, index, axis=axis)
    return np.clip(np.rint(sl * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image):
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, _maxval, body = raw.split(b"\n", 3)
    if magic != b"P5":
        raise HeatmapError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w)
