"""Pose refinement under end-effector, bone-length, angle and heatmap terms.

    E(x) = w_e |x_e - e|_2 + w_b |bones(x) - b|_1 + w_a |angles(x) - theta|_1
           + w_h sum_j (1 - H_j(x_j))

x_e stacks the two finger joints. H_j is read by trilinear interpolation on
the voxel-centre lattice and is 0 outside the grid. The gradient is analytic;
at the kinks of the norms the subgradient 0 is used.

The default solver is L-BFGS on a pseudo-Huber smoothing of the norms whose
width shrinks over a few rounds; every iterate is scored with the exact
objective and the best one is returned. Plain Adam is available as well.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .heatmap import GridTransform
from .skeleton import BODY25_BONES, END_EFFECTORS, N_JOINTS, angle_triplets, bone_lengths, joint_angles


class RefineError(ValueError):
    pass


@dataclass(frozen=True)
class RefinementWeights:
    w_e: float = 1.0
    w_b: float = 1.0
    w_a: float = 3.0
    w_h: float = 0.1

    def __post_init__(self):
        if min(self.w_e, self.w_b, self.w_a, self.w_h) < 0:
            raise RefineError("refinement weights must be non-negative")


@dataclass(frozen=True)
class SolverConfig:
    method: str = "lbfgs"           # or "adam"
    # lbfgs: smoothing widths (meters / radians) and iterations per round
    smoothing: tuple = (1e-2, 1e-3, 1e-4, 1e-5)
    round_iterations: int = 300
    # adam
    learning_rate: float = 0.01
    iterations: int = 500
    cosine_decay: bool = True

    def __post_init__(self):
        if self.method not in ("lbfgs", "adam"):
            raise RefineError(f"unknown solver {self.method!r}")


@dataclass
class RefinementProblem:
    x0: np.ndarray
    e: np.ndarray            # (2, 3) targets for the finger joints
    b: np.ndarray            # (24,) reference bone lengths
    theta: np.ndarray        # reference angles, one per angle triplet
    theta_defined: np.ndarray
    H: np.ndarray | None     # (25, 16, 16, 16) continuous grids or None
    transform: GridTransform
    weights: RefinementWeights = field(default_factory=RefinementWeights)
    bones: tuple = BODY25_BONES
    bone_dirs: np.ndarray | None = None   # unit directions used where a bone has collapsed

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        edges = np.asarray(self.bones)
        self._edges = edges
        self.bone_dirs = _unit_dirs(self.x0 if self.bone_dirs is None else None, edges, self.bone_dirs)
        self._tri = angle_triplets(self.bones)
        # incidence matrices turn per-edge / per-angle gradients into per-joint ones
        inc = np.zeros((len(edges), N_JOINTS))
        inc[np.arange(len(edges)), edges[:, 1]] = 1.0
        inc[np.arange(len(edges)), edges[:, 0]] = -1.0
        self._inc_t = inc.T.copy()
        tri = self._tri
        cols = np.arange(len(tri))
        self._tri_u = np.zeros((N_JOINTS, len(tri)))
        self._tri_v = np.zeros((N_JOINTS, len(tri)))
        self._tri_u[tri[:, 0], cols] = 1.0
        self._tri_u[tri[:, 1], cols] -= 1.0
        self._tri_v[tri[:, 2], cols] = 1.0
        self._tri_v[tri[:, 1], cols] -= 1.0
        if self.H is not None:
            self.H = np.asarray(self.H, dtype=np.float64)
            if self.H.shape != (N_JOINTS, 16, 16, 16):
                raise RefineError(f"heatmaps must have shape (25, 16, 16, 16), got {self.H.shape}")

    @classmethod
    def from_sample(cls, x0, input_pose, heatmaps=None, transform=None, weights=None):
        """Problem for a sampled pose: e from its fingers, b and theta from the input."""
        x0 = np.asarray(x0, dtype=np.float64)
        inp = np.asarray(input_pose, dtype=np.float64)
        theta, defined = joint_angles(inp)
        return cls(
            x0=x0.copy(),
            e=x0[list(END_EFFECTORS)].copy(),
            b=bone_lengths(inp),
            theta=theta,
            theta_defined=defined,
            H=heatmaps,
            transform=transform or GridTransform.for_pose(inp),
            weights=weights or RefinementWeights(),
            bone_dirs=_unit_dirs(inp, np.asarray(BODY25_BONES)),
        )


def _unit_dirs(pose, edges, dirs=None):
    """Unit bone directions of ``pose`` (or of ``dirs``); zero vectors become +y."""
    d = np.asarray(dirs if dirs is not None else pose[edges[:, 1]] - pose[edges[:, 0]], dtype=np.float64)
    n = np.sqrt((d * d).sum(axis=1))
    out = np.tile([0.0, 1.0, 0.0], (len(d), 1))
    ok = n > 0
    out[ok] = d[ok] / n[ok, None]
    return out


# Residuals this small are rounding noise of an exactly satisfied term; they
# get the zero subgradient so they do not kick the solver.
KINK_TOL = 1e-9


def _abs_terms(r, smooth):
    """Sum of |r| (or its pseudo-Huber smoothing) and the derivative per entry."""
    if smooth:
        root = np.sqrt(r * r + smooth * smooth)
        return float((root - smooth).sum()), r / root
    return float(np.abs(r).sum()), np.where(np.abs(r) > KINK_TOL, np.sign(r), 0.0)


def _cross(a, b):
    return np.stack([
        a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1],
        a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2],
        a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0],
    ], axis=1)


def trilinear_per_joint(H, lat):
    """Value of grid ``H[j]`` at lattice point ``lat[j]`` and its lattice gradient.

    Corners outside the grid read as 0.
    """
    n = H.shape[1]
    base = np.floor(lat).astype(np.int64)
    f = lat - base
    rows = np.arange(len(lat))
    vals = np.zeros(len(lat))
    grads = np.zeros_like(lat)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                idx = base + (dx, dy, dz)
                inside = np.all((idx >= 0) & (idx < n), axis=1)
                c = np.clip(idx, 0, n - 1)
                v = np.where(inside, H[rows, c[:, 0], c[:, 1], c[:, 2]], 0.0)
                wx = f[:, 0] if dx else 1.0 - f[:, 0]
                wy = f[:, 1] if dy else 1.0 - f[:, 1]
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                vals += wx * wy * wz * v
                grads[:, 0] += (1.0 if dx else -1.0) * wy * wz * v
                grads[:, 1] += (1.0 if dy else -1.0) * wx * wz * v
                grads[:, 2] += (1.0 if dz else -1.0) * wx * wy * v
    return vals, grads


def objective(x, prob: RefinementProblem, with_grad=False, smooth=0.0):
    """Objective value, and its (25, 3) gradient when ``with_grad``.

    ``smooth > 0`` replaces every absolute value and the end-effector norm by
    the pseudo-Huber ``sqrt(r^2 + smooth^2) - smooth``.
    """
    x = np.asarray(x, dtype=np.float64)
    w = prob.weights
    grad = np.zeros_like(x) if with_grad else None
    total = 0.0

    ee = list(END_EFFECTORS)
    r = x[ee] - prob.e
    n2 = float((r * r).sum())
    if smooth:
        root = math.sqrt(n2 + smooth * smooth)
        total += w.w_e * (root - smooth)
        if with_grad:
            grad[ee] += w.w_e * r / root
    else:
        n = math.sqrt(n2)
        total += w.w_e * n
        if with_grad and n > KINK_TOL:
            grad[ee] += w.w_e * r / n

    edges = prob._edges
    seg = x[edges[:, 1]] - x[edges[:, 0]]
    length = np.sqrt((seg * seg).sum(axis=1))
    val, dres = _abs_terms(length - prob.b, smooth)
    total += w.w_b * val
    if with_grad:
        # a collapsed bone is pushed apart along its reference direction
        unit = prob.bone_dirs.copy()
        ok = length > 0
        unit[ok] = seg[ok] / length[ok, None]
        grad += prob._inc_t @ ((w.w_b * dres)[:, None] * unit)

    tri = prob._tri
    u = x[tri[:, 0]] - x[tri[:, 1]]
    v = x[tri[:, 2]] - x[tri[:, 1]]
    c = _cross(u, v)
    s = np.sqrt((c * c).sum(axis=1))
    d = (u * v).sum(axis=1)
    defined = ((u * u).sum(axis=1) > 0) & ((v * v).sum(axis=1) > 0)
    use = defined & np.asarray(prob.theta_defined, dtype=bool)
    ares = np.where(use, np.arctan2(s, d) - prob.theta, 0.0)
    val, dang = _abs_terms(ares, smooth)
    total += w.w_a * val
    if with_grad:
        sg = w.w_a * np.where(use, dang, 0.0)
        den = s * s + d * d
        den = np.where(den > 0, den, 1.0)
        chat = c / np.where(s > 0, s, 1.0)[:, None]
        chat[s == 0] = 0.0
        k = (sg / den)[:, None]
        gu = (d[:, None] * _cross(v, chat) - s[:, None] * v) * k
        gv = (d[:, None] * _cross(chat, u) - s[:, None] * u) * k
        grad += prob._tri_u @ gu + prob._tri_v @ gv

    if prob.H is not None and w.w_h > 0:
        lat = prob.transform.to_lattice(x)
        vals, glat = trilinear_per_joint(prob.H, lat)
        total += w.w_h * float((1.0 - vals).sum())
        if with_grad:
            grad -= w.w_h * glat / prob.transform.voxel_size
    return (total, grad) if with_grad else total


@dataclass
class RefineResult:
    pose: np.ndarray
    objective: float
    iterations: int
    best_history: np.ndarray   # best objective after each iterate, index 0 = x0


class _Best:
    def __init__(self, prob, x0):
        self.prob = prob
        self.x = np.array(x0, dtype=np.float64)
        self.f = objective(self.x, prob)
        if not math.isfinite(self.f):
            raise RefineError("objective is not finite at the starting pose")
        self.history = [self.f]

    def offer(self, x):
        f = objective(x, self.prob)
        if f < self.f:
            self.x, self.f = np.array(x, dtype=np.float64).reshape(N_JOINTS, 3), f
        self.history.append(self.f)


def _repair_collapsed(prob, x):
    """Re-extend zero-length bones along their reference direction, parents first.

    The objective has no useful subgradient where joints coincide, so the
    solver starts from this repaired pose instead.
    """
    x = x.copy()
    for i, (p, c) in enumerate(prob._edges):
        if np.sum((x[c] - x[p]) ** 2) <= KINK_TOL ** 2:
            x[c] = x[p] + prob.b[i] * prob.bone_dirs[i]
    return x


def _refine_lbfgs(prob, solver, best):
    z = _repair_collapsed(prob, best.x).reshape(-1)
    best.offer(z.reshape(N_JOINTS, 3))
    iters = 0
    for width in solver.smoothing:
        def fun(zz, width=width):
            val, g = objective(zz.reshape(N_JOINTS, 3), prob, with_grad=True, smooth=width)
            return val, g.reshape(-1)

        res = minimize(fun, z, jac=True, method="L-BFGS-B",
                       callback=lambda zk: best.offer(zk.reshape(N_JOINTS, 3)),
                       options={"maxiter": solver.round_iterations})
        z = res.x
        iters += res.nit
        best.offer(z.reshape(N_JOINTS, 3))
    return iters


def _refine_adam(prob, solver, best, beta1=0.9, beta2=0.999, eps=1e-8):
    x = _repair_collapsed(prob, best.x)
    best.offer(x)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for it in range(1, solver.iterations + 1):
        _, g = objective(x, prob, with_grad=True)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        lr = solver.learning_rate
        if solver.cosine_decay:
            lr *= 0.5 * (1.0 + math.cos(math.pi * (it - 1) / solver.iterations))
        x = x - lr * (m / (1 - beta1 ** it)) / (np.sqrt(v / (1 - beta2 ** it)) + eps)
        best.offer(x)
    return solver.iterations


def refine(prob: RefinementProblem, solver: SolverConfig | None = None) -> RefineResult:
    """Minimise the objective from ``prob.x0``; returns the best iterate seen."""
    solver = solver or SolverConfig()
    best = _Best(prob, prob.x0)
    if best.f == 0.0:
        return RefineResult(best.x, best.f, 0, np.asarray(best.history))
    run = _refine_lbfgs if solver.method == "lbfgs" else _refine_adam
    iters = run(prob, solver, best)
    return RefineResult(best.x, best.f, iters, np.asarray(best.history))
