"""Metrics, breakdowns and baselines.

MPJPE is the mean Euclidean joint distance in meters. Min-of-k takes the best
hypothesis per record; per-joint and per-body-part errors are averaged over
records for that best hypothesis, so they aggregate back to the overall mean.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .heatmap import RES, GridTransform, expected_value_grid, world_to_voxel
from .skeleton import BODY_PARTS, JOINT_NAMES, N_JOINTS, bodypart_of

log = logging.getLogger(__name__)

THRESHOLDS = (0.15, 0.25)


class EvalError(ValueError):
    pass


def mpjpe(pred, target, squared=False) -> float:
    """Mean per-joint position error; ``squared`` averages squared distances instead."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    sq = (d * d).sum(axis=-1)
    return float(sq.mean() if squared else np.sqrt(sq).mean())


def per_joint_errors(pred, target) -> np.ndarray:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.sqrt((d * d).sum(axis=-1))


def min_of_k(samples, target):
    """``(best MPJPE, best index)``; the lowest index wins ties."""
    poses = np.asarray(getattr(samples, "poses", samples), dtype=np.float64)
    if poses.ndim != 3 or len(poses) < 1:
        raise EvalError("min_of_k needs at least one hypothesis")
    errs = per_joint_errors(poses, target).mean(axis=-1)
    i = int(np.argmin(errs))
    return float(errs[i]), i


def pct_below(errors, threshold) -> float:
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise EvalError("pct_below needs at least one error")
    return float(100.0 * np.count_nonzero(e < threshold) / e.size)


def _probabilities_from_logits(h):
    g = expected_value_grid(h)
    return g / g.sum()


def _probabilities_from_continuous(h):
    g = np.clip(np.asarray(h, dtype=np.float64), 1e-9, 1.0)
    return g / g.sum()


def nll(heatmaps, target, transform: GridTransform | None = None, continuous=False) -> float:
    """Mean over joints of ``-ln P_j(voxel of target joint j)``.

    ``heatmaps`` is (25, 16, 16, 16, 10) logits, or (25, 16, 16, 16) continuous
    grids with ``continuous=True``. Probabilities are the expected-value grid
    (or the clamped continuous grid) normalised over the 4096 voxels.
    """
    h = np.asarray(heatmaps, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if len(h) != len(target):
        raise EvalError(f"{len(h)} heatmaps for {len(target)} target joints")
    t = transform if transform is not None else GridTransform()
    total = 0.0
    for j in range(len(h)):
        v = world_to_voxel(t, target[j])
        if v is None:
            raise EvalError(f"target joint {j} lies outside the heatmap grid")
        p = _probabilities_from_continuous(h[j]) if continuous else _probabilities_from_logits(h[j])
        total -= math.log(p[v])
    return total / len(h)


UNIFORM_NLL = math.log(RES ** 3)


# baselines -------------------------------------------------------------------

def zero_velocity_baseline(input_pose) -> np.ndarray:
    return np.array(input_pose, dtype=np.float64)


class AveragePoseBaseline:
    """Mean training target pose, globally or per action."""

    def __init__(self, train_records, mode="global"):
        if mode not in ("global", "per-action"):
            raise EvalError(f"mode must be 'global' or 'per-action', got {mode!r}")
        if not train_records:
            raise EvalError("average pose baseline needs training targets")
        self.mode = mode
        targets = np.stack([r.target_pose for r in train_records])
        self.global_pose = targets.mean(axis=0)
        self.per_action = {}
        for act in sorted({r.action for r in train_records}):
            self.per_action[act] = np.stack(
                [r.target_pose for r in train_records if r.action == act]
            ).mean(axis=0)

    def __call__(self, action=None) -> np.ndarray:
        if self.mode == "global":
            return self.global_pose.copy()
        if action not in self.per_action:
            log.warning("action %r unseen in training; using the global average pose", action)
            return self.global_pose.copy()
        return self.per_action[action].copy()


def average_pose_baseline(train_records, mode="global") -> AveragePoseBaseline:
    return AveragePoseBaseline(train_records, mode)


# reports ----------------------------------------------------------------------

@dataclass
class EvalReport:
    mpjpe_mean: float
    pct_below_015: float
    pct_below_025: float
    nll_mean: float | None
    per_bodypart: dict
    per_joint: list
    k: int
    n_records: int
    per_record: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_joint"] = {JOINT_NAMES[j]: v for j, v in enumerate(self.per_joint)}
        return d

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_joint_csv(self, path):
        """One row per joint: index, name, body part, error in meters."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["joint", "name", "bodypart", "mpjpe_m"])
            for j, err in enumerate(self.per_joint):
                w.writerow([j, JOINT_NAMES[j], bodypart_of(j).value, repr(float(err))])


def evaluate(predictions: dict, records, k=None, nll_values=None) -> EvalReport:
    """Min-of-k report. ``predictions`` maps record id to (n_hyp, 25, 3) poses.

    With ``k``, only the first ``k`` hypotheses of each record count.
    ``nll_values`` optionally maps record id to that record's NLL.
    """
    if not records:
        raise EvalError("no records to evaluate")
    missing = [r.id for r in records if r.id not in predictions]
    if missing:
        raise EvalError(f"no predictions for record ids: {', '.join(missing)}")
    best_errs, joint_errs, per_record, ks = [], [], {}, set()
    for rec in records:
        poses = np.asarray(predictions[rec.id], dtype=np.float64)
        if poses.ndim == 2:
            poses = poses[None]
        if k is not None:
            if len(poses) < k:
                raise EvalError(f"record {rec.id!r} has {len(poses)} hypotheses, fewer than k={k}")
            poses = poses[:k]
        ks.add(len(poses))
        err, i = min_of_k(poses, rec.target_pose)
        best_errs.append(err)
        per_record[rec.id] = err
        joint_errs.append(per_joint_errors(poses[i], rec.target_pose))
    joint_errs = np.stack(joint_errs)
    per_joint = joint_errs.mean(axis=0)
    per_part = {p.value: float(per_joint[list(m)].mean()) for p, m in BODY_PARTS.items()}
    nll_mean = None
    if nll_values:
        nll_mean = float(np.mean([nll_values[r.id] for r in records]))
    return EvalReport(
        mpjpe_mean=float(np.mean(best_errs)),
        pct_below_015=pct_below(best_errs, THRESHOLDS[0]),
        pct_below_025=pct_below(best_errs, THRESHOLDS[1]),
        nll_mean=nll_mean,
        per_bodypart=per_part,
        per_joint=[float(v) for v in per_joint],
        k=k if k is not None else max(ks),
        n_records=len(records),
        per_record=per_record,
    )


assert sum(len(m) for m in BODY_PARTS.values()) == N_JOINTS
