"""Autoregressive pose sampling: right finger, then left finger, then the body.

Hypotheses that share the same conditioning share one network pass and one
call to :func:`heatmap.sample_voxel`, so the leader of each group takes the
top local maximum of its conditional heatmap and the rest follow the
top-maxima / categorical split. Seeds for each group are derived from
``(seed, stage, conditioning voxels)`` through numpy's SeedSequence.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import heatmap as hm
from . import model as M
from .skeleton import LEFT_FINGER, N_JOINTS, RIGHT_FINGER


class SamplerError(RuntimeError):
    pass


_STAGE_CODES = {"right": 0, "left": 1, "body": 2, "independent": 3}


@dataclass
class PoseModels:
    """Trained stages of one pipeline variant plus the action vocabulary."""

    variant: str
    stages: dict
    actions: list = field(default_factory=list)
    loss: str = "ce"

    def __post_init__(self):
        need = {
            "autoregressive": ("right", "left", "body"),
            "independent": ("independent",),
            "deterministic": ("deterministic",),
        }.get(self.variant)
        if need is None:
            raise SamplerError(f"unknown pipeline variant {self.variant!r}")
        missing = [n for n in need if n not in self.stages]
        if missing:
            raise SamplerError(f"missing stage parameters for {missing}")

    @classmethod
    def from_params(cls, variant, stage_params: dict, actions=(), loss="ce"):
        stages = {n: M.Stage(cfg, params) for n, (cfg, params) in stage_params.items()}
        return cls(variant, stages, list(actions), loss)

    @classmethod
    def from_dir(cls, path):
        path = Path(path)
        mf = path / "manifest.json"
        if not mf.exists():
            raise SamplerError(f"{path}: no manifest.json (not a trained model directory)")
        manifest = json.loads(mf.read_text())
        stages = {}
        for name, fname in manifest["stages"].items():
            ckpt = path / fname
            if not ckpt.exists():
                raise SamplerError(f"missing checkpoint {ckpt}")
            stages[name] = M.load_stage(ckpt)
        return cls(manifest["variant"], stages, manifest.get("actions", []), manifest.get("loss", "ce"))

    def action_id(self, action):
        """Vocabulary index for stages with an action node, else None."""
        if not any(s.config.use_action_node for s in self.stages.values()):
            return None
        if action is None:
            raise SamplerError("these models were trained with the action node; an action is required")
        if isinstance(action, (int, np.integer)):
            return int(action)
        try:
            return self.actions.index(action)
        except ValueError:
            raise SamplerError(f"action {action!r} is not in the training vocabulary") from None


def _grids(out, cfg: M.ModelConfig):
    """(sampling grids, refinement grids) for one stage output (n, 16³, C)."""
    if cfg.head == "bins":
        return (np.stack([hm.sampling_grid(o) for o in out]),
                np.stack([hm.expected_value_grid(o) for o in out]))
    g = np.clip(out[..., 0], 0.0, 1.0)
    return g, g


@dataclass
class SampleSet:
    """``k`` pose hypotheses with references to the heatmaps they came from.

    ``sources[i]`` lists, per joint, the key of the heatmap stack in
    ``grids`` and the row within it. ``grids`` holds refinement (expected
    value) grids.
    """

    poses: np.ndarray
    seed: object
    transform: hm.GridTransform
    sources: list = field(default_factory=list, repr=False)
    grids: dict = field(default_factory=dict, repr=False)

    @property
    def k(self):
        return len(self.poses)

    def heatmaps(self, i):
        """(25, 16, 16, 16) refinement grids for hypothesis ``i``, or None."""
        if not self.sources:
            return None
        return np.stack([self.grids[key][row] for key, row in self.sources[i]])


class _Runner:
    """Evaluates stages on one input with a cache keyed by conditioning."""

    def __init__(self, models: PoseModels, input_pose, action_id):
        self.models = models
        self.input = np.asarray(input_pose, dtype=np.float64)
        self.action_id = action_id
        self.cache = {}

    def grids(self, name, key, priors):
        ck = (name, key)
        if ck not in self.cache:
            stage = self.models.stages[name]
            out = stage.predict(self.input, priors, self.action_id)
            self.cache[ck] = _grids(out, stage.config)
        return self.cache[ck]


def _groups(voxels):
    """Map each distinct voxel (first-appearance order) to the hypothesis indices holding it."""
    groups = {}
    for i, v in enumerate(map(tuple, np.asarray(voxels).tolist())):
        groups.setdefault(v, []).append(i)
    return groups


def _check_k(models, variant, k):
    if models.variant != variant:
        raise SamplerError(f"{variant} sampling needs the {variant} variant, got {models.variant}")
    if k < 1:
        raise SamplerError(f"k must be at least 1, got {k}")


def _finger_groups(run: _Runner, t, k, seed):
    """Yield ``(rv, lv, hypothesis indices)`` for the two finger stages."""
    samp_r, _ = run.grids("right", (), [])
    right_vox = hm.sample_voxel(samp_r[0], k, [seed, _STAGE_CODES["right"]])
    for rv, hyps in _groups(right_vox).items():
        samp_l, _ = run.grids("left", rv, [(RIGHT_FINGER, t.voxel_center(rv))])
        left_vox = hm.sample_voxel(samp_l[0], len(hyps), [seed, _STAGE_CODES["left"], *rv])
        for lv, sub in _groups(left_vox).items():
            yield rv, lv, [hyps[i] for i in sub]


def sample_fingers(models: PoseModels, input_pose, k: int, seed=0, action_id=None) -> np.ndarray:
    """(k, 2, 3) right and left finger positions, without running the body stage.

    Identical to the finger joints of :func:`sample_pose_set` for the same seed.
    """
    _check_k(models, "autoregressive", k)
    run = _Runner(models, input_pose, action_id)
    t = hm.GridTransform.for_pose(run.input)
    out = np.zeros((k, 2, 3))
    for rv, lv, members in _finger_groups(run, t, k, seed):
        out[members, 0] = t.voxel_center(rv)
        out[members, 1] = t.voxel_center(lv)
    return out


def sample_pose_set(models: PoseModels, input_pose, k: int, seed=0, action_id=None) -> SampleSet:
    """``k`` hypotheses drawn right finger, left finger, then the other 23 joints."""
    _check_k(models, "autoregressive", k)
    run = _Runner(models, input_pose, action_id)
    t = hm.GridTransform.for_pose(run.input)
    poses = np.zeros((k, N_JOINTS, 3))
    sources = [[None] * N_JOINTS for _ in range(k)]
    body_ids = models.stages["body"].config.out_joint_ids
    for rv, lv, members in _finger_groups(run, t, k, seed):
        p_r, p_l = t.voxel_center(rv), t.voxel_center(lv)
        samp_b, _ = run.grids("body", rv + lv, [(RIGHT_FINGER, p_r), (LEFT_FINGER, p_l)])
        for h in members:
            poses[h, RIGHT_FINGER] = p_r
            poses[h, LEFT_FINGER] = p_l
            sources[h][RIGHT_FINGER] = (("right", ()), 0)
            sources[h][LEFT_FINGER] = (("left", rv), 0)
        for row, j in enumerate(body_ids):
            vox = hm.sample_voxel(samp_b[row], len(members), [seed, _STAGE_CODES["body"], *rv, *lv, j])
            for h, v in zip(members, vox):
                poses[h, j] = t.voxel_center(v)
                sources[h][j] = (("body", rv + lv), row)
    grids = {key: ref for key, (_, ref) in run.cache.items()}
    return SampleSet(poses, seed, t, sources, grids)


def sample_pose_set_independent(models: PoseModels, input_pose, k: int, seed=0, action_id=None) -> SampleSet:
    """All 25 joints from one unconditioned pass, each sampled on its own."""
    _check_k(models, "independent", k)
    run = _Runner(models, input_pose, action_id)
    t = hm.GridTransform.for_pose(run.input)
    samp, ref = run.grids("independent", (), [])
    ids = models.stages["independent"].config.out_joint_ids
    poses = np.zeros((k, N_JOINTS, 3))
    sources = [[None] * N_JOINTS for _ in range(k)]
    for row, j in enumerate(ids):
        vox = hm.sample_voxel(samp[row], k, [seed, _STAGE_CODES["independent"], j])
        poses[:, j] = t.voxel_center(vox)
        for h in range(k):
            sources[h][j] = (("independent", ()), row)
    return SampleSet(poses, seed, t, sources, {("independent", ()): ref})


def sample_poses(models: PoseModels, input_pose, k: int, seed=0, action=None) -> SampleSet:
    """Dispatch on the pipeline variant; the deterministic head yields one pose repeated."""
    aid = models.action_id(action)
    if models.variant == "autoregressive":
        return sample_pose_set(models, input_pose, k, seed, aid)
    if models.variant == "independent":
        return sample_pose_set_independent(models, input_pose, k, seed, aid)
    stage = models.stages["deterministic"]
    pose = np.asarray(input_pose, dtype=np.float64) + stage.predict(input_pose, (), aid)
    return SampleSet(np.repeat(pose[None], k, axis=0), seed, hm.GridTransform.for_pose(input_pose))


def teacher_forced_heatmaps(models: PoseModels, record, action=None):
    """Raw outputs for all 25 joints with ground-truth prior joints: ((25, 16³, C), head)."""
    aid = models.action_id(action if action is not None else (record.action if models.actions else None))
    out = None
    if models.variant == "independent":
        st = models.stages["independent"]
        raw = st.predict(record.input_pose, (), aid)
        out = np.zeros((N_JOINTS,) + raw.shape[1:])
        out[list(st.config.out_joint_ids)] = raw
        return out, st.config.head
    if models.variant != "autoregressive":
        raise SamplerError("the deterministic head has no heatmaps")
    tgt = record.target_pose
    parts = [
        ("right", []),
        ("left", [(RIGHT_FINGER, tgt[RIGHT_FINGER])]),
        ("body", [(RIGHT_FINGER, tgt[RIGHT_FINGER]), (LEFT_FINGER, tgt[LEFT_FINGER])]),
    ]
    for name, priors in parts:
        st = models.stages[name]
        raw = st.predict(record.input_pose, priors, aid)
        if out is None:
            out = np.zeros((N_JOINTS,) + raw.shape[1:])
        out[list(st.config.out_joint_ids)] = raw
    return out, models.stages["right"].config.head


# output ---------------------------------------------------------------------------

def prediction_rows(record_id, poses):
    return [
        {"record_id": record_id, "hypothesis_index": i, "joints": np.asarray(p).tolist()}
        for i, p in enumerate(poses)
    ]


def write_predictions(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_predictions(path) -> dict:
    """``record_id -> (k, 25, 3)`` array ordered by hypothesis index."""
    by_id = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                joints = np.asarray(row["joints"], dtype=np.float64)
                rid, idx = str(row["record_id"]), int(row["hypothesis_index"])
            except (ValueError, KeyError, TypeError) as exc:
                raise SamplerError(f"{path}:{lineno}: bad prediction row ({exc})") from None
            if joints.shape != (N_JOINTS, 3):
                raise SamplerError(f"{path}:{lineno}: joints must be 25x3")
            by_id.setdefault(rid, {})[idx] = joints
    return {rid: np.stack([h[i] for i in sorted(h)]) for rid, h in by_id.items()}


def validation_min_of_k(models: PoseModels, records, k=6, seed=0) -> float:
    """Mean min-of-k MPJPE over ``records`` using raw (unrefined) samples."""
    errs = []
    for rec in records:
        s = sample_poses(models, rec.input_pose, k, seed, rec.action)
        errs.append(np.linalg.norm(s.poses - rec.target_pose, axis=-1).mean(axis=-1).min())
    return float(np.mean(errs))
