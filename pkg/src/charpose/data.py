"""Dataset records, JSONL I/O, actor splits and a synthetic multi-modal generator.

A record pairs an observed input pose with the characteristic target pose of
the same action. Files are JSON Lines with keys ``id, actor, action, input,
target``; poses are 25 lists of three floats in meters.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .skeleton import PoseError, as_pose


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    actor: str
    action: str
    input_pose: np.ndarray
    target_pose: np.ndarray

    def __post_init__(self):
        for name in ("input_pose", "target_pose"):
            try:
                pose = as_pose(getattr(self, name))
            except PoseError as exc:
                raise DataError(f"record {self.id!r}: {name} {exc}") from None
            pose.setflags(write=False)
            object.__setattr__(self, name, pose)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "actor": self.actor,
            "action": self.action,
            "input": self.input_pose.tolist(),
            "target": self.target_pose.tolist(),
        }

    def __eq__(self, other):
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        return (
            (self.id, self.actor, self.action) == (other.id, other.actor, other.action)
            and np.array_equal(self.input_pose, other.input_pose)
            and np.array_equal(self.target_pose, other.target_pose)
        )

    __hash__ = None


def _record_from_json(obj, where) -> DatasetRecord:
    if not isinstance(obj, dict):
        raise DataError(f"{where}: expected a JSON object")
    missing = {"id", "actor", "action", "input", "target"} - set(obj)
    if missing:
        raise DataError(f"{where}: missing keys {sorted(missing)}")
    try:
        return DatasetRecord(
            str(obj["id"]), str(obj["actor"]), str(obj["action"]), obj["input"], obj["target"]
        )
    except (DataError, ValueError, TypeError) as exc:
        raise DataError(f"{where}: {exc}") from None


def load_dataset(path) -> list:
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            rec = _record_from_json(obj, f"{path}:{lineno}")
            if rec.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate record id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return records


def save_dataset(path, records):
    # json writes floats with repr, so the round trip is value-exact
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def action_vocabulary(records) -> list:
    return sorted({r.action for r in records})


# splits ----------------------------------------------------------------------

@dataclass(frozen=True)
class SplitConfig:
    train_actors: frozenset
    val_actors: frozenset = frozenset()
    test_actors: frozenset = frozenset()

    def __post_init__(self):
        for name in ("train_actors", "val_actors", "test_actors"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        a, b, c = self.train_actors, self.val_actors, self.test_actors
        if a & b or a & c or b & c:
            raise DataError("train/val/test actor sets must be disjoint")


def split_by_actor(records, config: SplitConfig):
    train, val, test = [], [], []
    for rec in records:
        if rec.actor in config.train_actors:
            train.append(rec)
        elif rec.actor in config.val_actors:
            val.append(rec)
        elif rec.actor in config.test_actors:
            test.append(rec)
        else:
            raise DataError(f"record {rec.id!r}: actor {rec.actor!r} is not assigned to a split")
    return train, val, test


# synthetic generator -------------------------------------------------------------

# Standing skeleton, y up, facing +z, person's right side at negative x.
# Mid-Hip sits at the origin.
CANONICAL_POSE = np.array([
    [0.00, 0.62, 0.08],     # 0 Nose
    [0.00, 0.50, 0.00],     # 1 Neck
    [-0.18, 0.48, 0.00],    # 2 R-Shoulder
    [-0.20, 0.20, 0.00],    # 3 R-Elbow
    [-0.21, -0.07, 0.02],   # 4 R-Finger
    [0.18, 0.48, 0.00],     # 5 L-Shoulder
    [0.20, 0.20, 0.00],     # 6 L-Elbow
    [0.21, -0.07, 0.02],    # 7 L-Finger
    [0.00, 0.00, 0.00],     # 8 Mid-Hip
    [-0.09, -0.02, 0.00],   # 9 R-Hip
    [-0.10, -0.45, 0.01],   # 10 R-Knee
    [-0.10, -0.86, -0.01],  # 11 R-Ankle
    [0.09, -0.02, 0.00],    # 12 L-Hip
    [0.10, -0.45, 0.01],    # 13 L-Knee
    [0.10, -0.86, -0.01],   # 14 L-Ankle
    [-0.03, 0.66, 0.07],    # 15 R-Eye
    [0.03, 0.66, 0.07],     # 16 L-Eye
    [-0.07, 0.64, 0.00],    # 17 R-Ear
    [0.07, 0.64, 0.00],     # 18 L-Ear
    [0.08, -0.93, 0.16],    # 19 L-BigToe
    [0.14, -0.93, 0.14],    # 20 L-SmallToe
    [0.10, -0.92, -0.06],   # 21 L-Heel
    [-0.08, -0.93, 0.16],   # 22 R-BigToe
    [-0.14, -0.93, 0.14],   # 23 R-SmallToe
    [-0.10, -0.92, -0.06],  # 24 R-Heel
])

# (shoulder, elbow, finger, elbow pole direction)
_ARMS = {
    "right": (2, 3, 4, np.array([-1.0, -1.0, -0.5])),
    "left": (5, 6, 7, np.array([1.0, -1.0, -0.5])),
}

# Hand positions are relative to the Mid-Hip. "drink" has two target modes:
# the right hand goes to the mouth or out to the side, and the left hand
# follows a different path in each.
DEFAULT_LAYOUT = {
    "jitter": 0.01,
    "contact_jitter": 0.02,
    "translation": 0.5,
    "actors": ["s1", "s2", "s3", "s4"],
    "actions": [
        {
            "name": "drink",
            "contact": {"right": [-0.22, 0.10, 0.35], "left": [0.22, 0.10, 0.35]},
            "modes": [
                {"right": [-0.05, 0.60, 0.15], "left": [0.30, 0.25, 0.30], "shift": [0.0, 0.0, 0.0]},
                {"right": [-0.60, 0.35, 0.15], "left": [0.05, 0.50, 0.45], "shift": [0.0, 0.0, 0.0]},
            ],
        },
        {
            "name": "pass",
            "contact": {"right": [-0.20, 0.15, 0.40]},
            "modes": [{"right": [0.05, 0.30, 0.40], "shift": [0.0, 0.0, 0.06]}],
        },
        {
            "name": "inspect",
            "contact": {"left": [0.25, 0.10, 0.35]},
            "modes": [
                {"right": [-0.10, 0.45, 0.35], "left": [0.10, 0.45, 0.35], "shift": [0.0, 0.0, 0.05]}
            ],
        },
    ],
}


def preset_layout(name: str) -> dict:
    """``default`` (three actions) or ``two-mode`` (the bimodal action only)."""
    layout = copy.deepcopy(DEFAULT_LAYOUT)
    if name == "default":
        return layout
    if name == "two-mode":
        layout["actions"] = [a for a in layout["actions"] if len(a["modes"]) == 2]
        return layout
    raise DataError(f"unknown layout preset {name!r}")


def _vec3(value, where):
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise DataError(f"layout: {where} must be three finite numbers")
    return arr


def validate_layout(layout) -> dict:
    if not isinstance(layout, dict) or not layout.get("actions"):
        raise DataError("layout: needs a non-empty 'actions' list")
    if not layout.get("actors", ["s1"]):
        raise DataError("layout: 'actors' must not be empty")
    for key in ("jitter", "contact_jitter", "translation"):
        if float(layout.get(key, 0.0)) < 0:
            raise DataError(f"layout: {key} must be non-negative")
    names = set()
    for act in layout["actions"]:
        name = act.get("name")
        if not name or name in names:
            raise DataError(f"layout: action names must be unique and non-empty ({name!r})")
        names.add(name)
        modes = act.get("modes", [])
        if len(modes) not in (1, 2):
            raise DataError(f"layout: action {name!r} needs 1 or 2 modes, got {len(modes)}")
        for side, p in act.get("contact", {}).items():
            if side not in _ARMS:
                raise DataError(f"layout: action {name!r} contact side {side!r}")
            _vec3(p, f"{name}.contact.{side}")
        for i, mode in enumerate(modes):
            for key, p in mode.items():
                if key not in ("right", "left", "shift"):
                    raise DataError(f"layout: action {name!r} mode {i} has unknown key {key!r}")
                _vec3(p, f"{name}.modes[{i}].{key}")
    return layout


def two_bone_ik(root, target, a, b, pole):
    """Elbow and end position for a two-segment chain of lengths ``a`` and ``b``.

    Unreachable targets are pulled onto the reachable shell along the
    root-to-target ray.
    """
    d_vec = target - root
    d = float(np.linalg.norm(d_vec))
    n = d_vec / d if d > 1e-12 else np.array([0.0, -1.0, 0.0])
    d = float(np.clip(d, abs(a - b) + 1e-6, a + b - 1e-6))
    cos_a = (a * a + d * d - b * b) / (2 * a * d)
    sin_a = np.sqrt(max(0.0, 1.0 - cos_a * cos_a))
    m = pole - n * (pole @ n)
    m_norm = np.linalg.norm(m)
    if m_norm < 1e-9:
        m = np.cross(n, [0.0, 0.0, 1.0])
        m_norm = np.linalg.norm(m)
    m = m / m_norm
    elbow = root + a * (cos_a * n + sin_a * m)
    end = root + d * n
    return elbow, end


def _place_arms(pose, hands, hip):
    out = pose.copy()
    for side, goal in hands.items():
        s, e, f = _ARMS[side][:3]
        a = np.linalg.norm(pose[e] - pose[s])
        b = np.linalg.norm(pose[f] - pose[e])
        out[e], out[f] = two_bone_ik(pose[s], hip + goal, a, b, _ARMS[side][3])
    return out


def synth_generate(seed: int, n_per_mode: int, layout_spec=None) -> list:
    """Reproducible records; two-mode actions alternate modes record by record.

    Each input pose is the canonical skeleton with per-joint jitter, a random
    horizontal translation and hands placed at the action's contact points.
    The target is a deterministic function of the input: the body shifted by
    the mode's offset with the hands moved to the mode's goals by two-bone IK.
    """
    layout = validate_layout(copy.deepcopy(layout_spec) if layout_spec is not None else DEFAULT_LAYOUT)
    if n_per_mode < 0:
        raise DataError("n_per_mode must be non-negative")
    rng = np.random.default_rng(seed)
    jitter = float(layout.get("jitter", 0.01))
    cjit = float(layout.get("contact_jitter", 0.02))
    trans = float(layout.get("translation", 0.5))
    actors = list(layout.get("actors", ["s1"]))
    records = []
    for act in layout["actions"]:
        modes = act["modes"]
        contact = {k: np.asarray(v, dtype=np.float64) for k, v in act.get("contact", {}).items()}
        for i in range(n_per_mode * len(modes)):
            mode = modes[i % len(modes)]
            offset = np.array([rng.uniform(-trans, trans), 0.0, rng.uniform(-trans, trans)])
            base = CANONICAL_POSE + rng.normal(0.0, jitter, CANONICAL_POSE.shape) + offset
            hip = base[8]
            hands = {k: v + rng.normal(0.0, cjit, 3) for k, v in contact.items()}
            inp = _place_arms(base, hands, hip)
            shift = np.asarray(mode.get("shift", [0.0, 0.0, 0.0]), dtype=np.float64)
            moved = inp + shift
            goals = {k: np.asarray(mode[k], dtype=np.float64) for k in ("right", "left") if k in mode}
            tgt = _place_arms(moved, goals, hip + shift)
            records.append(
                DatasetRecord(f"{act['name']}-{i:04d}", actors[i % len(actors)], act["name"], inp, tgt)
            )
    return records


def mode_of(record: DatasetRecord, layout=None, side="right"):
    """Index of the layout mode whose hand goal is closest to the target's hand."""
    layout = layout or DEFAULT_LAYOUT
    act = next((a for a in layout["actions"] if a["name"] == record.action), None)
    if act is None:
        raise DataError(f"action {record.action!r} not in layout")
    f = _ARMS[side][2]
    rel = record.target_pose[f] - record.target_pose[8]
    best, best_d = None, np.inf
    for i, mode in enumerate(act["modes"]):
        if side not in mode:
            continue
        d = np.linalg.norm(rel - np.asarray(mode[side]))
        if d < best_d:
            best, best_d = i, d
    return best



def mode_targets(record: DatasetRecord, layout=None) -> list:
    """The target pose each mode of the record's action would give for its input."""
    layout = layout or DEFAULT_LAYOUT
    act = next((a for a in layout["actions"] if a["name"] == record.action), None)
    if act is None:
        raise DataError(f"action {record.action!r} not in layout")
    hip = record.input_pose[8]
    out = []
    for mode in act["modes"]:
        shift = np.asarray(mode.get("shift", [0.0, 0.0, 0.0]), dtype=np.float64)
        goals = {k: np.asarray(mode[k], dtype=np.float64) for k in ("right", "left") if k in mode}
        out.append(_place_arms(record.input_pose + shift, goals, hip + shift))
    return out
