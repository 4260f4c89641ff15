"""OpenPose BODY_25 joint layout, SMPL-X correspondences and skeleton geometry.

A pose is a plain ``(25, 3)`` float array in meters. Helpers here never
mutate their inputs.
"""
from __future__ import annotations

from enum import Enum

import numpy as np

N_JOINTS = 25
ROOT = 8
RIGHT_FINGER = 4
LEFT_FINGER = 7
END_EFFECTORS = (RIGHT_FINGER, LEFT_FINGER)

JOINT_NAMES = (
    "Nose", "Neck", "R-Shoulder", "R-Elbow", "R-Finger",
    "L-Shoulder", "L-Elbow", "L-Finger", "Mid-Hip", "R-Hip",
    "R-Knee", "R-Ankle", "L-Hip", "L-Knee", "L-Ankle",
    "R-Eye", "L-Eye", "R-Ear", "L-Ear", "L-BigToe",
    "L-SmallToe", "L-Heel", "R-BigToe", "R-SmallToe", "R-Heel",
)

# OpenPose index -> SMPL-X joint index.
SMPLX_INDEX = (
    55, 12, 17, 19, 42,
    16, 18, 27, 0, 2,
    5, 8, 1, 4, 7,
    24, 23, 58, 59, 60,
    61, 62, 63, 64, 65,
)

# Parent -> child, rooted at Mid-Hip.
BODY25_BONES = (
    (8, 1), (1, 0), (0, 15), (0, 16), (15, 17), (16, 18),
    (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7),
    (8, 9), (9, 10), (10, 11), (11, 22), (22, 23), (11, 24),
    (8, 12), (12, 13), (13, 14), (14, 19), (19, 20), (14, 21),
)


class BodyPart(str, Enum):
    RIGHT_ARM = "RightArm"
    LEFT_ARM = "LeftArm"
    RIGHT_LEG = "RightLeg"
    LEFT_LEG = "LeftLeg"
    HIP = "Hip"
    HEAD = "Head"


BODY_PARTS = {
    BodyPart.RIGHT_ARM: (2, 3, 4),
    BodyPart.LEFT_ARM: (5, 6, 7),
    BodyPart.RIGHT_LEG: (9, 10, 11, 22, 23, 24),
    BodyPart.LEFT_LEG: (12, 13, 14, 19, 20, 21),
    BodyPart.HIP: (8,),
    BodyPart.HEAD: (0, 1, 15, 16, 17, 18),
}

_PART_OF_JOINT = {j: part for part, members in BODY_PARTS.items() for j in members}


class PoseError(ValueError):
    pass


def as_pose(joints) -> np.ndarray:
    """Validate and return ``joints`` as a float64 ``(25, 3)`` array."""
    arr = np.asarray(joints, dtype=np.float64)
    if arr.shape != (N_JOINTS, 3):
        raise PoseError(f"pose must have shape (25, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise PoseError("pose has non-finite coordinates")
    return arr


def smplx_to_openpose(source_joints) -> np.ndarray:
    src = np.asarray(source_joints, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 3:
        raise PoseError(f"SMPL-X joints must have shape (n, 3), got {src.shape}")
    for idx in SMPLX_INDEX:
        if idx >= len(src):
            raise PoseError(
                f"SMPL-X source has {len(src)} joints; index {idx} is missing"
            )
    return as_pose(src[list(SMPLX_INDEX)])


def bodypart_of(joint_index: int) -> BodyPart:
    if not 0 <= int(joint_index) < N_JOINTS:
        raise IndexError(f"joint index {joint_index} out of range 0..24")
    return _PART_OF_JOINT[int(joint_index)]


def validate_bones(bones=BODY25_BONES, n_joints=N_JOINTS, root=ROOT):
    """Check that ``bones`` is a spanning tree rooted at ``root``."""
    if len(bones) != n_joints - 1:
        raise ValueError(f"expected {n_joints - 1} bones, got {len(bones)}")
    parents = {}
    for p, c in bones:
        if c in parents:
            raise ValueError(f"joint {c} has two parents")
        if c == root:
            raise ValueError("root cannot be a child")
        parents[c] = p
    for j in range(n_joints):
        seen = set()
        node = j
        while node != root:
            if node in seen or node not in parents:
                raise ValueError(f"joint {j} is not connected to the root")
            seen.add(node)
            node = parents[node]
    return parents


def bone_lengths(pose, bones=BODY25_BONES) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    e = np.asarray(bones)
    return np.linalg.norm(pose[e[:, 1]] - pose[e[:, 0]], axis=1)


def angle_pairs(bones=BODY25_BONES):
    """(joint, parent-bone index, child-bone index) for every internal joint.

    Ordered by child bone, so the list is stable for a fixed bone set.
    """
    incoming = {c: i for i, (_, c) in enumerate(bones)}
    pairs = []
    for ci, (p, _) in enumerate(bones):
        if p in incoming:
            pairs.append((p, incoming[p], ci))
    return tuple(pairs)


def angle_triplets(bones=BODY25_BONES) -> np.ndarray:
    """``(parent, joint, child)`` joint triplets matching :func:`angle_pairs`."""
    return np.array(
        [(bones[pi][0], j, bones[ci][1]) for j, pi, ci in angle_pairs(bones)],
        dtype=np.int64,
    ).reshape(-1, 3)


def joint_angles(pose, bones=BODY25_BONES):
    """Interior angles at every internal joint.

    The angle is measured between ``parent - joint`` and ``child - joint``, so a
    straight limb gives pi. Returns ``(angles, defined)``; entries with a
    zero-length incident bone have ``defined == False`` and angle 0.
    """
    pose = np.asarray(pose, dtype=np.float64)
    tri = angle_triplets(bones)
    u = pose[tri[:, 0]] - pose[tri[:, 1]]
    v = pose[tri[:, 2]] - pose[tri[:, 1]]
    defined = (np.linalg.norm(u, axis=1) > 0) & (np.linalg.norm(v, axis=1) > 0)
    cross = np.linalg.norm(np.cross(u, v), axis=1)
    dot = np.einsum("ij,ij->i", u, v)
    angles = np.where(defined, np.arctan2(cross, dot), 0.0)
    return angles, defined
