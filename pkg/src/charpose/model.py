"""Heatmap prediction network: joint encoder, attention, 3-D deconvolution decoder.

One network predicts heatmaps for a fixed set of output joints (a *stage*).
The autoregressive pipeline uses three stages: right finger, left finger
conditioned on the right finger, and the remaining 23 joints conditioned on
both fingers.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numeric as nm
from .heatmap import N_BINS, RES, GridTransform
from .skeleton import LEFT_FINGER, N_JOINTS, RIGHT_FINGER

BODY_JOINTS = tuple(j for j in range(N_JOINTS) if j not in (RIGHT_FINGER, LEFT_FINGER))
HEADS = ("bins", "continuous", "offsets")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    out_joint_ids: tuple = (RIGHT_FINGER,)
    n_prior: int = 0
    embed_dim: int = 64
    prob_bins: int = N_BINS
    grid_res: int = RES
    use_action_node: bool = False
    action_vocab_size: int = 29
    dropout_p: float = 0.0
    head: str = "bins"
    decoder_channels: tuple = (32, 32, 16, 16)

    def __post_init__(self):
        object.__setattr__(self, "out_joint_ids", tuple(int(j) for j in self.out_joint_ids))
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        if self.prob_bins != N_BINS:
            raise ModelError(f"prob_bins must be {N_BINS}")
        if self.grid_res != RES:
            raise ModelError(f"grid_res must be {RES}")
        if self.head not in HEADS:
            raise ModelError(f"head must be one of {HEADS}, got {self.head!r}")
        if not self.out_joint_ids or len(set(self.out_joint_ids)) != len(self.out_joint_ids):
            raise ModelError("out_joint_ids must be non-empty and unique")
        if self.n_prior < 0 or self.embed_dim < 1 or not 0.0 <= self.dropout_p < 1.0:
            raise ModelError("invalid n_prior, embed_dim or dropout_p")
        if len(self.decoder_channels) != 4:
            raise ModelError("decoder_channels needs four entries")

    @property
    def n_out_joints(self):
        return len(self.out_joint_ids)

    @property
    def out_channels(self):
        return self.prob_bins if self.head == "bins" else 1

    @property
    def n_nodes(self):
        return N_JOINTS + self.n_prior + int(self.use_action_node)

    def to_dict(self):
        d = asdict(self)
        d["out_joint_ids"] = list(self.out_joint_ids)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def right_hand_config(**kw):
    return ModelConfig(out_joint_ids=(RIGHT_FINGER,), n_prior=0, **kw)


def left_hand_config(**kw):
    return ModelConfig(out_joint_ids=(LEFT_FINGER,), n_prior=1, **kw)


def body_config(**kw):
    return ModelConfig(out_joint_ids=BODY_JOINTS, n_prior=2, **kw)


def independent_config(**kw):
    return ModelConfig(out_joint_ids=tuple(range(N_JOINTS)), n_prior=0, **kw)


def deterministic_config(**kw):
    kw.setdefault("head", "offsets")
    return ModelConfig(out_joint_ids=tuple(range(N_JOINTS)), n_prior=0, **kw)


# parameters ------------------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> dict:
    D = cfg.embed_dim
    c0, c1, c2, c3 = cfg.decoder_channels
    shapes = {
        "enc.w1": (3, D), "enc.b1": (D,),
        "enc.w2": (D, D), "enc.b2": (D,),
        "enc.ln.g": (D,), "enc.ln.b": (D,),
        "emb.input": (N_JOINTS, D),
        "emb.prior": (N_JOINTS, D),
        "attn.query": (cfg.n_out_joints, D),
        "attn.wk": (D, D), "attn.wv": (D, D),
        "attn.ln.g": (D,), "attn.ln.b": (D,),
    }
    if cfg.use_action_node:
        shapes["emb.action"] = (cfg.action_vocab_size, D)
    if cfg.head == "offsets":
        shapes.update({"det.w1": (D, D), "det.b1": (D,), "det.w2": (D, 3), "det.b2": (3,)})
    else:
        shapes.update({
            "dec.seed.w": (D, 8 * c0), "dec.seed.b": (8 * c0,),
            "dec.t1.w": (c0, 4, 4, 4, c1), "dec.t1.b": (c1,),
            "dec.c1.w": (3, 3, 3, c1, c1), "dec.c1.b": (c1,),
            "dec.t2.w": (c1, 4, 4, 4, c2), "dec.t2.b": (c2,),
            "dec.c2.w": (3, 3, 3, c2, c2), "dec.c2.b": (c2,),
            "dec.t3.w": (c2, 4, 4, 4, cfg.out_channels), "dec.t3.b": (cfg.out_channels,),
        })
    return shapes


def _fan_in(name, shape):
    if name.startswith("dec.t"):
        # each transposed-conv output sees cin * (ks/stride)^3 inputs
        return shape[0] * 8
    if name.startswith("dec.c"):
        return shape[0] * shape[1] * shape[2] * shape[3]
    return shape[0]


def init_params(cfg: ModelConfig, seed=0) -> dict:
    """He-normal weights, zero biases, unit/zero layer-norm affine, small embeddings."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".ln.g"):
            v = np.ones(shape)
        elif name.endswith(".b") or name.split(".")[-1] in ("b1", "b2"):
            v = np.zeros(shape)
        elif name.startswith(("emb.", "attn.query")):
            v = rng.normal(0.0, 0.5, shape)
        else:
            v = rng.normal(0.0, math.sqrt(2.0 / _fan_in(name, shape)), shape)
        # parameters live on the float32 grid so checkpoints are exact
        params[name] = v.astype(np.float32).astype(np.float64)
    return params


def check_params(cfg: ModelConfig, params: dict):
    expected = param_shapes(cfg)
    missing = set(expected) - set(params)
    if missing:
        raise ModelError(f"missing parameters: {sorted(missing)}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ModelError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


# forward pass ------------------------------------------------------------------

@dataclass
class StageInputs:
    """A batch of stage inputs expressed in the grid frame.

    positions: (B, 25 + n_prior, 3) node positions relative to the grid centre.
    prior_ids: (B, n_prior) joint ids of the prior nodes.
    action_ids: (B,) action indices, or None.
    """

    positions: np.ndarray
    prior_ids: np.ndarray
    action_ids: np.ndarray | None = None


def make_inputs(cfg: ModelConfig, input_poses, priors=None, action_ids=None) -> StageInputs:
    """Assemble a batch from world-space poses and ``(joint_id, point)`` priors.

    ``input_poses`` is (B, 25, 3); ``priors`` is a length-B list of lists.
    Every node is re-expressed relative to its example's grid centre.
    """
    poses = np.asarray(input_poses, dtype=np.float64)
    if poses.ndim == 2:
        poses = poses[None]
        priors = [priors or []]
        action_ids = None if action_ids is None else [action_ids]
    B = len(poses)
    priors = priors if priors is not None else [[] for _ in range(B)]
    if len(priors) != B:
        raise ModelError("one prior list per input pose is required")
    pos = np.zeros((B, N_JOINTS + cfg.n_prior, 3))
    ids = np.zeros((B, cfg.n_prior), dtype=np.int64)
    for b in range(B):
        if len(priors[b]) != cfg.n_prior:
            raise ModelError(f"stage expects {cfg.n_prior} prior joints, got {len(priors[b])}")
        center = GridTransform.for_pose(poses[b]).center
        pos[b, :N_JOINTS] = poses[b] - center
        for i, (jid, point) in enumerate(priors[b]):
            if not 0 <= int(jid) < N_JOINTS:
                raise ModelError(f"prior joint id {jid} out of range")
            ids[b, i] = int(jid)
            pos[b, N_JOINTS + i] = np.asarray(point, dtype=np.float64) - center
    if cfg.use_action_node:
        if action_ids is None:
            raise ModelError("stage uses an action node but no action id was given")
        acts = np.asarray(action_ids, dtype=np.int64).reshape(B)
        if np.any(acts < 0) or np.any(acts >= cfg.action_vocab_size):
            raise ModelError("action id out of range")
    else:
        if action_ids is not None and any(a is not None for a in np.atleast_1d(action_ids)):
            raise ModelError("stage has no action node but an action id was given")
        acts = None
    return StageInputs(pos, ids, acts)


def encode(inp: StageInputs, T: dict, cfg: ModelConfig, train=False, rng=None):
    """Node embeddings (B, 25 + n_prior [+1], D)."""
    B = inp.positions.shape[0]
    h = nm.relu(nm.affine(nm.constant(inp.positions), T["enc.w1"], T["enc.b1"]))
    h = nm.affine(h, T["enc.w2"], T["enc.b2"])
    emb = nm.take_rows(T["emb.input"], np.tile(np.arange(N_JOINTS), (B, 1)))
    if cfg.n_prior:
        emb = nm.concat([emb, nm.take_rows(T["emb.prior"], inp.prior_ids)], axis=1)
    h = nm.add(h, emb)
    if cfg.use_action_node:
        act = nm.take_rows(T["emb.action"], inp.action_ids.reshape(B, 1))
        h = nm.concat([h, act], axis=1)
    h = nm.layer_norm(h, T["enc.ln.g"], T["enc.ln.b"])
    return nm.dropout(h, cfg.dropout_p, rng, train=train)


def attention(q, k, v):
    """``softmax(q kᵀ / sqrt(D)) v``; returns ``(output, attention map)``.

    ``q`` is (n, D) or (B, n, D); ``k`` and ``v`` are (N, D) or (B, N, D).
    """
    q, k, v = (t if isinstance(t, nm.Tensor) else nm.Tensor(t) for t in (q, k, v))
    D = q.shape[-1]
    if k.shape[-1] != D or v.shape[-2] != k.shape[-2]:
        raise nm.ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = nm.scale(nm.matmul(q, nm.swapaxes(k, -1, -2)), 1.0 / math.sqrt(D))
    a = nm.softmax(scores, axis=-1)
    return nm.matmul(a, v), a


def attend(nodes, T, cfg: ModelConfig):
    k = nm.matmul(nodes, T["attn.wk"])
    v = nm.matmul(nodes, T["attn.wv"])
    out, a = attention(T["attn.query"], k, v)
    return nm.layer_norm(out, T["attn.ln.g"], T["attn.ln.b"]), a


def decode_heatmaps(attended, T, cfg: ModelConfig):
    """(B, n_out, D) -> (B, n_out, 16, 16, 16, out_channels) logits."""
    B, n = attended.shape[0], attended.shape[1]
    if n != cfg.n_out_joints:
        raise nm.ShapeError(f"decoder expects {cfg.n_out_joints} rows, got {n}")
    c0 = cfg.decoder_channels[0]
    z = nm.relu(nm.affine(attended, T["dec.seed.w"], T["dec.seed.b"]))
    z = nm.reshape(z, (B * n, 2, 2, 2, c0))
    z = nm.relu(nm.conv_transpose3d(z, T["dec.t1.w"], T["dec.t1.b"], stride=2, pad=1))
    z = nm.relu(nm.conv3d(z, T["dec.c1.w"], T["dec.c1.b"], pad=1))
    z = nm.relu(nm.conv_transpose3d(z, T["dec.t2.w"], T["dec.t2.b"], stride=2, pad=1))
    z = nm.relu(nm.conv3d(z, T["dec.c2.w"], T["dec.c2.b"], pad=1))
    z = nm.conv_transpose3d(z, T["dec.t3.w"], T["dec.t3.b"], stride=2, pad=1)
    return nm.reshape(z, (B, n, RES, RES, RES, cfg.out_channels))


def offsets_head(attended, T):
    h = nm.relu(nm.affine(attended, T["det.w1"], T["det.b1"]))
    return nm.affine(h, T["det.w2"], T["det.b2"])


def forward(inp: StageInputs, T: dict, cfg: ModelConfig, train=False, rng=None):
    """Stage output tensor and attention map. ``T`` maps names to Tensors."""
    nodes = encode(inp, T, cfg, train=train, rng=rng)
    attended, a = attend(nodes, T, cfg)
    if cfg.head == "offsets":
        return offsets_head(attended, T), a
    return decode_heatmaps(attended, T, cfg), a


def as_tensors(params: dict, trainable=False) -> dict:
    return {k: nm.Tensor(v, requires_grad=trainable, name=k) for k, v in params.items()}


@dataclass
class Stage:
    """A trained stage: configuration plus parameters, ready for inference."""

    config: ModelConfig
    params: dict = field(repr=False)

    def __post_init__(self):
        check_params(self.config, self.params)
        self._tensors = as_tensors(self.params)

    def predict(self, input_pose, priors=(), action_id=None) -> np.ndarray:
        """Raw network output for one example: (n_out, 16, 16, 16, C) or (25, 3) offsets."""
        inp = make_inputs(self.config, input_pose, list(priors), action_id)
        out, _ = forward(inp, self._tensors, self.config)
        return out.data[0]

    def predict_batch(self, input_poses, priors, action_ids=None) -> np.ndarray:
        inp = make_inputs(self.config, input_poses, priors, action_ids)
        out, _ = forward(inp, self._tensors, self.config)
        return out.data

    def attention_map(self, input_pose, priors=(), action_id=None) -> np.ndarray:
        inp = make_inputs(self.config, input_pose, list(priors), action_id)
        nodes = encode(inp, self._tensors, self.config)
        _, a = attend(nodes, self._tensors, self.config)
        return a.data[0]


def predict_heatmaps(input_pose, prior_joints, action_id, params, config) -> np.ndarray:
    return Stage(config, params).predict(input_pose, prior_joints, action_id)


def deterministic_head(input_pose, params, config) -> np.ndarray:
    """Input pose plus regressed per-joint offsets."""
    if config.head != "offsets" or "det.w2" not in params:
        raise ModelError("deterministic head weights are not present")
    offsets = Stage(config, params).predict(input_pose)
    return np.asarray(input_pose, dtype=np.float64) + offsets


# checkpoints -------------------------------------------------------------------

CKPT_MAGIC = b"CPCK"
CKPT_VERSION = 1


def write_checkpoint(path, config: ModelConfig, tensors: dict, meta=None):
    """Write config and named f32 arrays.

    Layout: magic, version u32, config length u32, config JSON (ModelConfig
    fields plus an optional ``_meta`` object), record count u32, then per
    record: name length u32, name bytes, rank u32, extents u32[rank], f32 data.
    """
    block = config.to_dict()
    if meta:
        block["_meta"] = meta
    cfg_bytes = json.dumps(block, sort_keys=True).encode("utf-8")
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg_bytes)), cfg_bytes]
    out.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def read_checkpoint(path):
    """Inverse of :func:`write_checkpoint`: ``(config, arrays, meta)``; arrays are float64."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    block = json.loads(raw[off:off + n].decode("utf-8"))
    off += n
    meta = block.pop("_meta", None)
    config = ModelConfig.from_dict(block)
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + ln].decode("utf-8")
        off += ln
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        arrays[name] = arr.astype(np.float64)
    return config, arrays, meta


def load_stage(path) -> Stage:
    config, arrays, _ = read_checkpoint(path)
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    return Stage(config, params)
