"""Losses, class weights, Adam with linear warmup and the teacher-forced training loop.

Every stage trains on its own parameter set. Conditioned stages see the
ground-truth positions of their prior joints (teacher forcing): the left-hand
stage gets the target right finger, the body stage gets both fingers.

Parameters and Adam moments are kept on the float32 grid after every update,
so float32 checkpoints hold the exact training state and resuming continues
bit for bit.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import model as M
from . import numeric as nm
from .heatmap import N_BINS, RES, GridTransform, discretize, gaussian_target, world_to_voxel
from .skeleton import LEFT_FINGER, RIGHT_FINGER

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    pass


class LossKind(str, Enum):
    CROSS_ENTROPY = "ce"
    L1 = "l1"
    L2 = "l2"
    DETERMINISTIC_L2 = "det-l2"


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.002
    warmup_steps: int = 4000
    batch_size: int = 250
    max_steps: int = 20000
    loss_kind: str = "ce"
    bin0_weight: float = 0.1
    seed: int = 0
    micro_batch: int = 16   # records per forward pass; bounds peak memory
    patience: int | None = None
    eval_every: int = 500

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind).value)
        if not self.learning_rate > 0 or self.warmup_steps < 0:
            raise TrainingError("learning_rate must be positive and warmup_steps non-negative")
        if self.batch_size < 1 or self.max_steps < 0 or self.micro_batch < 1 or self.eval_every < 1:
            raise TrainingError("batch_size, micro_batch and eval_every must be positive")
        if self.bin0_weight < 0:
            raise TrainingError("bin0_weight must be non-negative")
        if self.patience is not None and self.patience < 1:
            raise TrainingError("patience must be positive")

    def to_dict(self):
        return asdict(self)


# class weights and losses -------------------------------------------------------

def class_weights(training_targets, bin0_weight=0.1) -> np.ndarray:
    """``1 / ln(1 + n_c)`` for bins 1..9 rescaled to mean 1; bin 0 gets ``bin0_weight``.

    ``training_targets`` is an iterable of integer bin grids; counts are global.
    A bin that never occurs gets the largest of the other weights.
    """
    counts = np.zeros(N_BINS, dtype=np.int64)
    seen = False
    for grid in training_targets:
        g = np.asarray(grid)
        if g.size and (g.min() < 0 or g.max() >= N_BINS):
            raise TrainingError("bin grid holds indices outside 0..9")
        counts += np.bincount(g.reshape(-1), minlength=N_BINS)
        seen = True
    if not seen:
        raise TrainingError("class weights need at least one target grid")
    n = counts[1:].astype(np.float64)
    present = n > 0
    if not present.any():
        raise TrainingError("no voxel falls in bins 1..9")
    w = np.zeros(N_BINS - 1)
    w[present] = 1.0 / np.log1p(n[present])
    w[present] /= w[present].mean()
    if not present.all():
        log.warning("bins %s never occur; using the largest weight for them",
                    [int(c) + 1 for c in np.flatnonzero(~present)])
        w[~present] = w[present].max()
        w /= w.mean()
    return np.concatenate([[bin0_weight], w])


def weighted_cross_entropy(logits, targets, weights) -> float:
    """Mean over joints and voxels of ``w[t] * -log softmax(logits)[t]``."""
    return float(nm.weighted_cross_entropy(np.asarray(logits), targets, weights).data)


def continuous_heatmap_loss(pred, target, kind) -> float:
    """Mean absolute (``l1``) or mean squared (``l2``) voxel difference."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise TrainingError(f"heatmap shapes differ: {p.shape} vs {t.shape}")
    d = p - t
    kind = LossKind(kind)
    if kind == LossKind.L1:
        return float(np.abs(d).mean())
    if kind == LossKind.L2:
        return float((d * d).mean())
    raise TrainingError(f"{kind.value} is not a continuous heatmap loss")


def lr_schedule(step, learning_rate=0.002, warmup_steps=4000) -> float:
    if step < 1:
        raise TrainingError(f"steps count from 1, got {step}")
    if warmup_steps == 0:
        return learning_rate
    return learning_rate * min(1.0, step / warmup_steps)


def _loss_tensor(out, targets, kind: LossKind, weights):
    if kind == LossKind.CROSS_ENTROPY:
        return nm.weighted_cross_entropy(out, targets, weights)
    if kind == LossKind.DETERMINISTIC_L2:
        return nm.mean_all(nm.square(nm.sub(out, targets)))
    d = nm.sub(nm.reshape(out, targets.shape), targets)
    return nm.mean_all(nm.absolute(d) if kind == LossKind.L1 else nm.square(d))


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class Adam:
    """Adam with bias correction; state is rounded to float32 after each step."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m = _f32(b1 * self.m[k] + (1.0 - b1) * g)
            v = _f32(b2 * self.v[k] + (1.0 - b2) * g * g)
            self.m[k], self.v[k] = m, v
            params[k] = _f32(params[k] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps))

    def state_arrays(self) -> dict:
        out = {f"adam.m/{k}": v for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict, t: int):
        for k in self.m:
            self.m[k] = arrays[f"adam.m/{k}"].copy()
            self.v[k] = arrays[f"adam.v/{k}"].copy()
        self.t = int(t)


# stage data ------------------------------------------------------------------------

STAGE_NAMES = ("right", "left", "body")


def stage_priors(record, cfg: M.ModelConfig):
    """Teacher-forced prior joints taken from the ground-truth target."""
    ids = {0: (), 1: (RIGHT_FINGER,), 2: (RIGHT_FINGER, LEFT_FINGER)}.get(cfg.n_prior)
    if ids is None:
        raise TrainingError(f"no teacher-forcing rule for {cfg.n_prior} prior joints")
    return [(j, record.target_pose[j]) for j in ids]


def target_voxels(record, joint_ids):
    t = GridTransform.for_pose(record.input_pose)
    out = []
    for j in joint_ids:
        v = world_to_voxel(t, record.target_pose[j])
        if v is None:
            raise TrainingError(f"record {record.id!r}: target joint {j} lies outside the grid")
        out.append(v)
    return out


def stage_targets(records, cfg: M.ModelConfig, kind: LossKind):
    """Per-record training targets for one stage.

    Bin grids (B, n_out, 16, 16, 16) for cross entropy, continuous Gaussian
    grids for the l1/l2 ablations, and offsets (B, 25, 3) for the
    deterministic head.
    """
    kind = LossKind(kind)
    if kind == LossKind.DETERMINISTIC_L2:
        return np.stack([r.target_pose - r.input_pose for r in records])
    grids = np.zeros((len(records), cfg.n_out_joints, RES, RES, RES),
                     dtype=np.int8 if kind == LossKind.CROSS_ENTROPY else np.float64)
    for b, rec in enumerate(records):
        for i, v in enumerate(target_voxels(rec, cfg.out_joint_ids)):
            g = gaussian_target(v)
            grids[b, i] = discretize(g) if kind == LossKind.CROSS_ENTROPY else g
    return grids


def _slice_inputs(inp: M.StageInputs, idx):
    acts = None if inp.action_ids is None else inp.action_ids[idx]
    return M.StageInputs(inp.positions[idx], inp.prior_ids[idx], acts)


def loss_and_grads(params, cfg, inp, targets, kind, weights=None, micro_batch=16,
                   train=False, rng=None):
    """Batch-mean loss and gradients, accumulated over micro-batches."""
    kind = LossKind(kind)
    B = inp.positions.shape[0]
    T = M.as_tensors(params, trainable=True)
    names = list(T)
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    for s in range(0, B, micro_batch):
        idx = np.arange(s, min(B, s + micro_batch))
        frac = len(idx) / B
        with nm.Tape() as tape:
            out, _ = M.forward(_slice_inputs(inp, idx), T, cfg, train=train, rng=rng)
            loss = _loss_tensor(out, targets[idx], kind, weights)
        gs = tape.gradients(loss, [T[k] for k in names])
        total += frac * float(loss.data)
        for k, g in zip(names, gs):
            grads[k] += frac * g
    return total, grads


# training loop -------------------------------------------------------------------------

class StageTrainer:
    """Trains one stage; stepping is resumable from a checkpoint."""

    def __init__(self, name, cfg: M.ModelConfig, records, tcfg: TrainingConfig, stage_index=0,
                 action_vocab=None, log_path=None, log_timing=False, weights=None):
        if not records:
            raise TrainingError("training needs a non-empty training split")
        self.name, self.cfg, self.tcfg = name, cfg, tcfg
        self.stage_index = stage_index
        self.kind = LossKind(tcfg.loss_kind)
        self.records = list(records)
        self.action_vocab = list(action_vocab or [])
        acts = None
        if cfg.use_action_node:
            lookup = {a: i for i, a in enumerate(self.action_vocab)}
            acts = [lookup[r.action] for r in self.records]
        self.inputs = M.make_inputs(
            cfg, np.stack([r.input_pose for r in self.records]),
            [stage_priors(r, cfg) for r in self.records], acts,
        )
        self.targets = stage_targets(self.records, cfg, self.kind)
        if self.kind == LossKind.CROSS_ENTROPY and weights is None:
            weights = class_weights(self.targets, tcfg.bin0_weight)
        self.weights = weights
        self.params = M.init_params(cfg, seed=[tcfg.seed, stage_index])
        self.adam = Adam(self.params)
        self.step = 0
        self.history = []
        self._perms = {}
        self.log_path = Path(log_path) if log_path else None
        self.log_timing = log_timing
        if self.log_path is not None and not self.log_path.exists():
            self.log_path.write_text("step,lr,loss,wall_ms\n")

    def _perm(self, epoch):
        if epoch not in self._perms:
            rng = np.random.default_rng([self.tcfg.seed, self.stage_index, epoch])
            self._perms = {epoch: rng.permutation(len(self.records))}
        return self._perms[epoch]

    def batch_indices(self, step):
        n = len(self.records)
        bs = min(self.tcfg.batch_size, n)
        start = (step - 1) * bs
        return np.array([self._perm(p // n)[p % n] for p in range(start, start + bs)])

    def train_step(self) -> float:
        step = self.step + 1
        t0 = time.perf_counter()
        idx = self.batch_indices(step)
        lr = lr_schedule(step, self.tcfg.learning_rate, self.tcfg.warmup_steps)
        rng = np.random.default_rng([self.tcfg.seed, self.stage_index, step, 1])
        loss, grads = loss_and_grads(
            self.params, self.cfg, _slice_inputs(self.inputs, idx), self.targets[idx],
            self.kind, self.weights, self.tcfg.micro_batch, train=True, rng=rng,
        )
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(f"stage {self.name}: non-finite loss at step {step}")
        self.adam.step(self.params, grads, lr)
        self.step = step
        self.history.append((step, lr, loss))
        if self.log_path is not None:
            wall = f"{1000 * (time.perf_counter() - t0):.1f}" if self.log_timing else ""
            with open(self.log_path, "a") as fh:
                fh.write(f"{step},{lr!r},{loss!r},{wall}\n")
        return loss

    def run(self, n_steps=None):
        end = self.tcfg.max_steps if n_steps is None else min(self.tcfg.max_steps, self.step + n_steps)
        while self.step < end:
            self.train_step()
        return self

    @property
    def done(self):
        return self.step >= self.tcfg.max_steps

    def meta(self):
        return {
            "stage": self.name,
            "step": self.step,
            "stage_index": self.stage_index,
            "training": self.tcfg.to_dict(),
            "class_weights": None if self.weights is None else [float(w) for w in self.weights],
        }

    def save(self, path):
        arrays = dict(self.params)
        arrays.update(self.adam.state_arrays())
        M.write_checkpoint(path, self.cfg, arrays, self.meta())

    def load(self, path):
        cfg, arrays, meta = M.read_checkpoint(path)
        if cfg != self.cfg:
            raise TrainingError(f"{path}: checkpoint config does not match stage {self.name}")
        self.params = {k: arrays[k] for k in M.param_shapes(cfg)}
        self.adam.load_state(arrays, meta["step"])
        self.step = int(meta["step"])
        if meta.get("class_weights") is not None:
            self.weights = np.asarray(meta["class_weights"])
        return self


# pipelines -----------------------------------------------------------------------------

VARIANTS = ("autoregressive", "independent", "deterministic")


def stage_configs(variant="autoregressive", loss_kind="ce", use_action_node=False,
                  action_vocab_size=29, **model_kw) -> dict:
    """Model configs keyed by stage name for a pipeline variant."""
    kind = LossKind(loss_kind)
    if variant == "deterministic":
        if kind != LossKind.DETERMINISTIC_L2:
            raise TrainingError("the deterministic variant trains with the det-l2 loss")
        head = "offsets"
    else:
        if kind == LossKind.DETERMINISTIC_L2:
            raise TrainingError("det-l2 needs the deterministic variant")
        head = "bins" if kind == LossKind.CROSS_ENTROPY else "continuous"
    kw = dict(model_kw, head=head, use_action_node=use_action_node,
              action_vocab_size=action_vocab_size)
    if variant == "autoregressive":
        return {"right": M.right_hand_config(**kw), "left": M.left_hand_config(**kw),
                "body": M.body_config(**kw)}
    if variant == "independent":
        return {"independent": M.independent_config(**kw)}
    if variant == "deterministic":
        return {"deterministic": M.deterministic_config(**kw)}
    raise TrainingError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def train(records, configs: dict, tcfg: TrainingConfig, out_dir=None, variant="autoregressive",
          val_records=None, log_timing=False, resume=False, action_vocab=None,
          on_round=None) -> dict:
    """Train every stage in ``configs``; returns parameters keyed by stage name.

    Stages are independent, so they advance round by round (``eval_every``
    steps each). With ``patience`` and validation records, the round with the
    best validation min-of-6 MPJPE is kept and training stops after
    ``patience`` rounds without improvement. With ``out_dir``, each stage
    writes ``<stage>.ckpt`` and ``<stage>.log.csv`` and a ``manifest.json``
    describes the pipeline.
    """
    if not records:
        raise TrainingError("training needs a non-empty training split")
    vocab = list(action_vocab) if action_vocab is not None else sorted({r.action for r in records})
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    trainers = {}
    for i, (name, cfg) in enumerate(configs.items()):
        log_path = out / f"{name}.log.csv" if out is not None else None
        ckpt = out / f"{name}.ckpt" if out is not None else None
        if log_path is not None and not resume and log_path.exists():
            log_path.unlink()
        tr = StageTrainer(name, cfg, records, tcfg, i, vocab, log_path, log_timing)
        if resume and ckpt is not None and ckpt.exists():
            tr.load(ckpt)
        trainers[name] = tr

    best_score, best_params, stale = math.inf, None, 0
    while not all(t.done for t in trainers.values()):
        for tr in trainers.values():
            tr.run(tcfg.eval_every)
        if on_round is not None:
            on_round(trainers)
        if tcfg.patience is not None and val_records:
            from .sampler import PoseModels, validation_min_of_k
            models = PoseModels.from_params(variant, {n: (t.cfg, t.params) for n, t in trainers.items()}, vocab)
            score = validation_min_of_k(models, val_records, k=6, seed=tcfg.seed)
            log.info("step %d: validation min-of-6 MPJPE %.4f", max(t.step for t in trainers.values()), score)
            if score < best_score:
                best_score, stale = score, 0
                best_params = {n: dict(t.params) for n, t in trainers.items()}
            else:
                stale += 1
                if stale >= tcfg.patience:
                    break
    params = {n: dict(t.params) for n, t in trainers.items()}
    if best_params is not None:
        params = best_params
    if out is not None:
        for name, tr in trainers.items():
            tr.save(out / f"{name}.ckpt")
        files = {name: f"{name}.ckpt" for name in trainers}
        if best_params is not None:
            for name, tr in trainers.items():
                files[name] = f"{name}.best.ckpt"
                M.write_checkpoint(out / files[name], tr.cfg, best_params[name], tr.meta())
        write_manifest(out, variant, tcfg.loss_kind, files, vocab)
    return params


def write_manifest(out_dir, variant, loss_kind, files: dict, actions):
    """``files`` maps stage names to checkpoint file names inside ``out_dir``."""
    manifest = {
        "variant": variant,
        "loss": LossKind(loss_kind).value,
        "stages": dict(files),
        "actions": list(actions),
    }
    Path(out_dir, "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def with_overrides(tcfg: TrainingConfig, **kw) -> TrainingConfig:
    return replace(tcfg, **{k: v for k, v in kw.items() if v is not None})
