"""Command-line entry point: gen-data, train, predict, eval, inspect.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

A run config is a JSON object with optional sections ``training``
(TrainingConfig fields), ``model`` (ModelConfig fields such as embed_dim),
``refinement`` (w_e, w_b, w_a, w_h), ``solver`` (SolverConfig fields),
``split`` (train_actors, val_actors, test_actors) and a top-level ``seed``.
Command-line flags override the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluate as E
from . import heatmap as hm
from . import model as M
from . import refine as R
from . import sampler as S
from . import train as T

log = logging.getLogger("charpose")


class UsageError(Exception):
    """Bad arguments or configuration (exit 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def n_workers() -> int:
    """Worker cap from CHARPOSE_THREADS (default 1)."""
    raw = os.environ.get("CHARPOSE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CHARPOSE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"CHARPOSE_THREADS must be a positive integer, got {raw!r}")
    return n


def _map_records(fn, records):
    """Apply ``fn`` to every record; results come back in input order."""
    n = min(n_workers(), max(len(records), 1))
    if n == 1:
        return [fn(r) for r in records]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, records))


def record_seed(seed: int, record_id: str) -> int:
    """Per-record sampling seed, independent of record order."""
    ss = np.random.SeedSequence([seed, zlib.crc32(record_id.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


# config ------------------------------------------------------------------------------

_SECTIONS = {
    "training": T.TrainingConfig,
    "model": M.ModelConfig,
    "refinement": R.RefinementWeights,
    "solver": R.SolverConfig,
    "split": D.SplitConfig,
}
# model fields fixed by the stage layout
_STAGE_FIELDS = {"out_joint_ids", "n_prior", "head", "use_action_node", "action_vocab_size"}


def load_run_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    unknown = set(cfg) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise UsageError(f"config {path}: unknown keys {sorted(unknown)}")
    for name, cls in _SECTIONS.items():
        sec = cfg.get(name, {})
        if not isinstance(sec, dict):
            raise UsageError(f"config {path}: {name!r} must be an object")
        bad = set(sec) - {f.name for f in fields(cls)}
        if name == "model":
            bad |= set(sec) & _STAGE_FIELDS
        if bad:
            raise UsageError(f"config {path}: unknown or fixed {name} fields {sorted(bad)}")
    return cfg


def _build(cls, section: dict, overrides: dict):
    kw = dict(section)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    for k in ("train_actors", "val_actors", "test_actors", "smoothing", "decoder_channels"):
        if k in kw:
            kw[k] = tuple(kw[k])
    try:
        return cls(**kw)
    except (TypeError, ValueError, T.TrainingError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from None


def _echo(effective: dict, out_dir=None):
    text = json.dumps(effective, indent=2, sort_keys=True)
    log.info("effective config:\n%s", text)
    if out_dir is not None:
        Path(out_dir, "config.json").write_text(text + "\n")


# commands ----------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.n_per_mode < 0:
        raise UsageError("--n-per-mode must be non-negative")
    if args.layout in ("default", "two-mode"):
        layout = D.preset_layout(args.layout)
    else:
        try:
            layout = json.loads(Path(args.layout).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read layout {args.layout}: {exc}") from None
    try:
        records = D.synth_generate(args.seed, args.n_per_mode, layout)
    except D.DataError as exc:
        raise UsageError(str(exc)) from None
    D.save_dataset(args.out, records)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _variant(args):
    if args.independent and args.deterministic:
        raise UsageError("--independent and --deterministic are mutually exclusive")
    if args.deterministic:
        return "deterministic"
    return "independent" if args.independent else "autoregressive"


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    variant = _variant(args)
    loss = args.loss
    if variant == "deterministic":
        if loss not in (None, "det-l2"):
            raise UsageError("--deterministic trains with the det-l2 loss")
        loss = "det-l2"
    seed = args.seed if args.seed is not None else cfg.get("seed")
    tcfg = _build(T.TrainingConfig, cfg.get("training", {}), {
        "seed": seed, "loss_kind": loss, "learning_rate": args.lr, "warmup_steps": args.warmup,
        "batch_size": args.batch_size, "max_steps": args.steps, "patience": args.patience,
        "eval_every": args.eval_every,
    })
    model_kw = dict(cfg.get("model", {}))
    if args.embed_dim is not None:
        model_kw["embed_dim"] = args.embed_dim

    records = D.load_dataset(args.data)
    val = []
    if "split" in cfg:
        split = _build(D.SplitConfig, cfg["split"], {})
        records, val, _ = D.split_by_actor(records, split)
    if not records:
        raise UsageError("the training split is empty")
    vocab = D.action_vocabulary(records + val)
    try:
        configs = T.stage_configs(variant, tcfg.loss_kind, args.action_label, len(vocab), **model_kw)
    except (T.TrainingError, M.ModelError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo({
        "command": "train", "variant": variant, "action_label": args.action_label,
        "training": tcfg.to_dict(), "model": {n: c.to_dict() for n, c in configs.items()},
        "data": str(args.data), "n_train": len(records), "n_val": len(val),
    }, out)
    log.info("training %s variant with %s loss on %d records", variant, tcfg.loss_kind, len(records))

    def report(trainers):
        for name, tr in trainers.items():
            if tr.history:
                log.info("%s step %d loss %.6f", name, tr.step, tr.history[-1][2])

    T.train(records, configs, tcfg, out, variant=variant, val_records=val,
            log_timing=args.log_timing, resume=args.resume, action_vocab=vocab, on_round=report)
    print(f"wrote checkpoints to {out}")
    return 0


def _predict_one(models, rec, args, weights, solver, seed):
    s = S.sample_poses(models, rec.input_pose, args.k, record_seed(seed, rec.id),
                       rec.action if args.action else None)
    poses = s.poses.copy()
    if not args.no_refine:
        for i in range(s.k):
            heat = s.heatmaps(i) if weights.w_h > 0 else None
            prob = R.RefinementProblem.from_sample(poses[i], rec.input_pose, heat, s.transform, weights)
            poses[i] = R.refine(prob, solver).pose
    return poses


def dump_heatmaps(models, rec, out_dir):
    """Teacher-forced heatmaps of one record, one file per joint, under ``out_dir/<id>/``."""
    raw, head = S.teacher_forced_heatmaps(models, rec)
    t = hm.GridTransform.for_pose(rec.input_pose)
    d = Path(out_dir, rec.id)
    d.mkdir(parents=True, exist_ok=True)
    for j, h in enumerate(raw):
        h = h.reshape((hm.RES,) * 3 + h.shape[-1:])
        if head == "bins":
            hm.write_heatmap(d / f"j{j:02d}.chm", h, hm.Form.LOGITS, t.voxel_size)
        else:
            hm.write_heatmap(d / f"j{j:02d}.chm", np.clip(h[..., 0], 0, 1), hm.Form.CONTINUOUS, t.voxel_size)


def read_heatmap_set(heatmap_dir, record_id):
    """(25 grids, continuous?) for one record from a heatmap directory."""
    d = Path(heatmap_dir, record_id)
    grids, forms = [], set()
    for j in range(25):
        p = d / f"j{j:02d}.chm"
        if not p.exists():
            raise FileNotFoundError(f"missing heatmap {p}")
        v, form, _ = hm.read_heatmap(p)
        grids.append(v)
        forms.add(form)
    if len(forms) != 1:
        raise hm.HeatmapError(f"{d}: mixed heatmap forms")
    return np.stack(grids), forms.pop() == hm.Form.CONTINUOUS


def cmd_predict(args) -> int:
    if args.k < 1:
        raise UsageError("--k must be at least 1")
    cfg = load_run_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    weights = _build(R.RefinementWeights, cfg.get("refinement", {}), {"w_h": args.w_h})
    solver = _build(R.SolverConfig, cfg.get("solver", {}), {})
    _echo({"command": "predict", "seed": seed, "k": args.k, "refine": not args.no_refine,
           "refinement": asdict(weights), "solver": asdict(solver), "models": str(args.models)})
    models = S.PoseModels.from_dir(args.models)
    records = sorted(D.load_dataset(args.data), key=lambda r: r.id)
    results = _map_records(lambda r: _predict_one(models, r, args, weights, solver, seed), records)
    rows = []
    for rec, poses in zip(records, results):
        rows.extend(S.prediction_rows(rec.id, poses))
    S.write_predictions(args.out, rows)
    if args.heatmap_dir:
        if models.variant == "deterministic":
            raise UsageError("the deterministic variant has no heatmaps to dump")
        _map_records(lambda r: dump_heatmaps(models, r, args.heatmap_dir), records)
    print(f"wrote {len(rows)} hypotheses for {len(records)} records to {args.out}")
    return 0


def cmd_eval(args) -> int:
    records = sorted(D.load_dataset(args.data), key=lambda r: r.id)
    if args.baseline:
        if args.baseline == "zero-velocity":
            preds = {r.id: E.zero_velocity_baseline(r.input_pose)[None] for r in records}
        else:
            if not args.train_data:
                raise UsageError(f"--baseline {args.baseline} needs --train-data")
            mode = "global" if args.baseline == "avg-global" else "per-action"
            base = E.average_pose_baseline(D.load_dataset(args.train_data), mode)
            preds = {r.id: base(r.action)[None] for r in records}
        k = None
    else:
        if not args.pred:
            raise UsageError("eval needs --pred or --baseline")
        preds = S.read_predictions(args.pred)
        extra = sorted(set(preds) - {r.id for r in records})
        if extra:
            raise E.EvalError(f"predictions for unknown record ids: {', '.join(extra)}")
        k = args.k
    nll_values = None
    if args.heatmap_dir:
        nll_values = {}
        for rec in records:
            grids, continuous = read_heatmap_set(args.heatmap_dir, rec.id)
            t = hm.GridTransform.for_pose(rec.input_pose)
            nll_values[rec.id] = E.nll(grids, rec.target_pose, t, continuous)
    report = E.evaluate(preds, records, k=k, nll_values=nll_values)
    if args.out:
        report.write_json(args.out)
    if args.joint_csv:
        report.write_joint_csv(args.joint_csv)
    summary = {"mpjpe": report.mpjpe_mean, "pct_below_0.15": report.pct_below_015,
               "pct_below_0.25": report.pct_below_025, "nll": report.nll_mean,
               "k": report.k, "n_records": report.n_records}
    print(json.dumps(summary, sort_keys=True))
    return 0


_INSPECT_STAGES = ("teacher-forced", "right", "left", "body", "independent")


def _inspect_grid(args):
    """(continuous grid in [0,1] or logits-derived, voxel_size) to inspect."""
    if args.heatmap:
        v, form, vs = hm.read_heatmap(args.heatmap)
        return (hm.expected_value_grid(v) if form == hm.Form.LOGITS else v.astype(np.float64)), vs, v, form
    if not (args.models and args.data and args.record):
        raise UsageError("inspect needs --heatmap, or --models, --data and --record")
    if not 0 <= args.joint < 25:
        raise UsageError(f"--joint must be in 0..24, got {args.joint}")
    models = S.PoseModels.from_dir(args.models)
    by_id = {r.id: r for r in D.load_dataset(args.data)}
    if args.record not in by_id:
        raise UsageError(f"record {args.record!r} not in {args.data}")
    rec = by_id[args.record]
    raw, head = S.teacher_forced_heatmaps(models, rec)
    h = raw[args.joint].reshape((hm.RES,) * 3 + raw.shape[-1:])
    t = hm.GridTransform.for_pose(rec.input_pose)
    if head == "bins":
        return hm.expected_value_grid(h), t.voxel_size, h, hm.Form.LOGITS
    g = np.clip(h[..., 0], 0.0, 1.0)
    return g, t.voxel_size, g, hm.Form.CONTINUOUS


def overlay_image(grid, axis, index, survivors=None):
    """8-bit slice scaled so the grid maximum maps to 255.

    With ``survivors`` (an NMS output), the heatmap is drawn at half intensity
    and every surviving voxel in the slice is set to 255.
    """
    g = np.asarray(grid, dtype=np.float64)
    top = g.max()
    scaled = g / top if top > 0 else g
    if survivors is None:
        return hm.slice_image(scaled, axis, index)
    img = hm.slice_image(scaled * 0.5, axis, index)
    mark = np.take(np.asarray(survivors) > 0, index, axis=axis)
    img[mark] = 255
    return img


def cmd_inspect(args) -> int:
    if not 0 <= args.axis < 3:
        raise UsageError(f"--axis must be 0, 1 or 2, got {args.axis}")
    if args.index is not None and not 0 <= args.index < hm.RES:
        raise UsageError(f"--index must be in 0..{hm.RES - 1}, got {args.index}")
    grid, voxel_size, raw, form = _inspect_grid(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.format == "bin":
        hm.write_heatmap(out / "heatmap.chm", raw, form, voxel_size)
        print(f"wrote {out / 'heatmap.chm'}")
        return 0
    survivors = hm.nms(grid) if args.nms else None
    indices = range(hm.RES) if args.index is None else [args.index]
    for i in indices:
        hm.write_pgm(out / f"axis{args.axis}_{i:02d}.pgm", overlay_image(grid, args.axis, i, survivors))
    print(f"wrote {len(indices)} slices to {out}")
    return 0


# parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="charpose", description="Characteristic 3D pose forecasting.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic JSONL dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-per-mode", type=int, default=10)
    g.add_argument("--layout", default="default", help="'default', 'two-mode' or a layout JSON file")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a pipeline variant")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="model directory")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--embed-dim", type=int)
    t.add_argument("--loss", choices=[k.value for k in T.LossKind])
    t.add_argument("--independent", action="store_true", help="one unconditioned stage for all joints")
    t.add_argument("--deterministic", action="store_true", help="regress offsets instead of heatmaps")
    t.add_argument("--action-label", action="store_true", help="add the action node")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--log-timing", action="store_true", help="fill the wall_ms log column")
    t.set_defaults(fn=cmd_train)

    pr = sub.add_parser("predict", help="sample (and refine) pose hypotheses")
    pr.add_argument("--models", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--config")
    pr.add_argument("--seed", type=int)
    pr.add_argument("--k", type=int, default=6)
    pr.add_argument("--no-refine", action="store_true")
    pr.add_argument("--w-h", type=float, help="heatmap term weight for refinement")
    pr.add_argument("--action", action="store_true", help="pass record actions (action-node models)")
    pr.add_argument("--heatmap-dir", help="also dump teacher-forced heatmaps here")
    pr.set_defaults(fn=cmd_predict)

    e = sub.add_parser("eval", help="score predictions or a baseline")
    e.add_argument("--data", required=True)
    e.add_argument("--pred")
    e.add_argument("--k", type=int)
    e.add_argument("--baseline", choices=["zero-velocity", "avg-global", "avg-per-action"])
    e.add_argument("--train-data")
    e.add_argument("--heatmap-dir", help="heatmaps for NLL, as written by predict")
    e.add_argument("--out", help="JSON report")
    e.add_argument("--joint-csv", help="per-joint CSV")
    e.add_argument("--seed", type=int, help="accepted for uniformity; eval is deterministic")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("inspect", help="dump a heatmap or PGM slices")
    i.add_argument("--out", required=True, help="output directory")
    i.add_argument("--heatmap", help="heatmap file to inspect")
    i.add_argument("--models")
    i.add_argument("--data")
    i.add_argument("--record")
    i.add_argument("--joint", type=int, default=4)
    i.add_argument("--axis", type=int, default=2)
    i.add_argument("--index", type=int, help="single slice (default: all)")
    i.add_argument("--format", choices=["pgm", "bin"], default="pgm")
    i.add_argument("--nms", action="store_true", help="mark NMS survivors")
    i.add_argument("--seed", type=int, help="accepted for uniformity; inspect is deterministic")
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        n_workers()
        return args.fn(args)
    except UsageError as exc:
        print(f"charpose {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"charpose {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
