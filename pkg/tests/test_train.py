import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from charpose import heatmap as hm
from charpose import model as M
from charpose import train as T

from conftest import TINY_MODEL


@given(st.integers(1, 100000), st.integers(0, 5000))
def test_lr_schedule_linear_warmup(step, warmup):
    lr = T.lr_schedule(step, 0.002, warmup)
    expect = 0.002 if warmup == 0 else 0.002 * min(1.0, step / warmup)
    assert lr == expect and 0 < lr <= 0.002


def test_lr_schedule_rejects_step_zero():
    with pytest.raises(T.TrainingError):
        T.lr_schedule(0)


def test_class_weights_inverse_log_counts():
    grids = [np.array([0, 0, 5, 5, 5, 9, 6, 7, 8, 1, 2, 3, 4])]
    w = T.class_weights(grids, 0.1)
    n = np.array([1, 1, 1, 1, 3, 1, 1, 1, 1], dtype=float)
    raw = 1 / np.log1p(n)
    assert w[0] == 0.1
    assert np.allclose(w[1:], raw / raw.mean())
    assert w[5] < w[6]


def test_class_weights_warn_for_missing_bins(caplog):
    target = hm.discretize(hm.gaussian_target((8, 8, 8)))
    w = T.class_weights([target])
    assert "never occur" in caplog.text
    assert abs(w[1:].mean() - 1) < 1e-12 and np.all(w[1:5] == w[1:].max())


def test_class_weights_errors():
    with pytest.raises(T.TrainingError):
        T.class_weights([])
    with pytest.raises(T.TrainingError):
        T.class_weights([np.zeros(5, dtype=int)])
    with pytest.raises(T.TrainingError):
        T.class_weights([np.array([10])])


def test_continuous_losses():
    p, t = np.array([0.0, 0.5]), np.array([1.0, 0.5])
    assert T.continuous_heatmap_loss(p, t, "l1") == 0.5
    assert T.continuous_heatmap_loss(p, t, "l2") == 0.5
    with pytest.raises(T.TrainingError):
        T.continuous_heatmap_loss(p, t, "ce")


def test_weighted_ce_uniform_logits_is_ln10():
    logits = np.zeros((2, 16, 16, 16, 10))
    targets = np.zeros((2, 16, 16, 16), dtype=int)
    assert abs(T.weighted_cross_entropy(logits, targets, np.ones(10)) - math.log(10)) < 1e-12


def test_adam_state_stays_on_float32_grid():
    params = {"w": np.array([0.3, -0.7])}
    opt = T.Adam(params)
    for _ in range(3):
        opt.step(params, {"w": np.array([0.1234567, -2.0])}, 0.01)
    for a in [params["w"], opt.m["w"], opt.v["w"]]:
        assert np.array_equal(a, a.astype(np.float32).astype(np.float64))


def test_teacher_forcing_priors(small_records):
    rec = small_records[0]
    cfgs = T.stage_configs(**TINY_MODEL)
    assert T.stage_priors(rec, cfgs["right"]) == []
    (j, p), = T.stage_priors(rec, cfgs["left"])
    assert j == 4 and np.array_equal(p, rec.target_pose[4])
    assert [j for j, _ in T.stage_priors(rec, cfgs["body"])] == [4, 7]


def test_stage_targets_kinds(small_records):
    cfg = T.stage_configs(**TINY_MODEL)["right"]
    bins = T.stage_targets(small_records[:2], cfg, "ce")
    cont = T.stage_targets(small_records[:2], cfg, "l2")
    assert bins.dtype == np.int8 and bins.shape == (2, 1, 16, 16, 16)
    assert np.array_equal(hm.discretize(cont[0, 0]), bins[0, 0])
    off = T.stage_targets(small_records[:2], M.deterministic_config(**TINY_MODEL), "det-l2")
    assert np.allclose(off[0], small_records[0].target_pose - small_records[0].input_pose)


def test_target_outside_grid_raises(small_records):
    rec = small_records[0]
    far = rec.target_pose.copy()
    far[4] += [5.0, 0, 0]
    bad = type(rec)(rec.id, rec.actor, rec.action, rec.input_pose, far)
    with pytest.raises(T.TrainingError):
        T.target_voxels(bad, (4,))


def test_variant_loss_combinations():
    assert set(T.stage_configs("independent")) == {"independent"}
    assert T.stage_configs("autoregressive", "l1")["body"].head == "continuous"
    assert T.stage_configs("deterministic", "det-l2")["deterministic"].head == "offsets"
    with pytest.raises(T.TrainingError):
        T.stage_configs("deterministic", "ce")
    with pytest.raises(T.TrainingError):
        T.stage_configs("autoregressive", "det-l2")


def test_batches_cycle_through_epoch_permutations(small_records):
    cfg = T.stage_configs(**TINY_MODEL)["right"]
    tcfg = T.TrainingConfig(batch_size=4, max_steps=10)
    tr = T.StageTrainer("right", cfg, small_records, tcfg)
    n = len(small_records)
    seen = np.concatenate([tr.batch_indices(s) for s in range(1, n // 4 + 1)])
    assert sorted(seen) == list(range(n))


@pytest.mark.parametrize("loss", ["ce", "l1", "l2"])
def test_short_training_reduces_loss(small_records, loss):
    cfg = T.stage_configs(loss_kind=loss, **TINY_MODEL)["right"]
    tcfg = T.TrainingConfig(learning_rate=0.01, warmup_steps=0, max_steps=15, loss_kind=loss)
    tr = T.StageTrainer("right", cfg, small_records, tcfg).run()
    losses = [h[2] for h in tr.history]
    assert losses[-1] < losses[0]


def test_deterministic_variant_trains(small_records):
    cfg = T.stage_configs("deterministic", "det-l2", **TINY_MODEL)["deterministic"]
    tcfg = T.TrainingConfig(learning_rate=0.01, warmup_steps=0, max_steps=20, loss_kind="det-l2")
    tr = T.StageTrainer("deterministic", cfg, small_records, tcfg).run()
    assert tr.history[-1][2] < tr.history[0][2]


def test_divergence_raises(small_records):
    cfg = T.stage_configs(**TINY_MODEL)["right"]
    tr = T.StageTrainer("right", cfg, small_records, T.TrainingConfig(max_steps=1))
    tr.params["dec.t3.b"] = tr.params["dec.t3.b"] + np.nan
    with pytest.raises(T.TrainingDiverged):
        tr.train_step()


def test_resume_continues_bit_exactly(small_records, tmp_path):
    cfg = T.stage_configs(**TINY_MODEL)["left"]
    tcfg = T.TrainingConfig(warmup_steps=3, max_steps=6, batch_size=3)
    full = T.StageTrainer("left", cfg, small_records, tcfg, 1).run()
    half = T.StageTrainer("left", cfg, small_records, tcfg, 1).run(3)
    half.save(tmp_path / "h.ckpt")
    resumed = T.StageTrainer("left", cfg, small_records, tcfg, 1)
    resumed.load(tmp_path / "h.ckpt")
    resumed.run()
    assert [h[2] for h in resumed.history] == [h[2] for h in full.history[3:]]
    assert all(np.array_equal(full.params[k], resumed.params[k]) for k in full.params)


def test_train_writes_manifest_logs_and_checkpoints(small_records, tmp_path):
    tcfg = T.TrainingConfig(warmup_steps=1, max_steps=2, eval_every=1, batch_size=4)
    T.train(small_records, T.stage_configs(**TINY_MODEL), tcfg, tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == sorted(["manifest.json"] + [f"{s}.{e}" for s in T.STAGE_NAMES for e in ("ckpt", "log.csv")])
    lines = (tmp_path / "right.log.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss,wall_ms" and len(lines) == 3


def test_early_stopping_writes_best_checkpoints(small_records, tmp_path):
    tcfg = T.TrainingConfig(warmup_steps=1, max_steps=4, eval_every=1, batch_size=4, patience=1)
    T.train(small_records[:6], T.stage_configs(**TINY_MODEL), tcfg, tmp_path,
            val_records=small_records[6:])
    assert (tmp_path / "body.best.ckpt").exists()
    assert "best" in (tmp_path / "manifest.json").read_text()
