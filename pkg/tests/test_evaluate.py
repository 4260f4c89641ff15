import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from charpose import data as D
from charpose import evaluate as E
from charpose import heatmap as hm

import oracles

coords = st.floats(-3, 3, allow_nan=False)
poses = arrays(np.float64, (25, 3), elements=coords)
REC = D.synth_generate(2, 1)


def test_mpjpe_hand_cases():
    p = REC[0].target_pose
    assert E.mpjpe(p, p) == 0.0
    assert abs(E.mpjpe(p + [0.1, 0, 0], p) - 0.1) < 1e-12
    q = p.copy()
    q[5, 2] += 0.25
    assert abs(E.mpjpe(q, p) - 0.01) < 1e-12
    assert abs(E.mpjpe(q, p, squared=True) - 0.0625 / 25) < 1e-15


@given(poses, poses, arrays(np.float64, (3,), elements=coords))
def test_mpjpe_metric_properties(a, b, s):
    d = E.mpjpe(a, b)
    assert d >= 0 and abs(d - E.mpjpe(b, a)) < 1e-12
    assert abs(E.mpjpe(a + s, b + s) - d) < 1e-9
    assert abs(d - oracles.mpjpe(a, b)) < 1e-9


@given(st.lists(poses, min_size=1, max_size=6), poses)
def test_min_of_k_matches_scan(samples, target):
    best, i = E.min_of_k(np.stack(samples), target)
    errs = [oracles.mpjpe(s, target) for s in samples]
    assert abs(best - min(errs)) < 1e-9
    assert i == min(j for j, e in enumerate(errs) if abs(e - best) < 1e-9)


def test_min_of_k_ties_and_exact_hit():
    t = REC[0].target_pose
    s = np.stack([t + 0.1, t, t])
    assert E.min_of_k(s, t) == (0.0, 1)


def test_pct_below_is_strict():
    assert E.pct_below([0.0, 0.0], 0.15) == 100.0
    assert E.pct_below([0.1, 0.2], 0.15) == 50.0
    assert E.pct_below([0.15], 0.15) == 0.0
    with pytest.raises(E.EvalError):
        E.pct_below([], 0.15)


def test_uniform_heatmap_nll_is_ln_4096():
    rec = REC[0]
    t = hm.GridTransform.for_pose(rec.input_pose)
    logits = np.zeros((25, 16, 16, 16, 10))
    assert abs(E.nll(logits, rec.target_pose, t) - math.log(4096)) < 1e-9
    cont = np.full((25, 16, 16, 16), 0.3)
    assert abs(E.nll(cont, rec.target_pose, t, continuous=True) - math.log(4096)) < 1e-9


def test_nll_peaked_heatmap_approaches_zero():
    rec = REC[0]
    t = hm.GridTransform.for_pose(rec.input_pose)
    cont = np.zeros((25, 16, 16, 16))
    for j in range(25):
        cont[(j,) + hm.world_to_voxel(t, rec.target_pose[j])] = 1.0
    assert E.nll(cont, rec.target_pose, t, continuous=True) < 1e-5


def test_nll_rejects_target_outside_grid():
    rec = REC[0]
    far = rec.target_pose + 3.0
    with pytest.raises(E.EvalError):
        E.nll(np.zeros((25, 16, 16, 16, 10)), far, hm.GridTransform.for_pose(rec.input_pose))


def test_zero_velocity_baseline():
    p = REC[0].input_pose
    z = E.zero_velocity_baseline(p)
    assert np.array_equal(z, p) and E.mpjpe(z, p) == 0.0


def test_average_pose_baselines(caplog):
    r = REC[0]
    sym = [D.DatasetRecord("a", "s", "x", r.input_pose, r.target_pose),
           D.DatasetRecord("b", "s", "y", r.input_pose, -r.target_pose)]
    g = E.average_pose_baseline(sym, "global")
    assert np.allclose(g(), 0.0)
    pa = E.average_pose_baseline(sym, "per-action")
    assert np.array_equal(pa("x"), r.target_pose)
    assert np.allclose(pa("unseen"), 0.0) and "unseen" in caplog.text
    with pytest.raises(E.EvalError):
        E.average_pose_baseline([], "global")


def test_report_aggregates_and_writes(tmp_path):
    preds = {r.id: np.stack([r.target_pose + 0.3, r.target_pose]) for r in REC}
    rep = E.evaluate(preds, REC)
    assert rep.mpjpe_mean == 0.0 and rep.pct_below_015 == 100.0 and rep.k == 2
    preds = {r.id: np.stack([r.target_pose + [0.2, 0, 0]]) for r in REC}
    rep = E.evaluate(preds, REC)
    assert abs(rep.mpjpe_mean - 0.2) < 1e-12 and rep.pct_below_015 == 0.0 and rep.pct_below_025 == 100.0
    counts = {p: len(m) for p, m in E.BODY_PARTS.items()}
    weighted = sum(rep.per_bodypart[p.value] * n for p, n in counts.items()) / 25
    assert abs(weighted - rep.mpjpe_mean) < 1e-12
    rep.write_json(tmp_path / "r.json")
    rep.write_joint_csv(tmp_path / "j.csv")
    assert json.loads((tmp_path / "r.json").read_text())["mpjpe_mean"] == rep.mpjpe_mean
    rows = list(csv.reader(open(tmp_path / "j.csv")))
    assert len(rows) == 26 and rows[1][1] == "Nose"


def test_report_missing_ids_and_short_k():
    with pytest.raises(E.EvalError, match=REC[0].id):
        E.evaluate({}, REC[:1])
    with pytest.raises(E.EvalError):
        E.evaluate({REC[0].id: REC[0].target_pose[None]}, REC[:1], k=6)
