import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from charpose import data as D
from charpose import heatmap as hm
from charpose import skeleton as sk

coords = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
names = st.text("abcxyz-_0189", min_size=1, max_size=8)


@st.composite
def record_lists(draw):
    ids = draw(st.lists(names, min_size=0, max_size=5, unique=True))
    return [
        D.DatasetRecord(i, draw(names), draw(names),
                        draw(arrays(np.float64, (25, 3), elements=coords)),
                        draw(arrays(np.float64, (25, 3), elements=coords)))
        for i in ids
    ]


@given(record_lists())
def test_jsonl_round_trip_is_value_exact(tmp_path_factory, records):
    p = tmp_path_factory.mktemp("d") / "d.jsonl"
    D.save_dataset(p, records)
    back = D.load_dataset(p)
    assert back == records
    for a, b in zip(back, records):
        assert a.input_pose.tobytes() == b.input_pose.tobytes()


def test_records_are_immutable():
    rec = D.synth_generate(0, 1)[0]
    with pytest.raises(ValueError):
        rec.input_pose[0, 0] = 1.0


def test_load_reports_line_numbers(tmp_path):
    rec = D.synth_generate(0, 1)[0]
    good = json.dumps(rec.to_json())
    p = tmp_path / "bad.jsonl"
    p.write_text(good + "\n{not json\n")
    with pytest.raises(D.DataError, match=":2:"):
        D.load_dataset(p)
    p.write_text(good + "\n" + good + "\n")
    with pytest.raises(D.DataError, match="duplicate"):
        D.load_dataset(p)
    obj = rec.to_json()
    obj["input"] = obj["input"][:24]
    p.write_text(json.dumps(obj) + "\n")
    with pytest.raises(D.DataError, match="input_pose"):
        D.load_dataset(p)


def test_empty_dataset(tmp_path):
    D.save_dataset(tmp_path / "e.jsonl", [])
    assert D.load_dataset(tmp_path / "e.jsonl") == []


@given(st.lists(st.sampled_from(["a", "b", "c", "d", "e"]), min_size=1, max_size=20))
def test_split_by_actor_is_a_partition(actors):
    recs = D.synth_generate(1, 1, D.preset_layout("two-mode"))[:1]
    base = recs[0]
    records = [D.DatasetRecord(f"r{i}", a, "x", base.input_pose, base.target_pose)
               for i, a in enumerate(actors)]
    cfg = D.SplitConfig({"a", "b"}, {"c"}, {"d", "e"})
    tr, va, te = D.split_by_actor(records, cfg)
    ids = [r.id for r in tr + va + te]
    assert sorted(ids) == sorted(r.id for r in records) and len(set(ids)) == len(ids)
    assert all(r.actor in cfg.val_actors for r in va)


def test_split_errors():
    with pytest.raises(D.DataError):
        D.SplitConfig({"a"}, {"a"})
    rec = D.synth_generate(0, 1)[0]
    with pytest.raises(D.DataError):
        D.split_by_actor([rec], D.SplitConfig({"nobody"}))


def test_generator_is_deterministic_and_seeded():
    a, b = D.synth_generate(7, 3), D.synth_generate(7, 3)
    assert a == b
    assert D.synth_generate(8, 3) != a
    assert len(a) == 3 * (2 + 1 + 1)
    assert D.action_vocabulary(a) == ["drink", "inspect", "pass"]


@pytest.mark.parametrize("seed", range(4))
def test_generated_targets_fit_grid_and_keep_bone_lengths(seed):
    for rec in D.synth_generate(seed, 5):
        t = hm.GridTransform.for_pose(rec.input_pose)
        assert t.contains(rec.target_pose).all()
        assert np.allclose(sk.bone_lengths(rec.input_pose), sk.bone_lengths(rec.target_pose), atol=1e-9)


def test_two_mode_layout_modes_alternate_and_are_far_apart():
    lay = D.preset_layout("two-mode")
    recs = D.synth_generate(0, 10, lay)
    assert len(recs) == 20
    assert [D.mode_of(r, lay) for r in recs] == [i % 2 for i in range(20)]
    assert [D.mode_of(r, lay, "left") for r in recs] == [i % 2 for i in range(20)]
    m0 = recs[0].target_pose[4] - recs[0].target_pose[8]
    m1 = recs[1].target_pose[4] - recs[1].target_pose[8]
    assert np.linalg.norm(m0 - m1) >= 0.5


def test_two_bone_ik_reaches_reachable_targets():
    root = np.zeros(3)
    target = np.array([0.3, 0.2, 0.1])
    elbow, end = D.two_bone_ik(root, target, 0.3, 0.25, np.array([0.0, -1.0, 0.0]))
    assert np.allclose(end, target)
    assert abs(np.linalg.norm(elbow - root) - 0.3) < 1e-12
    assert abs(np.linalg.norm(end - elbow) - 0.25) < 1e-12


def test_layout_validation():
    with pytest.raises(D.DataError):
        D.preset_layout("nope")
    bad = D.preset_layout("default")
    bad["actions"][0]["modes"].append(bad["actions"][0]["modes"][0])
    with pytest.raises(D.DataError):
        D.synth_generate(0, 1, bad)
    with pytest.raises(D.DataError):
        D.synth_generate(0, -1)


def test_mode_targets_reproduce_generated_target():
    lay = D.preset_layout("two-mode")
    for i, rec in enumerate(D.synth_generate(2, 3, lay)):
        modes = D.mode_targets(rec, lay)
        assert len(modes) == 2
        assert np.allclose(modes[i % 2], rec.target_pose, atol=1e-12)
