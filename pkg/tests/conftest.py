import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from charpose import data as D
from charpose import model as M
from charpose import sampler as S
from charpose import train as T

settings.register_profile(
    "charpose", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("charpose")

# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = {}

# overfit fixture: 20 pairs, two modes per hand
FIXTURE_SEED = 0
FIXTURE_PER_MODE = 10
OVERFIT_STEPS = 150
OVERFIT_WARMUP = 20

# tiny network for fast pipeline tests
TINY_MODEL = {"embed_dim": 8, "decoder_channels": (4, 4, 4, 4)}


def record_criterion(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fixture_records():
    return D.synth_generate(FIXTURE_SEED, FIXTURE_PER_MODE, D.preset_layout("two-mode"))


@pytest.fixture(scope="session")
def small_records():
    return D.synth_generate(3, 2, D.preset_layout("default"))


@pytest.fixture(scope="session")
def overfit_run(fixture_records, tmp_path_factory):
    """All three stages trained on the overfit fixture (shared by several criteria)."""
    out = tmp_path_factory.mktemp("overfit")
    tcfg = T.TrainingConfig(warmup_steps=OVERFIT_WARMUP, max_steps=OVERFIT_STEPS,
                            eval_every=OVERFIT_STEPS)
    t0 = time.perf_counter()
    T.train(fixture_records, T.stage_configs(), tcfg, out)
    elapsed = time.perf_counter() - t0
    return {"dir": out, "models": S.PoseModels.from_dir(out), "seconds": elapsed, "steps": OVERFIT_STEPS}


@pytest.fixture(scope="session")
def tiny_models(small_records, tmp_path_factory):
    """A barely trained tiny autoregressive pipeline on disk."""
    out = tmp_path_factory.mktemp("tiny")
    tcfg = T.TrainingConfig(warmup_steps=1, max_steps=2, eval_every=2, batch_size=4)
    T.train(small_records, T.stage_configs(**TINY_MODEL), tcfg, out)
    return out


def tiny_stage(name="right", seed=0, **kw):
    cfg = T.stage_configs(**TINY_MODEL, **kw)[name]
    return M.Stage(cfg, M.init_params(cfg, seed=seed))


def subtree(child, bones=None):
    from charpose.skeleton import BODY25_BONES
    bones = bones or BODY25_BONES
    out, frontier = {child}, [child]
    while frontier:
        j = frontier.pop()
        for p, c in bones:
            if p == j:
                out.add(c)
                frontier.append(c)
    return sorted(out)


def stretched_problem(pose, bone_index, factor=1.2, w_h=0.0):
    """Refinement problem whose start pose has one bone stretched by ``factor``.

    The child subtree is translated along the bone, so every angle and every
    other bone length still match the reference; the end-effector targets are
    the stretched pose's fingers.
    """
    from charpose import refine as R
    from charpose.heatmap import GridTransform
    from charpose.skeleton import BODY25_BONES, bone_lengths, joint_angles

    pose = np.asarray(pose, dtype=np.float64)
    p, c = BODY25_BONES[bone_index]
    x0 = pose.copy()
    x0[subtree(c)] += (factor - 1.0) * (pose[c] - pose[p])
    theta, ok = joint_angles(pose)
    return R.RefinementProblem(
        x0=x0, e=x0[[4, 7]].copy(), b=bone_lengths(pose), theta=theta, theta_defined=ok,
        H=None, transform=GridTransform.for_pose(pose), weights=R.RefinementWeights(w_h=w_h),
    )
