"""Acceptance criteria; each test records one PASS/FAIL line for the terminal summary."""

import time
from dataclasses import replace

import numpy as np
import pytest

import oracles
from conftest import record_acceptance
from arflow import dataeval as de
from arflow import flowcore as fc
from arflow import network as nw
from arflow import training as tr
from arflow import transform as tf
from arflow.cli import DataConfig, make_datasets
from arflow.gradcheck import FD_RTOL, run_suites
from arflow.tensor import Graph

ABLATION_SEEDS = (0, 1, 2, 3, 4)
ABLATION_STEPS = 150


def test_gradient_integrity():
    t0 = time.perf_counter()
    results = run_suites(seed=0)
    seconds = time.perf_counter() - t0
    failed = [r.name for r in results if not r.passed]
    worst = max(r.max_rel_error for r in results)
    ok = not failed and seconds < 60 and FD_RTOL <= 1e-3
    record_acceptance("gradient integrity", ok,
                      f"{len(results)} suites, worst rel.err {worst:.1e}, {seconds:.1f}s, failed={failed}")
    assert ok


def _analytic_transformed_flow(scene, t):
    h, w = scene.flow.shape[:2]
    p = fc.pixel_grid(h, w)
    s = t(p)
    layer = scene.layer_at(s)
    truth = t.apply_inverse(s + scene.flow_at(s, layer)) - p
    labels = scene.layer_at(p)
    x0, y0 = np.floor(s[..., 0]).astype(int), np.floor(s[..., 1]).astype(int)
    interior = np.ones((h, w), bool)
    for dx in (0, 1):
        for dy in (0, 1):
            interior &= labels[np.clip(y0 + dy, 0, h - 1), np.clip(x0 + dx, 0, w - 1)] == layer
    return truth, interior


def test_transformation_oracle():
    rng = np.random.default_rng(2024)
    ranges = tf.TransformRanges().spatial
    errors = []
    for scene in de.make_scenes(24, de.SceneSpec(), seed=77):
        t = tf.sample_spatial(rng, ranges, (64, 64))
        got = tf.transform_flow(scene.flow, t)
        truth, interior = _analytic_transformed_flow(scene, t)
        combined, _ = tf.transform_occlusion(scene.occlusion, got, t)
        keep = interior & (combined == 0)
        errors.append(float(np.abs(got - truth).sum(-1)[keep].mean()))
    worst = max(errors)
    ok = len(errors) >= 20 and worst < 1e-3
    record_acceptance("transformation oracle", ok, f"{len(errors)} scenes, worst mean error {worst:.2e} px")
    assert ok


def test_occlusion_oracle():
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(10):
        base = rng.uniform(-3, 3, 2)
        fwd = base + rng.normal(0, 0.3, (16, 16, 2))
        bwd = -base + rng.normal(0, 0.4, (16, 16, 2))
        fb = fc.occlusion_forward_backward(fwd, bwd)
        assert 0.05 < fb.mean() < 0.95
        mismatches += int((fb != oracles.fb_occlusion(fwd, bwd)).sum())
        t = tf.sample_spatial(rng, tf.SpatialRanges(), (16, 16))
        flow_new = tf.transform_flow(fwd, t)
        combined, old = tf.transform_occlusion(fb, flow_new, t)
        ref_c, ref_o = oracles.boundary_occlusion(fb, flow_new, t.matrix)
        mismatches += int((combined != ref_c).sum() + (old != ref_o).sum())
    ok = mismatches == 0
    record_acceptance("occlusion oracle", ok, f"10 cases of 16x16, {mismatches} mismatching pixels")
    assert ok


def test_stop_gradient_contract():
    scenes = de.make_scenes(2, de.SceneSpec(height=32, width=32, fg_size=(6, 12)), seed=5)
    i1 = np.stack([s.frame1 for s in scenes])
    i2 = np.stack([s.frame2 for s in scenes])
    net = nw.FlowNetwork(nw.NetConfig(dtype="float64"), 0)
    cfg = tr.TrainConfig(aug_weight=0.01)
    grads = []
    for mode in ("stop", "zero"):
        with Graph() as g:
            terms = tr.compute_losses(net, i1, i2, cfg, np.random.default_rng(8), _detach=mode)
        grads.append(tr.parameter_gradients(net, g, terms.total))
    diff = max(float(np.abs(grads[0][k] - grads[1][k]).max()) for k in grads[0])
    ok = grads[0].keys() == grads[1].keys() and diff <= 1e-12
    record_acceptance("stop-gradient contract", ok, f"max parameter-gradient difference {diff:.1e}")
    assert ok


def test_parameter_count():
    shared = nw.FlowNetwork(nw.NetConfig(shared_decoder=True)).num_parameters()
    separate = nw.FlowNetwork(nw.NetConfig(shared_decoder=False)).num_parameters()
    ok = shared < separate
    record_acceptance("parameter count", ok, f"shared decoder {shared:,} < per-level decoders {separate:,}")
    assert ok


def test_format_round_trips(tmp_path):
    flow = np.random.default_rng(1).standard_normal((13, 9, 2)).astype(np.float32)
    de.write_flo(tmp_path / "f.flo", flow)
    flo_ok = de.read_flo(tmp_path / "f.flo").tobytes() == flow.tobytes()
    net = nw.FlowNetwork(nw.NetConfig(), 7)
    nw.save_checkpoint(net, tmp_path / "c.arfw")
    back = nw.load_checkpoint(tmp_path / "c.arfw")
    i1, i2 = np.random.default_rng(2).uniform(size=(2, 2, 64, 64, 3))
    ckpt_ok = nw.predict_flow(net, i1, i2).tobytes() == nw.predict_flow(back, i1, i2).tobytes()
    ok = flo_ok and ckpt_ok
    record_acceptance("format round-trips", ok, f".flo bit-identical={flo_ok}, checkpoint forward bit-identical={ckpt_ok}")
    assert ok


# --------------------------------------------------------------------------
# training-based criteria share one regression run


@pytest.fixture(scope="module")
def regression():
    train, val = make_datasets(DataConfig())
    frames = (np.stack([s.frame1 for s in train]), np.stack([s.frame2 for s in train]))
    cfg = tr.TrainConfig()
    net = nw.FlowNetwork(nw.NetConfig(), seed=0)
    snapshot = {}

    def on_row(row):
        if row["step"] == cfg.pretrain_steps:
            snapshot.update(net.state())

    result = tr.fit(net, frames, cfg, seed=0, validate=lambda n: de.evaluate(n, val)["ALL"], on_row=on_row)
    return {"result": result, "pretrained": snapshot, "frames": frames, "val": val, "cfg": cfg}


@pytest.mark.slow
def test_training_regression(regression):
    res = regression["result"]
    ratio = res.final_val_aepe / res.initial_val_aepe
    ok = ratio < 0.5 and res.seconds < 30 * 60
    record_acceptance("training regression", ok,
                      f"val AEPE {res.initial_val_aepe:.3f} -> {res.final_val_aepe:.3f} ({ratio:.0%}), "
                      f"{res.seconds / 60:.1f} min")
    assert ok


def _finetune(regression, seed, **overrides):
    net = nw.FlowNetwork(nw.NetConfig(), seed=0)
    net.load_state(regression["pretrained"])
    cfg = replace(regression["cfg"], pretrain_steps=0, steps=ABLATION_STEPS, occlusion_warmup=0, **overrides)
    tr.fit(net, regression["frames"], cfg, seed=1000 + seed)
    return de.evaluate(net, regression["val"])


@pytest.fixture(scope="module")
def ablation(regression):
    runs = {}
    for seed in ABLATION_SEEDS:
        runs[seed] = {
            "plain": _finetune(regression, seed, aug_weight=0.0),
            "ar": _finetune(regression, seed, aug_weight=0.01),
            "direct": _finetune(regression, seed, aug_weight=0.0, mode="direct"),
        }
    return runs


@pytest.mark.slow
def test_ablation_occ_trend(ablation):
    wins = [r["ar"]["OCC"] <= r["plain"]["OCC"] for r in ablation.values()]
    pairs = ", ".join(f"{r['ar']['OCC']:.3f}/{r['plain']['OCC']:.3f}" for r in ablation.values())
    ok = sum(wins) >= 4
    record_acceptance("augmentation-regularization OCC trend", ok,
                      f"OCC AEPE with/without consistency per seed: {pairs}; {sum(wins)}/5 seeds")
    assert ok


@pytest.mark.slow
def test_ablation_direct_trend(ablation):
    wins = [r["direct"]["ALL"] >= r["ar"]["ALL"] for r in ablation.values()]
    pairs = ", ".join(f"{r['direct']['ALL']:.3f}/{r['ar']['ALL']:.3f}" for r in ablation.values())
    ok = sum(wins) >= 4
    record_acceptance("direct-augmentation trend", ok,
                      f"ALL AEPE direct/regularized per seed: {pairs}; {sum(wins)}/5 seeds")
    assert ok
