"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary.  Criteria 3, 4, 5 and 7 train full perturbations and take
several minutes each on one core.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from aef import tensor as T
from aef.data import gen_synthetic_faces
from aef.dfe import csa, instance_norm, loss_bundle
from aef.equilibrium import EquilibriumState, compute_weights, ema_update
from aef.experiments import balance_experiment, holdout_experiment, temperature_experiment, toy_config
from aef.harness import cmd_train
from aef.metrics import MetricsRow, psnr, srmask, ssim
from aef.optimizer import (HyperParams, Perturbation, make_batches, perturb, run_aef, stage1_feature_pass,
                           summed_feature_distances)
from aef.surrogates import (PARADIGMS, SurrogateSpec, avg_pool2, build_surrogate, forward_with_features,
                            gaussian_blur, random_conditions, upsample2)
from aef.tensor import finite_diff_grad, relative_error, value_and_grad

SEEDS5 = (0, 1, 2, 3, 4)


# 1 --------------------------------------------------------------------------

def _primitives(rng):
    """(name, scalar function, evaluation point) for every differentiable primitive."""
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(4, 5))
    pos = rng.uniform(0.5, 2.0, size=(5,))
    img = rng.normal(size=(2, 3, 6, 6))
    kern, bias = rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    r = lambda shape: np.random.default_rng(int(np.prod(shape))).normal(size=shape)
    relu_x = np.where(np.abs(x) < 1e-3, 0.5, x)
    return [
        ("tanh", lambda t: (T.tanh(t) * w).sum(), x),
        ("sigmoid", lambda t: (T.sigmoid(t) * w).sum(), x),
        ("exp", lambda t: (T.exp(t) * w).sum(), x),
        ("relu", lambda t: (T.relu(t) * w).sum(), relu_x),
        ("sqrt", lambda t: T.sqrt(t * t + 0.5).sum(), x),
        ("clamp", lambda t: (T.clamp(t, -1.0, 1.0) * w).sum(), x),
        ("softmax", lambda t: (T.softmax(t, axis=-1) * w).sum(), x),
        ("norm", lambda t: T.norm(t, axis=1).sum(), x),
        ("mean", lambda t: T.mean(t * t, axis=0).sum(), x),
        ("var", lambda t: T.var(t, axis=1).sum(), x),
        ("std", lambda t: T.std(t, axis=1).sum(), x),
        ("reshape", lambda t: (T.reshape(t, (5, 4)) * r((5, 4))).sum(), x),
        ("swapaxes", lambda t: (T.swapaxes(t, 0, 1) * r((5, 4))).sum(), x),
        ("concat", lambda t: (T.concat([t, t * t], axis=0) * r((8, 5))).sum(), x),
        ("add", lambda t: (T.add(t, pos) * T.add(t, pos)).sum(), x),
        ("sub", lambda t: (T.sub(pos, t) * w).sum(), x),
        ("mul", lambda t: (T.mul(t, pos) * t).sum(), x),
        ("div", lambda t: (T.div(x, t) * r((4, 5))).sum(), pos),
        ("matmul", lambda t: (T.matmul(t, w.T) * r((4, 4))).sum(), x),
        ("conv2d/input", lambda t: (T.conv2d(t, kern, bias) * r((2, 4, 6, 6))).sum(), img),
        ("conv2d/kernel", lambda t: (T.conv2d(img, t, bias) * r((2, 4, 6, 6))).sum(), kern),
        ("instance_norm", lambda t: (instance_norm(t) * r((2, 3, 6, 6))).sum(), img),
        ("csa", lambda t: (csa(t) * r((2, 3, 6, 6))).sum(), img),
        ("avg_pool2", lambda t: (avg_pool2(t) * r((2, 3, 3, 3))).sum(), img),
        ("upsample2", lambda t: (upsample2(t) * r((2, 3, 12, 12))).sum(), img),
        ("gaussian_blur", lambda t: (gaussian_blur(t, 1.0) * r((2, 3, 6, 6))).sum(), img),
    ]


def _composite(paradigm, seed):
    rng = np.random.default_rng(seed)
    s = build_surrogate(SurrogateSpec(paradigm, 8, 4, seed=seed, resistance_blur=0.5 * seed))
    x = rng.uniform(-0.8, 0.8, size=(3, 8, 8))
    c = random_conditions(paradigm, 1, rng)[0]
    oc, fc = forward_with_features(s, x, c)

    def f(d):
        oa, fa = forward_with_features(s, T.add(x, d), c)
        return loss_bundle(oc.data, oa, fc.data, fa, 0.3).l_total

    return f, rng.uniform(-0.05, 0.05, size=x.shape)


def test_criterion_1_gradient_oracle(accept):
    t0 = time.time()
    worst, where = 0.0, ""
    for seed in (0, 1, 2):
        cases = [(n, f, x) for n, f, x in _primitives(np.random.default_rng(seed))]
        cases += [(f"composite/{p}", *_composite(p, seed)) for p in PARADIGMS]
        for name, f, x in cases:
            _, g = value_and_grad(f, x)
            err = relative_error(g, finite_diff_grad(f, x))
            if err > worst:
                worst, where = err, f"{name} seed {seed}"
    elapsed = time.time() - t0
    ok = worst <= 1e-5 and elapsed < 120
    accept(1, "gradient oracle", ok, f"worst rel err {worst:.1e} at {where}; {elapsed:.0f} s")
    assert ok


# 2 --------------------------------------------------------------------------

def test_criterion_2_equilibrium(accept):
    rng = np.random.default_rng(0)
    checks = {}
    # contraction: the EMA distance to a constant target shrinks by exactly beta each step
    state = EquilibriumState(4, beta=0.9, l_ema=rng.normal(size=4))
    target = rng.normal(size=4)
    gaps = []
    for _ in range(20):
        gaps.append(np.abs(state.l_ema - target).max())
        state = ema_update(state, target)
    checks["contraction"] = np.allclose(np.array(gaps[1:]) / np.array(gaps[:-1]), 0.9, atol=1e-9)
    fixed = ema_update(EquilibriumState(4, l_ema=target), target)
    checks["fixed point"] = np.allclose(fixed.l_ema, target, atol=1e-15)
    sums, mono = [], True
    for _ in range(50):
        l = rng.normal(size=5)
        w = compute_weights(l, float(rng.uniform(0.05, 5)))
        sums.append(abs(w.sum() - 1))
        order = np.argsort(l)
        mono &= bool(np.all(np.diff(w[order]) >= -1e-15))
    checks["sum to 1"] = max(sums) <= 1e-12
    checks["monotone"] = mono
    l = rng.normal(size=6)
    checks["argmax limit"] = np.array_equal(compute_weights(l, 1e-6), np.eye(6)[np.argmax(l)])
    checks["large T uniform"] = np.abs(compute_weights(l, 1e9) - 1 / 6).max() <= 1e-6
    w4 = compute_weights([-0.5, -0.5, -0.5, -0.1], 0.1)[3]
    checks["worked w4"] = abs(w4 - 0.948) <= 1e-3
    ok = all(checks.values())
    accept(2, "equilibrium mechanism", ok, f"w4={w4:.4f}; failed: {[k for k, v in checks.items() if not v]}")
    assert ok


# 3 --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_3_budget_invariant(accept, toy32):
    cfg, ensemble, _ = toy32
    hp = HyperParams()  # defaults: eps 0.05, 30 outer iterations, batch 16
    images = gen_synthetic_faces(128, 32, seed=0)
    worst = {"delta": 0.0, "lo": 0.0, "hi": 0.0, "n": 0}

    def observer(stage, p, batch):
        x = perturb(batch.images, p.delta).data
        worst["delta"] = max(worst["delta"], float(np.abs(p.delta).max()))
        worst["lo"], worst["hi"] = min(worst["lo"], float(x.min())), max(worst["hi"], float(x.max()))
        worst["n"] += 1

    t0 = time.time()
    run_aef(ensemble, images, hp, observer=observer)
    ok = worst["delta"] <= 0.05 + 1e-9 and worst["lo"] >= -1 and worst["hi"] <= 1
    accept(3, "budget invariant", ok, f"{worst['n']} updates, max|delta|={worst['delta']:.12f}, "
           f"range [{worst['lo']:.3f}, {worst['hi']:.3f}]; {time.time() - t0:.0f} s")
    assert ok


# 4 --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_4_balance(accept, toy32):
    cfg, ensemble, info = toy32
    t0 = time.time()
    res = balance_experiment(cfg, SEEDS5, built=(ensemble, info))
    elapsed = time.time() - t0 + info["build_seconds"]
    ok = res["min_wins"] >= 4 and res["std_wins"] >= 4 and elapsed < 1800
    sr = [v for t in res["trials"].values() for w in ("adaptive", "static") for v in t[w]["per_model"].values()]
    accept(4, "balance (adaptive vs static)", ok,
           f"min wins {res['min_wins']}/5, std wins {res['std_wins']}/5, SRmask range "
           f"[{min(sr):.2f}, {max(sr):.2f}]; L2mask min wins {res['l2mask_min_wins']}/5, "
           f"std wins {res['l2mask_std_wins']}/5; {elapsed:.0f} s")
    assert ok


# 5 --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_temperature_trend(accept, toy16):
    cfg, ensemble, info = toy16
    res = temperature_experiment(cfg, SEEDS5, (0.1, 1.0, 3.0), built=(ensemble, info))
    ok = res["rho"] >= 0
    accept(5, "temperature trend", ok, f"pooled rho {res['rho']:+.3f}, per seed "
           f"{[round(v, 2) for v in res['rho_per_seed'].values()]}; L2mask rho {res['l2mask_rho']:+.3f}")
    assert ok


# 6 --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_stage1_efficacy(accept, toy32):
    cfg, ensemble, _ = toy32
    hp = HyperParams()
    bad = []
    for seed in SEEDS5:
        images = gen_synthetic_faces(hp.batch_size, 32, seed=seed)
        batch = make_batches(ensemble, images, replace(hp, seed=seed))[0]
        p = Perturbation.random(images.images.shape[1:], hp.epsilon, seed)
        before = summed_feature_distances(ensemble, batch, p.delta)
        after = summed_feature_distances(ensemble, batch, stage1_feature_pass(p, ensemble, batch, hp).delta)
        bad += [(seed, s.name) for s, a, b in zip(ensemble, after, before) if not a > b]
    ok = not bad
    accept(6, "stage-1 efficacy", ok, f"non-increasing (seed, model): {bad}")
    assert ok


# 7 --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_holdout(accept, toy16):
    cfg, ensemble, info = toy16
    res = holdout_experiment(cfg, SEEDS5, built=(ensemble, info))
    passed = {s: r["passed"] for s, r in res["seeds"].items()}
    l2 = {s: r["l2mask_passed"] for s, r in res["seeds"].items()}
    ok = all(v >= 3 for v in passed.values())
    accept(7, "hold-out directionality", ok, f"folds passed per seed {passed}; L2mask {l2}")
    assert ok


# 8 --------------------------------------------------------------------------

def test_criterion_8_metric_oracles(accept):
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 1, size=(3, 32, 32))
    checks = {
        "psnr cap": psnr(a, a) == 100.0,
        "psnr 20 dB": abs(psnr(np.zeros((3, 8, 8)), np.full((3, 8, 8), 0.1)) - 20.0) <= 1e-6,
        "ssim identity": abs(ssim(a, a) - 1.0) <= 1e-12,
    }
    rows = [MetricsRow("m", v, 0.0, 0.0) for v in (0.06, 0.04, 0.10)]
    checks["srmask 2/3"] = srmask(rows) == round(200 / 3, 2)
    vals = rng.uniform(0, 0.1, size=200)
    checks["srmask tally"] = srmask([MetricsRow("m", v, 0.0, 0.0) for v in vals]) == round(
        100 * np.sum(vals > 0.05) / 200, 2)
    checks["threshold is strict"] = srmask([MetricsRow("m", 0.05, 0.0, 0.0)]) == 0.0
    ok = all(checks.values())
    accept(8, "metric oracles", ok, f"failed: {[k for k, v in checks.items() if not v]}")
    assert ok


# 9 --------------------------------------------------------------------------

def _outputs(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_criterion_9_determinism(accept, tmp_path, monkeypatch):
    cfg = toy_config(size=16, n_train=16, pretrain_steps=50, t_out=3)
    runs = {}
    for label, threads in (("a", "1"), ("b", "1"), ("threads", "2")):
        monkeypatch.setenv("AEF_THREADS", threads)
        cmd_train(cfg, tmp_path / label)
        runs[label] = _outputs(tmp_path / label)
    same = runs["a"] == runs["b"] == runs["threads"]
    ok = same and "perturbation.aefp" in runs["a"]
    accept(9, "determinism", ok, f"{len(runs['a'])} files compared across 3 runs (AEF_THREADS=1,1,2)")
    assert ok
