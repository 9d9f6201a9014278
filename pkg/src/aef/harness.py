"""Experiment orchestration behind the CLI: train, eval, sweep, holdout, ablate.

Independent jobs (surrogate pretraining, sweep points, hold-out folds) fan out
over a process pool capped by ``AEF_THREADS``.  Each job is a pure function of
its arguments and results are collected in submission order, so outputs do not
depend on the worker count.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data
from .config import SWEEP_PARAMS, ConfigError, RunConfig, dump_config
from .metrics import image_metrics, psnr, ssim, summarize, to_unit
from .optimizer import HyperParams, evaluate, make_batches, run_aef
from .surrogates import (Surrogate, build_surrogate, input_gradient, pretrain, random_conditions,
                         sign_disagreement)

log = logging.getLogger(__name__)

WEIGHTS_DIR = "models"


def worker_count() -> int:
    raw = os.environ.get("AEF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"AEF_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def pmap(fn, jobs: list) -> list:
    """Ordered map over ``jobs``; uses a process pool when AEF_THREADS > 1."""
    n = min(worker_count(), len(jobs))
    if n <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))


# inputs ---------------------------------------------------------------------

def load_images(src, size: int) -> data.ImageBatch:
    if src.kind == "synthetic":
        return data.gen_synthetic_faces(src.n, size, src.seed)
    batch = data.load_ppm_dir(src.path)
    if batch.images.shape[-1] != size or batch.images.shape[-2] != size:
        raise ConfigError(f"{src.path}: images are {batch.images.shape[-2:]}, models expect {size}x{size}")
    return batch


def _pretrain_job(job) -> Surrogate:
    mid, spec, images, steps, lr = job
    return pretrain(build_surrogate(spec, label=mid), images, steps, lr, seed=spec.seed)


def _disagreements(ensemble, x) -> dict:
    grads = [input_gradient(s, x, random_conditions(s.spec.paradigm, 1, np.random.default_rng(0))[0])
             for s in ensemble]
    return {(i, j): sign_disagreement(grads[i], grads[j])
            for i in range(len(ensemble)) for j in range(i + 1, len(ensemble))}


def build_ensemble(cfg: RunConfig, probe: np.ndarray | None = None) -> tuple[list[Surrogate], dict]:
    """Pretrain every configured model; reseed models whose gradient signs match a peer too closely."""
    s = cfg.surrogates
    images = data.gen_synthetic_faces(s.pretrain_images, s.image_size, s.pretrain_seed).images
    specs = cfg.specs()
    ensemble = pmap(_pretrain_job, [(mid, sp, images, s.pretrain_steps, s.pretrain_lr) for mid, sp in specs])
    x = images[0] if probe is None else probe
    info = {"reseeds": [], "disagreement": {}}
    for attempt in range(1, s.max_reseeds + 1):
        dis = _disagreements(ensemble, x)
        bad = sorted({j for (i, j), v in dis.items() if v < s.min_disagreement})
        info["disagreement"] = {f"{ensemble[i].name}|{ensemble[j].name}": v for (i, j), v in dis.items()}
        if not bad:
            break
        jobs = []
        for j in bad:
            mid, sp = specs[j]
            sp = replace(sp, seed=sp.seed + 1000 * attempt)
            specs[j] = (mid, sp)
            info["reseeds"].append({"model": mid, "seed": sp.seed})
            log.warning("reseeding %s (gradient signs too close to a peer)", mid)
            jobs.append((mid, sp, images, s.pretrain_steps, s.pretrain_lr))
        for j, model in zip(bad, pmap(_pretrain_job, jobs)):
            ensemble[j] = model
    info["pretrain"] = {m.name: m.history for m in ensemble}
    return ensemble, info


def save_ensemble(ensemble, out: Path) -> None:
    (out / WEIGHTS_DIR).mkdir(parents=True, exist_ok=True)
    for s in ensemble:
        data.save_weights(s, out / WEIGHTS_DIR / f"{s.name}.aefw")


def load_or_build_ensemble(cfg: RunConfig, out: Path) -> tuple[list[Surrogate], dict]:
    """Reuse weights saved by a previous train in ``out`` when they match the config."""
    wanted = dict(cfg.specs())
    paths = [out / WEIGHTS_DIR / f"{mid}.aefw" for mid in wanted]
    if all(p.exists() for p in paths):
        loaded = [data.load_weights(p) for p in paths]
        if all(m.spec.paradigm == wanted[m.name].paradigm and m.spec.image_size == wanted[m.name].image_size
               and m.spec.resistance_blur == wanted[m.name].resistance_blur for m in loaded):
            return loaded, {"loaded_from": str(out / WEIGHTS_DIR)}
    return build_ensemble(cfg)


# commands -------------------------------------------------------------------

def _prepare_out(cfg: RunConfig, out) -> Path:
    out = Path(out if out is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.ini").write_text(dump_config(cfg), encoding="utf-8")
    return out


def _attack(ensemble, cfg: RunConfig, hp: HyperParams, weighting: str, train=None):
    train = train if train is not None else load_images(cfg.train_images, cfg.surrogates.image_size)
    return run_aef(ensemble, train, hp, weighting=weighting)


def _eval_rows(ensemble, cfg: RunConfig, delta: np.ndarray, seed: int):
    ev = load_images(cfg.eval_images, cfg.surrogates.image_size)
    batches = make_batches(ensemble, ev, HyperParams(seed=seed, batch_size=cfg.hp.batch_size))
    return ev, evaluate(ensemble, batches, delta)


def _spread(srmask: dict) -> dict:
    vals = np.array(list(srmask.values()), dtype=np.float64)
    return {"per_model": srmask, "mean": float(vals.mean()), "std": float(vals.std()), "min": float(vals.min())}


def cmd_train(cfg: RunConfig, out=None, weighting: str = "adaptive") -> dict:
    out = _prepare_out(cfg, out)
    ensemble, info = build_ensemble(cfg)
    save_ensemble(ensemble, out)
    p, trace = _attack(ensemble, cfg, cfg.hp, weighting)
    data.save_perturbation(p.delta, p.epsilon, out / "perturbation.aefp")
    rows = [r for rs in evaluate(ensemble, make_batches(
        ensemble, load_images(cfg.train_images, cfg.surrogates.image_size), cfg.hp), p.delta).values() for r in rs]
    extra = {"weighting": weighting, "ensemble": info, "stage1_steps": trace.stage1_steps,
             "stage2_steps": trace.stage2_steps}
    data.write_report(trace, rows, out / "trace.json", fmt="json", run_id=cfg.run_id, hp=cfg.hp, extra=extra)
    data.write_report(trace, rows, out / "trace.csv", fmt="csv", run_id=cfg.run_id, mode="trace")
    data.write_report(trace, rows, out / "train_summary.csv", fmt="csv", run_id=cfg.run_id)
    return {"out": str(out), "final_metrics": trace.final_metrics}


def cmd_eval(cfg: RunConfig, perturbation_path, out=None) -> dict:
    out = _prepare_out(cfg, out)
    delta, eps = data.load_perturbation(perturbation_path)
    size = cfg.surrogates.image_size
    if delta.shape[1:] != (size, size):
        raise ConfigError(f"perturbation is {delta.shape[1]}x{delta.shape[2]}, config images are {size}x{size}")
    ensemble, info = load_or_build_ensemble(cfg, out)
    ev, metrics = _eval_rows(ensemble, cfg, delta, cfg.hp.seed)
    rows = [r for rs in metrics.values() for r in rs]
    adv = np.clip(ev.images + delta, -1.0, 1.0)
    imp = [(psnr(to_unit(x), to_unit(a)), ssim(to_unit(x), to_unit(a))) for x, a in zip(ev.images, adv)]
    imperceptibility = {"psnr_db": float(np.mean([v[0] for v in imp])),
                        "ssim": float(np.mean([v[1] for v in imp])),
                        "min_psnr_db": float(np.min([v[0] for v in imp]))}
    summary = {m: summarize(rs) for m, rs in metrics.items()}
    data.write_report(None, rows, out / "eval.csv", fmt="csv", run_id=cfg.run_id)
    _write_image_rows(rows, out / "eval_images.csv")
    data.write_json({"run_id": cfg.run_id, "epsilon": eps, "per_model": summary,
                     "imperceptibility": imperceptibility, "ensemble": info, "config": cfg.hp},
                    out / "eval.json")
    return {"per_model": summary, "imperceptibility": imperceptibility}


def _write_image_rows(rows, path) -> None:
    lines = ["model,image_id,l2mask,success,psnr_db,ssim"]
    for r in rows:
        lines.append(f"{r.model},{r.image_id},{r.l2mask:.6f},{str(r.success).lower()},{r.psnr_db:.6f},{r.ssim:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _sweep_job(job):
    ensemble, cfg, hp, label = job
    p, trace = _attack(ensemble, cfg, hp, "adaptive")
    _, metrics = _eval_rows(ensemble, cfg, p.delta, hp.seed)
    return label, trace, metrics


def cmd_sweep(cfg: RunConfig, param: str, values: list, out=None) -> dict:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep {param!r}; choose one of {sorted(SWEEP_PARAMS)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = _prepare_out(cfg, out)
    ensemble, info = build_ensemble(cfg)  # shared by every point
    name = SWEEP_PARAMS[param]
    jobs = []
    for v in values:
        v = int(v) if name == "t_in" else float(v)
        try:
            hp = replace(cfg.hp, **{name: v})
        except ValueError as exc:
            raise ConfigError(f"sweep value {param}={v}: {exc}") from exc
        jobs.append((ensemble, cfg, hp, f"{param}={v}"))
    records, groups = [], {}
    for label, trace, metrics in pmap(_sweep_job, jobs):
        rows = [r for rs in metrics.values() for r in rs]
        records += data.summary_rows(label, rows, trace)
        groups[label] = _spread({m: summarize(rs)["srmask_pct"] for m, rs in metrics.items()})
    data.write_csv(records, out / "sweep.csv")
    data.write_json({"run_id": cfg.run_id, "param": param, "groups": groups, "ensemble": info,
                     "config": cfg.hp}, out / "sweep.json")
    return groups


def _fold_job(job):
    ensemble, cfg, exclude = job
    white = [s for s in ensemble if s.name != exclude]
    p, trace = _attack(white, cfg, cfg.hp, "adaptive")
    _, metrics = _eval_rows(ensemble, cfg, p.delta, cfg.hp.seed)
    return exclude, trace, metrics


def holdout_roles(ensemble, exclude: str) -> dict:
    return {s.name: ("black-box" if s.name == exclude else "white-box") for s in ensemble}


def cmd_holdout(cfg: RunConfig, exclude: str | None = None, out=None) -> dict:
    """Leave one model out of training and score it as an unseen target.

    ``exclude=None`` runs every fold in turn.
    """
    if len(cfg.ensemble) < 2:
        raise ConfigError("holdout needs an ensemble of at least 2 models")
    folds = list(cfg.ensemble) if exclude is None else [exclude]
    for f in folds:
        if f not in cfg.ensemble:
            raise ConfigError(f"unknown model id {f!r}; ensemble has {list(cfg.ensemble)}")
    out = _prepare_out(cfg, out)
    ensemble, info = build_ensemble(cfg)
    records, result = [], {}
    for excl, trace, metrics in pmap(_fold_job, [(ensemble, cfg, f) for f in folds]):
        roles = holdout_roles(ensemble, excl)
        rows = [r for rs in metrics.values() for r in rs]
        records += data.summary_rows(f"holdout-{excl}", rows, trace, tags=roles)
        sr = {m: summarize(rs)["srmask_pct"] for m, rs in metrics.items()}
        white = [v for m, v in sr.items() if roles[m] == "white-box"]
        result[excl] = {"srmask": sr, "roles": roles, "black_box": sr[excl], "white_box_mean": float(np.mean(white))}
    data.write_csv(records, out / "holdout.csv")
    data.write_json({"run_id": cfg.run_id, "folds": result, "ensemble": info, "config": cfg.hp},
                    out / "holdout.json")
    return result


def cmd_single_source(cfg: RunConfig, source: str, out=None) -> dict:
    """Train on one model and score on all of them."""
    if source not in cfg.ensemble:
        raise ConfigError(f"unknown model id {source!r}")
    out = _prepare_out(cfg, out)
    ensemble, _ = build_ensemble(cfg)
    p, _ = _attack([s for s in ensemble if s.name == source], cfg, cfg.hp, "adaptive")
    _, metrics = _eval_rows(ensemble, cfg, p.delta, cfg.hp.seed)
    sr = {m: summarize(rs)["srmask_pct"] for m, rs in metrics.items()}
    data.write_json({"source": source, "srmask": sr, "config": cfg.hp}, out / f"single-{source}.json")
    return sr


def _ablate_job(job):
    ensemble, cfg, weighting, train = job
    p, trace = _attack(ensemble, cfg, cfg.hp, weighting, train)
    _, metrics = _eval_rows(ensemble, cfg, p.delta, cfg.hp.seed)
    return weighting, trace, metrics


def paired_runs(ensemble, cfg: RunConfig, train=None) -> dict:
    """AEF and static runs with identical seeds; per-model SRmask, mean, std and the deltas."""
    res = {}
    for weighting, trace, metrics in pmap(_ablate_job, [(ensemble, cfg, w, train) for w in ("adaptive", "static")]):
        res[weighting] = {"trace": trace, "metrics": metrics,
                          **_spread({m: summarize(rs)["srmask_pct"] for m, rs in metrics.items()})}
    res["delta"] = {k: res["adaptive"][k] - res["static"][k] for k in ("mean", "std", "min")}
    return res


def cmd_ablate(cfg: RunConfig, out=None) -> dict:
    out = _prepare_out(cfg, out)
    ensemble, info = build_ensemble(cfg)
    res = paired_runs(ensemble, cfg)
    records = []
    for w in ("adaptive", "static"):
        rows = [r for rs in res[w]["metrics"].values() for r in rs]
        records += data.summary_rows(f"{cfg.run_id}-{w}", rows, res[w]["trace"])
    data.write_csv(records, out / "ablate.csv")
    payload = {w: {k: res[w][k] for k in ("per_model", "mean", "std", "min")} for w in ("adaptive", "static")}
    payload["delta"] = res["delta"]
    payload["weights"] = {w: res[w]["trace"].weights_history() for w in ("adaptive", "static")}
    payload["ensemble"] = info
    payload["config"] = cfg.hp
    data.write_json(payload, out / "ablate.json")
    return payload
