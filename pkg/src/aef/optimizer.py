"""Two-stage optimization of one universal perturbation against an ensemble.

Each batch gets ``t_in`` feature-enhancement steps on the uniformly averaged
feature loss, then one equilibrium step on the softmax-weighted composite
losses.  Both stages use momentum sign steps followed by L-inf projection.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import ImageBatch
from .dfe import DEFAULT_COMPONENT_WEIGHTS, LossBundle, feature_discrepancies, feature_loss, loss_bundle
from .equilibrium import EquilibriumState, aggregate_global_loss, compute_weights, ema_update, uniform_weights
from .metrics import MetricsRow, image_metrics, summarize
from .surrogates import Surrogate, features, forward_with_features, random_conditions
from .tensor import Tape

log = logging.getLogger(__name__)

WEIGHTINGS = ("adaptive", "static")


@dataclass
class HyperParams:
    epsilon: float = 0.05
    lam: float = 0.001
    beta: float = 0.9
    temperature: float = 0.1
    alpha: float = 0.8
    component_weights: tuple = DEFAULT_COMPONENT_WEIGHTS
    t_out: int = 30
    t_in: int = 3
    step_size: float | None = None
    momentum_decay: float = 1.0
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        self.component_weights = tuple(float(w) for w in self.component_weights)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if self.t_out < 1 or self.t_in < 1:
            raise ValueError("t_out and t_in must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(self.component_weights) != 3 or min(self.component_weights) < 0:
            raise ValueError("component_weights needs three nonnegative entries")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")

    @property
    def eta(self) -> float:
        return self.epsilon / 10.0 if self.step_size is None else self.step_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Perturbation:
    delta: np.ndarray
    epsilon: float
    momentum: np.ndarray = None

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.momentum is None:
            self.momentum = np.zeros_like(self.delta)

    @classmethod
    def random(cls, shape, epsilon: float, seed: int) -> "Perturbation":
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-epsilon / 2.0, epsilon / 2.0, size=shape), epsilon)

    @classmethod
    def zeros(cls, shape, epsilon: float) -> "Perturbation":
        return cls(np.zeros(shape), epsilon)


@dataclass
class RunTrace:
    models: list[str]
    weighting: str = "adaptive"
    rows: list[dict] = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    stage1_steps: int = 0
    stage2_steps: int = 0

    def final_state(self) -> dict:
        last = self.rows[-1]
        return {m: {"weight": last["weights"][i], "l_ema": last["l_ema"][i]} for i, m in enumerate(self.models)}

    def weights_history(self) -> np.ndarray:
        return np.array([r["weights"] for r in self.rows])


@dataclass
class Batch:
    """Images plus per-model conditions and cached clean outputs/features."""

    images: np.ndarray
    conditions: list[np.ndarray]
    clean_out: list[np.ndarray]
    clean_feat: list[np.ndarray]
    ids: list[str] = field(default_factory=list)


def prepare_batch(ensemble: Sequence[Surrogate], images: np.ndarray, conditions=None,
                  seed: int = 0, ids=None) -> Batch:
    images = np.asarray(images, dtype=np.float64)
    if conditions is None:
        conditions = [random_conditions(s.spec.paradigm, len(images), np.random.default_rng([seed, i]))
                      for i, s in enumerate(ensemble)]
    outs, feats = [], []
    for s, c in zip(ensemble, conditions):
        o, f = forward_with_features(s, images, c)
        outs.append(o.data)
        feats.append(f.data)
    return Batch(images, list(conditions), outs, feats, list(ids or []))


def make_batches(ensemble: Sequence[Surrogate], dataset: ImageBatch, hp: HyperParams) -> list[Batch]:
    """Split ``dataset`` into batches with conditions fixed per (model, image) from ``hp.seed``."""
    n = len(dataset)
    conds = [random_conditions(s.spec.paradigm, n, np.random.default_rng([hp.seed, i]))
             for i, s in enumerate(ensemble)]
    out = []
    for start in range(0, n, hp.batch_size):
        sl = slice(start, start + hp.batch_size)
        out.append(prepare_batch(ensemble, dataset.images[sl], [c[sl] for c in conds], ids=dataset.ids[sl]))
    return out


# projection and update ------------------------------------------------------

def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(delta, -epsilon, epsilon)


def perturb(images, delta) -> T.Tensor:
    """Perturbed images clamped to the valid range; differentiable in ``delta``."""
    return T.clamp(T.add(images, delta), -1.0, 1.0)


def mifgsm_step(p: Perturbation, grad: np.ndarray, eta: float, mu: float = 1.0) -> Perturbation:
    """Momentum sign-descent step on an L1-normalized gradient, then projection."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != p.delta.shape:
        raise T.ShapeError(f"mifgsm_step: gradient {grad.shape} vs perturbation {p.delta.shape}")
    l1 = np.abs(grad).sum()
    if l1 == 0:
        log.info("zero gradient; skipping update")
        return p
    mom = mu * p.momentum + grad / l1
    delta = project_linf(p.delta - eta * np.sign(mom), p.epsilon)
    return replace(p, delta=delta, momentum=mom)


# losses ---------------------------------------------------------------------

def feature_losses(ensemble, batch: Batch, delta: T.Tensor, hp: HyperParams) -> list[T.Tensor]:
    x_adv = perturb(batch.images, delta)
    out = []
    for s, c, fc in zip(ensemble, batch.conditions, batch.clean_feat):
        fa = features(s, x_adv, c)
        out.append(feature_loss(feature_discrepancies(fc, fa), hp.component_weights))
    return out


def model_losses(ensemble, batch: Batch, delta: T.Tensor, hp: HyperParams) -> list[LossBundle]:
    x_adv = perturb(batch.images, delta)
    out = []
    for s, c, oc, fc in zip(ensemble, batch.conditions, batch.clean_out, batch.clean_feat):
        oa, fa = forward_with_features(s, x_adv, c)
        out.append(loss_bundle(oc, oa, fc, fa, hp.lam, hp.component_weights))
    return out


def summed_feature_distances(ensemble, batch: Batch, delta: np.ndarray) -> list[float]:
    """Per model, the batch-mean of sum_k ||d_k||_2 at ``delta``."""
    x_adv = perturb(batch.images, delta)
    out = []
    for s, c, fc in zip(ensemble, batch.conditions, batch.clean_feat):
        d = feature_discrepancies(fc, features(s, x_adv, c))
        out.append(float(sum(np.mean(x.data) for x in d.distances())))
    return out


# stages ---------------------------------------------------------------------

Observer = Callable[[str, Perturbation, Batch], None]


def stage1_feature_pass(p: Perturbation, ensemble, batch: Batch, hp: HyperParams,
                        observer: Observer | None = None) -> Perturbation:
    for _ in range(hp.t_in):
        if hp.alpha == 0:
            break
        with Tape() as tape:
            d = tape.watch(p.delta.copy())
            l_feat = aggregate_global_loss(uniform_weights(len(ensemble)), feature_losses(ensemble, batch, d, hp))
        (grad,) = tape.gradient(l_feat, [d])
        _check_finite(l_feat, "stage 1")
        p = mifgsm_step(p, grad, hp.alpha * hp.eta, hp.momentum_decay)
        if observer:
            observer("stage1", p, batch)
    return p


def stage2_equilibrium_pass(p: Perturbation, ensemble, batch: Batch, state: EquilibriumState,
                            hp: HyperParams, trace: RunTrace | None = None, weighting: str = "adaptive",
                            observer: Observer | None = None) -> tuple[Perturbation, EquilibriumState]:
    with Tape() as tape:
        d = tape.watch(p.delta.copy())
        bundles = model_losses(ensemble, batch, d, hp)
        l_total = [b.l_total for b in bundles]
        state = ema_update(state, l_total)
        if weighting == "adaptive":
            w = compute_weights(state.l_ema, state.temperature)
        elif weighting == "static":
            w = uniform_weights(len(ensemble))
        else:
            raise ValueError(f"unknown weighting {weighting!r}")
        l_global = aggregate_global_loss(w, l_total)
    _check_finite(l_global, "stage 2")
    (grad,) = tape.gradient(l_global, [d])
    p = mifgsm_step(p, grad, hp.eta, hp.momentum_decay)
    if observer:
        observer("stage2", p, batch)
    if trace is not None:
        trace.rows.append({
            "step": len(trace.rows),
            "l_e2e": [float(b.l_e2e.data) for b in bundles],
            "l_feat": [float(b.l_feat.data) for b in bundles],
            "l_total": [float(b.l_total.data) for b in bundles],
            "l_ema": state.l_ema.tolist(),
            "weights": w.tolist(),
            "l_global": float(l_global.data),
            "max_abs_delta": float(np.abs(p.delta).max()),
        })
    return p, state


def _check_finite(loss: T.Tensor, where: str) -> None:
    if not np.isfinite(loss.data).all():
        raise FloatingPointError(f"non-finite loss in {where}")


# full runs ------------------------------------------------------------------

def run_aef(ensemble, dataset, hp: HyperParams, weighting: str = "adaptive",
            observer: Observer | None = None) -> tuple[Perturbation, RunTrace]:
    """Optimize a universal perturbation over ``dataset`` (an ImageBatch or prepared batches)."""
    if weighting not in WEIGHTINGS:
        raise ValueError(f"unknown weighting {weighting!r}")
    ensemble = list(ensemble)
    if not ensemble:
        raise ValueError("ensemble is empty")
    batches = dataset if isinstance(dataset, list) else make_batches(ensemble, dataset, hp)
    if not batches:
        raise ValueError("dataset has no batches")
    shape = batches[0].images.shape[1:]
    p = Perturbation.random(shape, hp.epsilon, hp.seed)
    state = EquilibriumState(len(ensemble), hp.beta, hp.temperature)
    trace = RunTrace(models=[s.name for s in ensemble], weighting=weighting)
    for t in range(hp.t_out):
        for b, batch in enumerate(batches):
            try:
                p = stage1_feature_pass(p, ensemble, batch, hp, observer)
                trace.stage1_steps += hp.t_in if hp.alpha != 0 else 0
                p, state = stage2_equilibrium_pass(p, ensemble, batch, state, hp, trace, weighting, observer)
                trace.stage2_steps += 1
            except FloatingPointError as exc:
                raise FloatingPointError(f"outer iteration {t}, batch {b}: {exc}") from exc
        log.debug("iter %d weights %s", t, np.round(trace.rows[-1]["weights"], 3))
    trace.final_metrics = {m: summarize(rows) for m, rows in evaluate(ensemble, batches, p.delta).items()}
    return p, trace


def run_static_baseline(ensemble, dataset, hp: HyperParams,
                        observer: Observer | None = None) -> tuple[Perturbation, RunTrace]:
    return run_aef(ensemble, dataset, hp, weighting="static", observer=observer)


# evaluation -----------------------------------------------------------------

def evaluate(ensemble, batches: Sequence[Batch], delta: np.ndarray) -> dict[str, list[MetricsRow]]:
    """Per-image metrics of each model's disrupted output against its clean output."""
    result: dict[str, list[MetricsRow]] = {s.name: [] for s in ensemble}
    for batch in batches:
        x_adv = perturb(batch.images, delta)
        for s, c, oc in zip(ensemble, batch.conditions, batch.clean_out):
            oa = forward_with_features(s, x_adv, c)[0].data
            for k in range(len(batch.images)):
                img_id = batch.ids[k] if batch.ids else str(k)
                result[s.name].append(image_metrics(s.name, batch.images[k], oc[k], oa[k], img_id))
    return result


def eval_batches(ensemble, dataset: ImageBatch, seed: int, batch_size: int = 16) -> list[Batch]:
    hp = HyperParams(seed=seed, batch_size=batch_size)
    return make_batches(ensemble, dataset, hp)


def srmask_by_model(metrics: dict[str, list[MetricsRow]]) -> dict[str, float]:
    return {m: summarize(rows)["srmask_pct"] for m, rows in metrics.items()}
