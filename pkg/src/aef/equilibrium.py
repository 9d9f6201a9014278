"""Adaptive weighting of ensemble members from smoothed losses.

Losses are negated distances, so the member whose smoothed loss is highest
(closest to zero) is the one resisting the perturbation, and the softmax
hands it the largest share of the next update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class EquilibriumState:
    n_models: int
    beta: float = 0.9
    temperature: float = 0.1
    l_ema: np.ndarray = field(default=None)
    iteration: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.l_ema is None:
            self.l_ema = np.zeros(self.n_models)
        self.l_ema = np.asarray(self.l_ema, dtype=np.float64)

    @property
    def weights(self) -> np.ndarray:
        return compute_weights(self.l_ema, self.temperature)


def ema_update(state: EquilibriumState, losses) -> EquilibriumState:
    """One smoothing step, l_ema <- beta * l_ema + (1 - beta) * loss, without bias correction."""
    losses = np.asarray([float(T.as_tensor(v).data) for v in losses])
    if losses.shape != state.l_ema.shape:
        raise ShapeError(f"ema_update: {losses.size} losses for {state.l_ema.size} models")
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise FloatingPointError(f"non-finite loss for model index {int(bad[0])}: {losses[bad[0]]}")
    l_ema = state.beta * state.l_ema + (1.0 - state.beta) * losses
    return EquilibriumState(state.n_models, state.beta, state.temperature, l_ema, state.iteration + 1)


def compute_weights(l_ema, temperature: float) -> np.ndarray:
    """Temperature softmax over smoothed losses (max-subtracted)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(l_ema, dtype=np.float64) / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def aggregate_global_loss(weights, losses) -> Tensor:
    """Weighted sum of per-model losses.  Weights enter as constants."""
    weights = np.asarray(weights, dtype=np.float64)
    losses = list(losses)
    if weights.shape != (len(losses),):
        raise ShapeError(f"aggregate_global_loss: {weights.size} weights for {len(losses)} losses")
    total = T.as_tensor(losses[0]) * float(weights[0])
    for w, loss in zip(weights[1:], losses[1:]):
        total = total + T.as_tensor(loss) * float(w)
    return total
