"""Deep feature enhancement losses.

Feature maps are ``(C, h, w)`` or batched ``(N, C, h, w)``.  Batched inputs
yield per-image discrepancies; the scalar losses average the per-image values.
All losses are negated distances, so a more negative value is a stronger
disruption and every loss is zero when the perturbation is zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DEFAULT_COMPONENT_WEIGHTS = (1 / 3, 1 / 3, 1 / 3)
_SPATIAL = (-2, -1)
_IMAGE = (-3, -2, -1)


@dataclass
class FeatureDiscrepancy:
    d_local: Tensor
    d_global: Tensor
    d_structure: Tensor

    def components(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.d_local, self.d_global, self.d_structure

    def distances(self) -> list[Tensor]:
        """Per-image L2 norm of each component (scalars for unbatched input)."""
        out = []
        for d in self.components():
            axes = _IMAGE if d.ndim >= 3 else (-1,)
            out.append(T.norm(d, axis=axes))
        return out


@dataclass
class LossBundle:
    l_e2e: Tensor
    l_feat: Tensor
    l_total: Tensor
    per_component_distances: tuple[float, float, float]


def _check_feature(f: Tensor) -> None:
    if f.ndim not in (3, 4):
        raise ShapeError(f"feature map must be (C,h,w) or (N,C,h,w), got {f.shape}")


def instance_norm(f) -> Tensor:
    """Per-channel standardization over the spatial dims."""
    f = T.as_tensor(f)
    _check_feature(f)
    mu = T.mean(f, axis=_SPATIAL, keepdims=True)
    sigma = T.std(f, axis=_SPATIAL, keepdims=True)
    return (f - mu) / (sigma + T.STD_EPS)


def csa(f) -> Tensor:
    """Channel self-attention: softmax(V Vt / sqrt(hw)) V with V the flattened map."""
    f = T.as_tensor(f)
    _check_feature(f)
    c, h, w = f.shape[-3:]
    v = T.reshape(f, f.shape[:-2] + (h * w,))
    gram = T.matmul(v, T.swapaxes(v, -1, -2)) * (1.0 / np.sqrt(h * w))
    attn = T.softmax(gram, axis=-1)
    return T.reshape(T.matmul(attn, v), f.shape)


def channel_attention(f) -> np.ndarray:
    """The attention matrix used by :func:`csa`, for inspection."""
    f = T.as_tensor(f).data
    c, h, w = f.shape[-3:]
    v = f.reshape(f.shape[:-2] + (h * w,))
    gram = v @ np.swapaxes(v, -1, -2) / np.sqrt(h * w)
    return T.softmax(Tensor(gram), axis=-1).data


def feature_discrepancies(f_clean, f_adv) -> FeatureDiscrepancy:
    f_clean, f_adv = T.as_tensor(f_clean), T.as_tensor(f_adv)
    if f_clean.shape != f_adv.shape:
        raise ShapeError(f"feature_discrepancies: shapes {f_clean.shape} and {f_adv.shape} differ")
    _check_feature(f_clean)
    d_local = instance_norm(f_adv) - instance_norm(f_clean)

    mu_c = T.mean(f_clean, axis=_IMAGE, keepdims=True)
    mu_a = T.mean(f_adv, axis=_IMAGE, keepdims=True)
    sd_c = T.std(f_clean, axis=_IMAGE, keepdims=True)
    sd_a = T.std(f_adv, axis=_IMAGE, keepdims=True)
    denom = sd_c + T.STD_EPS
    # mean shift and std shift, stacked as two entries per image
    shift = T.concat([(mu_a - mu_c) / denom, (sd_a - sd_c) / denom], axis=-3)
    d_global = T.reshape(shift, f_clean.shape[:-3] + (2,))

    d_structure = csa(f_adv) - csa(f_clean)
    return FeatureDiscrepancy(d_local, d_global, d_structure)


def feature_loss(d: FeatureDiscrepancy, weights=DEFAULT_COMPONENT_WEIGHTS) -> Tensor:
    """-sum_k w_k ||d_k||_2, averaged over the batch."""
    if len(weights) != 3 or min(weights) < 0:
        raise ValueError(f"need three nonnegative component weights, got {weights}")
    dist = d.distances()
    total = dist[0] * float(weights[0]) + dist[1] * float(weights[1]) + dist[2] * float(weights[2])
    return -T.mean(total)


def e2e_loss(out_clean, out_adv) -> Tensor:
    """Negated root-mean-square output difference, averaged over the batch."""
    out_clean, out_adv = T.as_tensor(out_clean), T.as_tensor(out_adv)
    if out_clean.shape != out_adv.shape:
        raise ShapeError(f"e2e_loss: shapes {out_clean.shape} and {out_adv.shape} differ")
    n = int(np.prod(out_clean.shape[-3:]))
    dist = T.norm(out_adv - out_clean, axis=_IMAGE) * (1.0 / np.sqrt(n))
    return -T.mean(dist)


def composite_loss(l_e2e, l_feat, lam: float) -> Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return T.as_tensor(l_e2e) * (1.0 - lam) + T.as_tensor(l_feat) * lam


def loss_bundle(out_clean, out_adv, f_clean, f_adv, lam: float, weights=DEFAULT_COMPONENT_WEIGHTS) -> LossBundle:
    d = feature_discrepancies(f_clean, f_adv)
    l_feat = feature_loss(d, weights)
    l_e2e = e2e_loss(out_clean, out_adv)
    dists = tuple(float(np.mean(x.data)) for x in d.distances())
    return LossBundle(l_e2e, l_feat, composite_loss(l_e2e, l_feat, lam), dists)
