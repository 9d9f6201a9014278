"""Disruption and fidelity metrics: edit mask, L2mask, SRmask, PSNR, SSIM.

Generator outputs live on the [-1, 1] scale; PSNR and SSIM expect images
already mapped to [0, 1] (see :func:`to_unit`).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

log = logging.getLogger(__name__)

SUCCESS_THRESHOLD = 0.05
MASK_THRESHOLD = 0.5
PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricsRow:
    model: str
    l2mask: float
    psnr_db: float
    ssim: float
    image_id: str = ""
    threshold: float = SUCCESS_THRESHOLD

    @property
    def success(self) -> bool:
        return self.l2mask > self.threshold

    def with_threshold(self, threshold: float) -> "MetricsRow":
        return MetricsRow(self.model, self.l2mask, self.psnr_db, self.ssim, self.image_id, threshold)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["success"] = self.success
        return d


def to_unit(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def edit_mask(x: np.ndarray, g_clean: np.ndarray, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Binary (H, W) mask of pixels the clean edit changed by more than ``threshold``.

    Falls back to all ones when the edit touched nothing.
    """
    x, g_clean = np.asarray(x), np.asarray(g_clean)
    if x.shape != g_clean.shape:
        raise ValueError(f"edit_mask: shapes {x.shape} and {g_clean.shape} differ")
    mask = (np.abs(g_clean - x).max(axis=-3) > threshold).astype(np.float64)
    if not mask.any():
        log.debug("empty edit mask; using the whole image")
        mask[...] = 1.0
    return mask


def l2mask(g_clean: np.ndarray, g_adv: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared output distortion over masked pixels (all channels)."""
    diff2 = (np.asarray(g_adv) - np.asarray(g_clean)) ** 2
    m = np.broadcast_to(mask, diff2.shape)
    total = m.sum()
    if total == 0:
        raise ValueError("l2mask: empty mask")
    return float((diff2 * m).sum() / total)


def srmask(rows) -> float:
    """Percentage of rows counted as successful disruptions, rounded to 2 decimals."""
    rows = list(rows)
    if not rows:
        raise ValueError("srmask needs at least one row")
    hits = sum(1 for r in rows if r.success)
    return round(100.0 * hits / len(rows), 2)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-1) @ g


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM over valid windows, per channel then averaged.

    Accepts (H, W) or (C, H, W) images in [0, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"ssim: image {a.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    # every channel has the same window count, so the grand mean is the channel average
    return float((num / den).mean())


def image_metrics(model: str, x: np.ndarray, g_clean: np.ndarray, g_adv: np.ndarray,
                  image_id: str = "", threshold: float = SUCCESS_THRESHOLD) -> MetricsRow:
    """Score one image: masked distortion plus PSNR/SSIM between clean and disrupted outputs."""
    mask = edit_mask(x, g_clean)
    return MetricsRow(
        model=model,
        l2mask=l2mask(g_clean, g_adv, mask),
        psnr_db=psnr(to_unit(g_clean), to_unit(g_adv)),
        ssim=ssim(to_unit(g_clean), to_unit(g_adv)),
        image_id=image_id,
        threshold=threshold,
    )


def summarize(rows) -> dict:
    rows = list(rows)
    return {
        "l2mask": float(np.mean([r.l2mask for r in rows])),
        "srmask_pct": srmask(rows),
        "psnr_db": float(np.mean([r.psnr_db for r in rows])),
        "ssim": float(np.mean([r.ssim for r in rows])),
        "n": len(rows),
    }
