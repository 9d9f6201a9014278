"""Small frozen image-editing generators, one per conditioning paradigm.

* ``input-concat``: condition planes concatenated with the image at the first layer.
* ``latent-injection``: attribute-free encoder, condition joined at the bottleneck.
* ``attention-mask``: content branch blended into the input through a sigmoid mask.
* ``style-injection``: style code mapped to per-channel scale/shift on
  instance-normalized mid-level features.

Every model exposes one feature tap used by the feature losses.  Hidden
blocks are conv -> instance norm -> tanh: the normalization keeps small
models sensitive to small input shifts, and tanh keeps the whole graph
smooth so finite-difference checks of the attack gradient are exact up to
roundoff.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dfe import instance_norm
from .tensor import ShapeError, Tape, Tensor

log = logging.getLogger(__name__)

PARADIGMS = ("input-concat", "latent-injection", "attention-mask", "style-injection")
N_ATTRIBUTES = 4
STYLE_DIM = 8
MAX_STYLE_NORM = 4.0
EDIT_MAGNITUDE = 0.3
INIT_GAIN = 1.0


@dataclass(frozen=True)
class SurrogateSpec:
    paradigm: str
    image_size: int = 32
    width: int = 16
    seed: int = 0
    resistance_blur: float = 0.0

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"unknown paradigm {self.paradigm!r}; expected one of {PARADIGMS}")
        for name in ("image_size", "width"):
            v = getattr(self, name)
            if v < 1 or v & (v - 1):
                raise ValueError(f"{name} must be a power of two, got {v}")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if self.resistance_blur < 0:
            raise ValueError("resistance_blur must be >= 0")

    @property
    def condition_dim(self) -> int:
        return STYLE_DIM if self.paradigm == "style-injection" else N_ATTRIBUTES


@dataclass
class Surrogate:
    spec: SurrogateSpec
    weights: dict[str, np.ndarray]
    feature_tap: str
    history: dict = field(default_factory=dict)
    label: str = ""

    @property
    def name(self) -> str:
        return self.label or self.spec.paradigm

    def __call__(self, x, c):
        return forward_with_features(self, x, c)[0]


# fixed linear maps ----------------------------------------------------------

def pool_matrix(n: int) -> np.ndarray:
    p = np.zeros((n // 2, n))
    idx = np.arange(n // 2)
    p[idx, 2 * idx] = 0.5
    p[idx, 2 * idx + 1] = 0.5
    return p


def upsample_matrix(n: int) -> np.ndarray:
    """Nearest-neighbour 2x upsampling from n to 2n."""
    return 2.0 * pool_matrix(2 * n).T


def blur_matrix(n: int, sigma: float) -> np.ndarray:
    i = np.arange(n)
    k = np.exp(-((i[:, None] - i[None, :]) ** 2) / (2.0 * sigma * sigma))
    return k / k.sum(axis=1, keepdims=True)


def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    return T.matmul(T.matmul(rows, x), cols.T)


def avg_pool2(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    return _separable(x, pool_matrix(h), pool_matrix(w))


def upsample2(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    return _separable(x, upsample_matrix(h), upsample_matrix(w))


def gaussian_blur(x: Tensor, sigma: float) -> Tensor:
    if sigma <= 0:
        return x
    h, w = x.shape[-2:]
    return _separable(x, blur_matrix(h, sigma), blur_matrix(w, sigma))


# conditions -----------------------------------------------------------------

def validate_condition(c: np.ndarray, paradigm: str) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    dim = STYLE_DIM if paradigm == "style-injection" else N_ATTRIBUTES
    if c.shape[-1] != dim or c.ndim not in (1, 2):
        raise ShapeError(f"{paradigm}: condition must have trailing size {dim}, got {c.shape}")
    if dim == N_ATTRIBUTES:
        if not np.all(np.abs(c) == 1.0):
            raise ValueError("attribute entries must be exactly +-1")
    elif np.any(np.linalg.norm(c, axis=-1) > MAX_STYLE_NORM + 1e-12):
        raise ValueError(f"style codes must have L2 norm <= {MAX_STYLE_NORM}")
    return c


def random_conditions(paradigm: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if paradigm == "style-injection":
        s = rng.standard_normal((n, STYLE_DIM))
        nrm = np.linalg.norm(s, axis=1, keepdims=True)
        return s * np.minimum(1.0, MAX_STYLE_NORM / np.maximum(nrm, 1e-12))
    return rng.choice([-1.0, 1.0], size=(n, N_ATTRIBUTES))


def edit_coefficients(c: np.ndarray) -> np.ndarray:
    """Signed strength of the four procedural effects for a condition."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1] == STYLE_DIM:
        return np.tanh(c[..., :N_ATTRIBUTES] + 0.5 * c[..., N_ATTRIBUTES:])
    return c


def procedural_edit(x, c, magnitude: float = EDIT_MAGNITUDE) -> np.ndarray:
    """Ground-truth edit: brightness, upper-half red tint, contrast, horizontal ramp."""
    x = np.asarray(T.as_tensor(x).data, dtype=np.float64)
    squeeze = x.ndim == 3
    xb = x[None] if squeeze else x
    coef = edit_coefficients(c)
    coef = np.broadcast_to(coef.reshape(-1, N_ATTRIBUTES), (xb.shape[0], N_ATTRIBUTES)) * magnitude
    h, w = xb.shape[-2:]
    k = coef[:, :, None, None, None]
    out = xb + k[:, 0]
    tint = np.zeros((3, h, w))
    tint[0, : h // 2] = 1.0
    out = out + k[:, 1] * tint
    out = out + k[:, 2] * xb
    ramp = np.broadcast_to(np.linspace(-1.0, 1.0, w), (3, h, w))
    out = out + k[:, 3] * ramp
    out = np.clip(out, -1.0, 1.0)
    return out[0] if squeeze else out


# construction ---------------------------------------------------------------

def _layout(spec: SurrogateSpec) -> tuple[list[tuple[str, tuple]], str]:
    w = spec.width
    a = N_ATTRIBUTES
    if spec.paradigm == "input-concat":
        shapes = [
            ("conv1", (w, 3 + a, 3, 3)),
            ("conv2", (w, w, 3, 3)),
            ("conv3", (w, w, 3, 3)),
            ("conv4", (3, w, 3, 3)),
        ]
        return shapes, "block2"
    if spec.paradigm == "latent-injection":
        z = 8
        shapes = [
            ("enc1", (w, 3, 3, 3)),
            ("enc2", (z, w, 3, 3)),
            ("dec1", (w, z + z + a, 3, 3)),
            ("dec2", (w, w, 3, 3)),
            ("dec3", (3, w, 3, 3)),
        ]
        return shapes, "bottleneck"
    if spec.paradigm == "attention-mask":
        shapes = [
            ("trunk", (w, 3 + a, 3, 3)),
            ("content1", (w, w, 3, 3)),
            ("content2", (w, w, 3, 3)),
            ("content3", (3, w, 3, 3)),
            ("mask1", (w, w, 3, 3)),
            ("mask2", (1, w, 3, 3)),
        ]
        return shapes, "content2"
    shapes = [
        ("style1", (STYLE_DIM, w)),
        ("style_scale", (w, w)),
        ("style_shift", (w, w)),
        ("conv1", (w, 3, 3, 3)),
        ("conv2", (w, w, 3, 3)),
        ("conv3", (w, w, 3, 3)),
        ("conv4", (3, w, 3, 3)),
    ]
    return shapes, "pre_injection"


def build_surrogate(spec: SurrogateSpec, label: str = "") -> Surrogate:
    """Seeded Gaussian init with std gain/sqrt(fan_in); biases start at zero."""
    if spec.paradigm not in PARADIGMS:
        raise ValueError(f"unknown paradigm {spec.paradigm!r}")
    rng = np.random.default_rng(spec.seed)
    shapes, tap = _layout(spec)
    weights = {}
    for name, shape in shapes:
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        weights[name] = rng.standard_normal(shape) * (INIT_GAIN / np.sqrt(fan_in))
        n_out = shape[0] if len(shape) == 4 else shape[1]
        weights[name + ".b"] = np.zeros(n_out)
    return Surrogate(spec=spec, weights=weights, feature_tap=tap, label=label)


def _condition_planes(c: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    c = np.broadcast_to(c.reshape(-1, c.shape[-1]), (n, c.shape[-1]))
    return np.broadcast_to(c[:, :, None, None], (n, c.shape[1], h, w))


def _conv(p, name, x):
    return T.conv2d(x, p[name], p[name + ".b"])


def _block(p, name, x):
    """conv -> instance norm -> tanh; normalization keeps the blocks sensitive to small input shifts."""
    return T.tanh(instance_norm(_conv(p, name, x)))


def _forward(spec: SurrogateSpec, p: dict, x: Tensor, c: np.ndarray, probes: dict | None = None, until_tap: bool = False):
    n, _, h, w = x.shape
    x = gaussian_blur(x, spec.resistance_blur)
    paradigm = spec.paradigm

    if paradigm == "input-concat":
        h0 = T.concat([x, _condition_planes(c, n, h, w)], axis=1)
        h1 = _block(p, "conv1", h0)
        feat = _block(p, "conv2", h1)
        if until_tap:
            return None, feat
        h3 = _block(p, "conv3", feat)
        out = T.tanh(_conv(p, "conv4", h3))
        return out, feat

    if paradigm == "latent-injection":
        e1 = avg_pool2(_block(p, "enc1", x))
        feat = avg_pool2(_block(p, "enc2", e1))
        if until_tap:
            return None, feat
        hz, wz = feat.shape[-2:]
        pooled = T.mean(feat, axis=(2, 3), keepdims=True)
        code = T.concat([pooled, _condition_planes(c, n, 1, 1)], axis=1)
        code = T.mul(code, np.ones((1, 1, hz, wz)))
        d0 = T.concat([feat, code], axis=1)
        d1 = upsample2(_block(p, "dec1", d0))
        d2 = upsample2(_block(p, "dec2", d1))
        out = T.tanh(_conv(p, "dec3", d2))
        return out, feat

    if paradigm == "attention-mask":
        h0 = T.concat([x, _condition_planes(c, n, h, w)], axis=1)
        trunk = _block(p, "trunk", h0)
        c1 = _block(p, "content1", trunk)
        feat = _block(p, "content2", c1)
        if until_tap:
            return None, feat
        edit = T.tanh(_conv(p, "content3", feat))
        m1 = _block(p, "mask1", trunk)
        mask = T.sigmoid(_conv(p, "mask2", m1))
        if probes is not None:
            probes["mask"] = mask.data
        out = mask * edit + (1.0 - mask) * x
        return out, feat

    h1 = _block(p, "conv1", x)
    feat = _block(p, "conv2", h1)
    if until_tap:
        return None, feat
    s = np.broadcast_to(c.reshape(-1, STYLE_DIM), (n, STYLE_DIM))
    st = T.tanh(T.matmul(s, p["style1"]) + p["style1.b"])
    scale = T.reshape(T.matmul(st, p["style_scale"]) + p["style_scale.b"], (n, spec.width, 1, 1))
    shift = T.reshape(T.matmul(st, p["style_shift"]) + p["style_shift.b"], (n, spec.width, 1, 1))
    mixed = T.tanh(instance_norm(feat) * (1.0 + scale) + shift)
    h3 = _block(p, "conv3", mixed)
    out = T.tanh(_conv(p, "conv4", h3))
    return out, feat


def _check_input(s: Surrogate, x: Tensor) -> tuple[Tensor, bool]:
    size = s.spec.image_size
    squeeze = x.ndim == 3
    xb = T.reshape(x, (1,) + x.shape) if squeeze else x
    if xb.ndim != 4 or xb.shape[1:] != (3, size, size):
        raise ShapeError(f"{s.name}: expected input (3,{size},{size}) or batched, got {x.shape}")
    return xb, squeeze


def forward_with_features(s: Surrogate, x, c, params: dict | None = None, probes: dict | None = None):
    """Return ``(output, feature)`` for image(s) ``x`` under condition(s) ``c``.

    Both results are differentiable with respect to ``x`` on the active tape.
    ``params`` overrides the frozen weights (used for pretraining).
    """
    return _run(s, x, c, params, probes, until_tap=False)


def features(s: Surrogate, x, c) -> Tensor:
    """Activation at the feature tap, skipping the layers after it."""
    return _run(s, x, c, None, None, until_tap=True)[1]


def _run(s, x, c, params, probes, until_tap):
    x = T.as_tensor(x)
    xb, squeeze = _check_input(s, x)
    c = validate_condition(c, s.spec.paradigm)
    if c.ndim == 2 and c.shape[0] not in (1, xb.shape[0]):
        raise ShapeError(f"{s.name}: {c.shape[0]} conditions for {xb.shape[0]} images")
    p = params if params is not None else s.weights
    out, feat = _forward(s.spec, p, xb, c, probes, until_tap)
    if squeeze:
        if out is not None:
            out = T.reshape(out, out.shape[1:])
        feat = T.reshape(feat, feat.shape[1:])
    return out, feat


def attention_mask(s: Surrogate, x, c) -> np.ndarray:
    if s.spec.paradigm != "attention-mask":
        raise ValueError("only attention-mask surrogates have a spatial mask")
    probes: dict = {}
    forward_with_features(s, x, c, probes=probes)
    return probes["mask"]


# pretraining ----------------------------------------------------------------

def pretrain(s: Surrogate, batch: np.ndarray, steps: int = 500, lr: float = 0.01, seed: int = 0) -> Surrogate:
    """Fit the surrogate to :func:`procedural_edit` by plain gradient descent on MSE.

    Conditions are resampled every step from ``seed``.  Returns a new
    surrogate; initial and final losses land in ``history``.
    """
    if steps < 1:
        raise ValueError("pretrain needs steps >= 1")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[0] < 16:
        raise ValueError(f"pretrain needs a batch of >= 16 images, got shape {batch.shape}")
    rng = np.random.default_rng(seed)
    weights = {k: v.copy() for k, v in s.weights.items()}
    names = list(weights)
    eval_c = random_conditions(s.spec.paradigm, batch.shape[0], np.random.default_rng(seed + 1))
    eval_target = procedural_edit(batch, eval_c)

    def eval_loss(w):
        out, _ = forward_with_features(s, batch, eval_c, params=w)
        return float(np.mean((out.data - eval_target) ** 2))

    initial = eval_loss(weights)
    for _ in range(steps):
        c = random_conditions(s.spec.paradigm, batch.shape[0], rng)
        target = procedural_edit(batch, c)
        with Tape() as tape:
            params = {k: tape.watch(weights[k]) for k in names}
            out, _ = forward_with_features(s, batch, c, params=params)
            diff = out - target
            loss = T.mean(diff * diff)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"pretraining diverged (loss={value}); try a smaller lr than {lr}")
        grads = tape.gradient(loss, [params[k] for k in names])
        for k, g in zip(names, grads):
            weights[k] -= lr * g
    final = eval_loss(weights)
    if not np.isfinite(final):
        raise FloatingPointError(f"pretraining diverged; try a smaller lr than {lr}")
    history = {"initial_loss": initial, "final_loss": final, "steps": steps, "lr": lr}
    log.info("%s pretrained: loss %.4f -> %.4f", s.name, history["initial_loss"], history["final_loss"])
    return Surrogate(spec=s.spec, weights=weights, feature_tap=s.feature_tap, history=history, label=s.label)


def input_gradient(s: Surrogate, x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Gradient of the mean squared output change direction used for the sign-pattern check."""
    with Tape() as tape:
        xt = tape.watch(np.array(x, dtype=np.float64))
        out, _ = forward_with_features(s, xt, c)
        loss = T.mean(out * out)
    return tape.gradient(loss, [xt])[0]


def sign_disagreement(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.sign(a) != np.sign(b)))
