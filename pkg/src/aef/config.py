"""Run configuration: a sectioned key=value file with a strict schema.

Every key is known up front; anything unrecognized is rejected so typos never
silently fall back to defaults.  :func:`dump_config` writes the fully resolved
configuration back out in a fixed order, and parsing that echo reproduces the
same :class:`RunConfig`.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .optimizer import HyperParams
from .surrogates import PARADIGMS, SurrogateSpec

SWEEP_PARAMS = {"T": "temperature", "alpha": "alpha", "lambda": "lam", "beta": "beta", "T_in": "t_in"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ImageSource:
    kind: str = "synthetic"  # synthetic | ppm
    n: int = 128
    seed: int = 0
    path: str = ""

    def __post_init__(self):
        if self.kind not in ("synthetic", "ppm"):
            raise ConfigError(f"image source must be 'synthetic' or 'ppm', got {self.kind!r}")
        if self.kind == "synthetic" and self.n < 1:
            raise ConfigError("image source needs n >= 1")
        if self.kind == "ppm" and not self.path:
            raise ConfigError("ppm image source needs a path")


@dataclass(frozen=True)
class SurrogateSettings:
    image_size: int = 32
    width: int = 16
    seed: int = 0
    pretrain_steps: int = 500
    pretrain_lr: float = 0.01
    pretrain_images: int = 16
    pretrain_seed: int = 1000
    min_disagreement: float = 0.2
    max_reseeds: int = 5


@dataclass
class RunConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    surrogates: SurrogateSettings = field(default_factory=SurrogateSettings)
    ensemble: dict = field(default_factory=dict)  # model id -> paradigm
    resistance: dict = field(default_factory=dict)  # model id -> blur sigma
    train_images: ImageSource = field(default_factory=ImageSource)
    eval_images: ImageSource = field(default_factory=lambda: ImageSource(n=32, seed=1))
    output_dir: str = "out"
    run_id: str = "aef"

    def specs(self) -> list[tuple[str, SurrogateSpec]]:
        """(model id, spec) pairs in config order; model i is seeded with ``seed + i``."""
        s = self.surrogates
        return [(mid, SurrogateSpec(par, s.image_size, s.width, s.seed + i, float(self.resistance.get(mid, 0.0))))
                for i, (mid, par) in enumerate(self.ensemble.items())]

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, hp=replace(self.hp, seed=seed), surrogates=replace(self.surrogates, seed=seed))


def default_config() -> RunConfig:
    """Four paradigms with the asymmetric resistance profile 0/0/1/2."""
    ens = {"ic": "input-concat", "li": "latent-injection", "am": "attention-mask", "si": "style-injection"}
    return RunConfig(ensemble=ens, resistance={"ic": 0.0, "li": 0.0, "am": 1.0, "si": 2.0})


# parsing --------------------------------------------------------------------

def _coerce(section: str, key: str, raw: str, like):
    try:
        if isinstance(like, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(float(v) for v in raw.split(","))
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def _fill(cls, section: str, items: dict, base=None):
    base = base if base is not None else cls()
    known = {f.name for f in fields(cls)}
    updates = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}; expected one of {sorted(known)}")
        current = getattr(base, key)
        if key == "step_size":
            updates[key] = None if raw.strip() in ("", "none", "None") else _coerce(section, key, raw, 0.0)
        else:
            updates[key] = _coerce(section, key, raw, current)
    try:
        return replace(base, **updates)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


_SECTIONS = ("run", "hyperparams", "surrogates", "ensemble", "resistance", "train_images", "eval_images", "output")


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep model ids and keys case-sensitive
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for name in cp.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]; expected one of {list(_SECTIONS)}")
    if not cp.has_section("ensemble"):
        raise ConfigError("missing [ensemble] section")

    cfg = RunConfig()
    sec = lambda name: dict(cp.items(name)) if cp.has_section(name) else {}
    run = sec("run")
    for key in run:
        if key != "run_id":
            raise ConfigError(f"[run] unknown key {key!r}; expected 'run_id'")
    cfg.run_id = run.get("run_id", cfg.run_id)
    cfg.hp = _fill(HyperParams, "hyperparams", sec("hyperparams"))
    cfg.surrogates = _fill(SurrogateSettings, "surrogates", sec("surrogates"))

    ensemble = sec("ensemble")
    if not ensemble:
        raise ConfigError("[ensemble] lists no models")
    for mid, par in ensemble.items():
        if par not in PARADIGMS:
            raise ConfigError(f"[ensemble] {mid}: unknown paradigm {par!r}; expected one of {PARADIGMS}")
    cfg.ensemble = ensemble
    resistance = {mid: 0.0 for mid in ensemble}
    for mid, raw in sec("resistance").items():
        if mid not in ensemble:
            raise ConfigError(f"[resistance] {mid!r} is not a model in [ensemble]")
        resistance[mid] = _coerce("resistance", mid, raw, 0.0)
    cfg.resistance = resistance

    cfg.train_images = _fill(ImageSource, "train_images", sec("train_images"))
    cfg.eval_images = _fill(ImageSource, "eval_images", sec("eval_images"), base=RunConfig().eval_images)
    out = sec("output")
    for key in out:
        if key != "dir":
            raise ConfigError(f"[output] unknown key {key!r}; expected 'dir'")
    cfg.output_dir = out.get("dir", cfg.output_dir)
    try:
        cfg.specs()
    except ValueError as exc:
        raise ConfigError(f"[surrogates] {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


# echo -----------------------------------------------------------------------

def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    """Fully resolved config text; floats use repr so they parse back exactly."""
    buf = io.StringIO()
    w = buf.write
    w(f"[run]\nrun_id = {cfg.run_id}\n\n")
    for name, obj in (("hyperparams", cfg.hp), ("surrogates", cfg.surrogates)):
        w(f"[{name}]\n")
        for f in fields(obj):
            w(f"{f.name} = {_render(getattr(obj, f.name))}\n")
        w("\n")
    w("[ensemble]\n")
    for mid, par in cfg.ensemble.items():
        w(f"{mid} = {par}\n")
    w("\n[resistance]\n")
    for mid in cfg.ensemble:
        w(f"{mid} = {_render(float(cfg.resistance.get(mid, 0.0)))}\n")
    for name, src in (("train_images", cfg.train_images), ("eval_images", cfg.eval_images)):
        w(f"\n[{name}]\n")
        for f in fields(src):
            w(f"{f.name} = {_render(getattr(src, f.name))}\n")
    w(f"\n[output]\ndir = {cfg.output_dir}\n")
    return buf.getvalue()
