"""Synthetic faces, PPM images, perturbation/weight files and report writers.

Every writer here is byte-deterministic for identical inputs.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass, is_dataclass
from pathlib import Path

import numpy as np

PERTURBATION_MAGIC = b"AEFP"
WEIGHTS_MAGIC = b"AEFW"
FORMAT_VERSION = 1
_PERT_HEADER = struct.Struct("<4sHHHd")

REPORT_COLUMNS = ("run_id", "model", "iteration", "l2mask", "srmask_pct", "psnr_db", "ssim", "weight", "l_ema")
AGGREGATE_MODEL = "ALL"


class FormatError(ValueError):
    pass


@dataclass
class ImageBatch:
    images: np.ndarray
    ids: list[str]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 or self.images.shape[1] != 3 or len(self.images) < 1:
            raise ValueError(f"ImageBatch needs N x 3 x H x W with N >= 1, got {self.images.shape}")
        if len(self.ids) != len(self.images):
            raise ValueError("one id per image required")
        if self.images.min() < -1.0 or self.images.max() > 1.0:
            raise ValueError("image values must lie in [-1, 1]")

    def __len__(self):
        return len(self.images)

    @property
    def size(self) -> int:
        return self.images.shape[-1]

    def batches(self, batch_size: int) -> list["ImageBatch"]:
        return [ImageBatch(self.images[i:i + batch_size], self.ids[i:i + batch_size])
                for i in range(0, len(self), batch_size)]


# synthetic faces ------------------------------------------------------------

def _face(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)

    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5) + 0.5
    bg_a, bg_b = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    img = bg_a[:, None, None] * (1 - ramp) + bg_b[:, None, None] * ramp

    cx, cy = 0.5 + rng.uniform(-0.05, 0.05), 0.52 + rng.uniform(-0.05, 0.05)
    ax, ay = rng.uniform(0.26, 0.34), rng.uniform(0.34, 0.42)
    r = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
    face = 1.0 / (1.0 + np.exp((r - 1.0) * 12.0))
    skin = np.array([0.85, 0.64, 0.50]) + rng.uniform(-0.15, 0.15) + rng.uniform(-0.06, 0.06, 3)
    skin = np.clip(skin, 0.05, 0.95)
    img = img * (1 - face) + skin[:, None, None] * face

    eye_y = cy - 0.1 * ay / 0.38
    eye_dx = rng.uniform(0.10, 0.14)
    eye_r = rng.uniform(0.035, 0.05)
    for ex in (cx - eye_dx, cx + eye_dx):
        blob = np.exp(-((xx - ex) ** 2 + (yy - eye_y) ** 2) / (2 * eye_r ** 2))
        img = img * (1 - 0.85 * blob)

    mouth_y = cy + rng.uniform(0.14, 0.2)
    band = np.exp(-((yy - mouth_y) ** 2) / (2 * 0.025 ** 2)) * (np.abs(xx - cx) < rng.uniform(0.08, 0.13))
    lip = np.array([0.6, 0.15, 0.2])
    img = img * (1 - 0.8 * band) + 0.8 * band * lip[:, None, None]
    return np.clip(img * 2.0 - 1.0, -1.0, 1.0)


def gen_synthetic_faces(n: int, size: int = 32, seed: int = 0) -> ImageBatch:
    """Procedural face-like images, fully determined by (n, size, seed)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if size not in (16, 32):
        raise ValueError(f"size must be 16 or 32, got {size}")
    rng = np.random.default_rng(seed)
    images = np.stack([_face(rng, size) for _ in range(n)])
    return ImageBatch(images, [f"syn{seed}-{i:04d}" for i in range(n)])


# PPM ------------------------------------------------------------------------

def _to_bytes(image: np.ndarray) -> bytes:
    q = np.rint((np.clip(image, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    return q.transpose(1, 2, 0).tobytes()


def save_ppm(image: np.ndarray, path) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"save_ppm expects a 3 x H x W image, got {image.shape}")
    h, w = image.shape[1:]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + _to_bytes(image))


def load_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    pos = 0

    def token() -> tuple[bytes, int]:
        nonlocal pos
        while True:
            while pos < len(raw) and raw[pos:pos + 1].isspace():
                pos += 1
            if pos < len(raw) and raw[pos:pos + 1] == b"#":
                while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
                continue
            break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header at byte {start}")
        return raw[start:pos], start

    magic, off = token()
    if magic != b"P6":
        raise FormatError(f"{path}: bad magic {magic!r} at byte {off}, expected P6")
    fields = []
    for what in ("width", "height", "maxval"):
        tok, off = token()
        if not tok.isdigit() or int(tok) <= 0:
            raise FormatError(f"{path}: bad {what} {tok!r} at byte {off}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} at byte {off} unsupported, expected 255")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing separator after header at byte {pos}")
    pos += 1
    need = 3 * w * h
    if len(raw) - pos < need:
        raise FormatError(f"{path}: truncated pixel data at byte {len(raw)}, expected {need} bytes from {pos}")
    pix = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return pix.transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0


def load_ppm_dir(directory) -> ImageBatch:
    paths = sorted(Path(directory).glob("*.ppm"))
    if not paths:
        raise FileNotFoundError(f"no .ppm files in {directory}")
    return ImageBatch(np.stack([load_ppm(p) for p in paths]), [p.stem for p in paths])


# perturbation file ----------------------------------------------------------

def save_perturbation(delta: np.ndarray, epsilon: float, path) -> None:
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim != 3 or delta.shape[0] != 3:
        raise ValueError(f"perturbation must be 3 x H x W, got {delta.shape}")
    if np.abs(delta).max(initial=0.0) > epsilon:
        raise FormatError(f"perturbation exceeds its budget {epsilon}")
    h, w = delta.shape[1:]
    header = _PERT_HEADER.pack(PERTURBATION_MAGIC, FORMAT_VERSION, h, w, float(epsilon))
    Path(path).write_bytes(header + delta.astype("<f8").tobytes())


def load_perturbation(path) -> tuple[np.ndarray, float]:
    """Return ``(delta, epsilon)`` after validating header, length and budget."""
    raw = Path(path).read_bytes()
    if len(raw) < _PERT_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, h, w, eps = _PERT_HEADER.unpack_from(raw)
    if magic != PERTURBATION_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    need = 3 * h * w * 8
    if len(raw) - _PERT_HEADER.size != need:
        raise FormatError(f"{path}: payload is {len(raw) - _PERT_HEADER.size} bytes, header implies {need}")
    delta = np.frombuffer(raw, dtype="<f8", offset=_PERT_HEADER.size).reshape(3, h, w).astype(np.float64)
    if np.abs(delta).max(initial=0.0) > eps:
        raise FormatError(f"{path}: payload value {np.abs(delta).max():.6g} exceeds budget {eps}")
    return delta, eps


# surrogate weights ----------------------------------------------------------

def save_weights(surrogate, path) -> None:
    meta = json.dumps({"spec": asdict(surrogate.spec), "feature_tap": surrogate.feature_tap,
                       "label": surrogate.label}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(struct.pack("<4sHI", WEIGHTS_MAGIC, FORMAT_VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<H", len(surrogate.weights)))
    for name, arr in surrogate.weights.items():
        enc = name.encode()
        buf.write(struct.pack("<H", len(enc)) + enc)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.asarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_weights(path):
    from .surrogates import Surrogate, SurrogateSpec

    raw = Path(path).read_bytes()
    try:
        magic, version, meta_len = struct.unpack_from("<4sHI", raw)
        if magic != WEIGHTS_MAGIC or version != FORMAT_VERSION:
            raise FormatError(f"{path}: not an AEFW v{FORMAT_VERSION} file")
        pos = 10
        meta = json.loads(raw[pos:pos + meta_len])
        pos += meta_len
        (count,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        weights = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(raw):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            weights[name] = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated weights file") from exc
    return Surrogate(SurrogateSpec(**meta["spec"]), weights, meta["feature_tap"], label=meta["label"])


# reports --------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


def summary_rows(run_id: str, rows, trace=None, tags: dict | None = None) -> list[dict]:
    """One row per model (in first-seen order) plus an ``ALL`` aggregate row."""
    from .metrics import summarize

    by_model: dict[str, list] = {}
    for r in rows:
        by_model.setdefault(r.model, []).append(r)
    final = trace.final_state() if trace is not None and trace.rows else {}
    out = []
    for model, mrows in by_model.items():
        s = summarize(mrows)
        row = {"run_id": run_id, "model": model, "iteration": None, "l2mask": s["l2mask"],
               "srmask_pct": s["srmask_pct"], "psnr_db": s["psnr_db"], "ssim": s["ssim"],
               "weight": final.get(model, {}).get("weight"), "l_ema": final.get(model, {}).get("l_ema")}
        if tags:
            row["role"] = tags.get(model, "")
        out.append(row)
    agg = {"run_id": run_id, "model": AGGREGATE_MODEL, "iteration": None,
           "l2mask": float(np.mean([r["l2mask"] for r in out])),
           "srmask_pct": float(np.mean([r["srmask_pct"] for r in out])),
           "psnr_db": float(np.mean([r["psnr_db"] for r in out])),
           "ssim": float(np.mean([r["ssim"] for r in out])),
           "weight": None, "l_ema": None}
    if tags:
        agg["role"] = ""
    out.append(agg)
    return out


def trace_rows(run_id: str, trace) -> list[dict]:
    out = []
    for row in trace.rows:
        for i, model in enumerate(trace.models):
            out.append({"run_id": run_id, "model": model, "iteration": row["step"], "l2mask": None,
                        "srmask_pct": None, "psnr_db": None, "ssim": None,
                        "weight": row["weights"][i], "l_ema": row["l_ema"][i]})
    return out


def _jsonable(obj):
    if is_dataclass(obj):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_csv(records: list[dict], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for rec in records:
        run_id = rec["run_id"] + (f":{rec['role']}" if rec.get("role") else "")
        writer.writerow([run_id, rec["model"]] + [_fmt(rec[c]) for c in REPORT_COLUMNS[2:]])
    _write(path, buf.getvalue())


def write_json(payload: dict, path) -> None:
    _write(path, json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def _write(path, text: str) -> None:
    path = Path(path)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def write_report(trace, rows, path, fmt: str = "csv", run_id: str = "run", hp=None,
                 mode: str = "summary", tags: dict | None = None, extra: dict | None = None) -> Path:
    """Write metrics (and optionally the per-iteration trace) as CSV or JSON.

    ``mode="summary"`` gives one row per model plus an aggregate; ``"trace"``
    gives one row per Stage-2 step and model.  JSON output also echoes ``hp``.
    """
    rows = list(rows)
    if not rows and (trace is None or not trace.rows):
        raise ValueError("write_report needs metrics rows or a nonempty trace")
    if mode == "summary":
        records = summary_rows(run_id, rows, trace, tags)
    elif mode == "trace":
        records = trace_rows(run_id, trace)
    else:
        raise ValueError(f"unknown report mode {mode!r}")
    if fmt == "csv":
        write_csv(records, path)
    elif fmt == "json":
        payload = {"run_id": run_id, "columns": list(REPORT_COLUMNS), "rows": records,
                   "config": hp, "trace": trace.rows if trace is not None else [],
                   "models": trace.models if trace is not None else []}
        if extra:
            payload["extra"] = extra
        write_json(payload, path)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return Path(path)
