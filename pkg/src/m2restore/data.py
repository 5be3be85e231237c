"""Synthetic weather-degradation corpus.

Clean scenes are procedural (sky gradient, flat-shaded rectangles and
disks, multi-scale texture). Four degraders corrupt them:

* rain: additive oriented line segments with a Gaussian cross profile
* snow: alpha-blended soft white disks
* haze: scattering law ``I = J * t + A * (1 - t)`` with constant ``t``
* raindrop: disk-shaped regions replaced by a blurred, brightened copy

Each degrader is the identity at its null parameter (no streaks, flakes or
drops; ``t = 1``). Images are ``(3, H, W)`` float64 in ``[0, 1]``.

On disk a corpus is one directory per split holding P6 PPM pairs and a
``manifest.txt`` with one ``key=value`` line per sample.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, zoom

from .config import DEGRADATION_TYPES, DegradeParams, RunConfig, class_index
from .errors import ConfigError, ContractError

MANIFEST = "manifest.txt"
SPLITS = ("train", "val")

# integer-valued parameters; everything else is a float
_INT_PARAMS = {"rain_count", "snow_count", "raindrop_count"}


@dataclass
class Sample:
    clean: np.ndarray
    degraded: np.ndarray
    label: int
    seed: int
    kind: str = ""
    params: Optional[dict] = None
    sample_id: str = ""


# ---------------------------------------------------------------- scenes

def synth_clean(seed: int, H: int, W: int) -> np.ndarray:
    """Deterministic procedural scene with structure at several scales."""
    if H < 16 or W < 16:
        raise ContractError(f"synth_clean needs H, W >= 16, got {H}x{W}")
    rng = np.random.default_rng([int(seed), 0])
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, H), np.linspace(0.0, 1.0, W), indexing="ij")

    top, bottom = rng.uniform(0.2, 0.9, size=(2, 3))
    tilt = rng.uniform(-0.3, 0.3)
    ramp = np.clip(yy + tilt * (xx - 0.5), 0.0, 1.0)
    img = top[:, None, None] * (1 - ramp) + bottom[:, None, None] * ramp

    for _ in range(int(rng.integers(3, 7))):
        y0, x0 = rng.uniform(0, 0.85, size=2)
        h, w = rng.uniform(0.1, 0.45, size=2)
        color = rng.uniform(0.05, 0.95, size=3)
        inside = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        img[:, inside] = color[:, None]
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.05, 0.2)
        color = rng.uniform(0.05, 0.95, size=3)
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[:, inside] = color[:, None]

    coarse = rng.normal(0.0, 1.0, size=(3, max(H // 8, 2), max(W // 8, 2)))
    smooth = zoom(coarse, (1, H / coarse.shape[1], W / coarse.shape[2]), order=1)[:, :H, :W]
    fine = rng.normal(0.0, 1.0, size=(3, H, W))
    img = img + 0.04 * smooth + 0.02 * fine
    return np.clip(img, 0.0, 1.0)


# ------------------------------------------------------------ degraders

def draw_params(kind: str, ranges: DegradeParams, rng: np.random.Generator) -> dict:
    """Concrete parameters for one degradation, sampled uniformly from ``ranges``."""
    _check_kind(kind)
    out = {}
    for f in fields(ranges):
        if not f.name.startswith(kind + "_"):
            continue
        lo, hi = getattr(ranges, f.name)
        out[f.name] = int(rng.integers(lo, hi + 1)) if f.name in _INT_PARAMS else float(rng.uniform(lo, hi))
    return out


def degrade(clean: np.ndarray, kind: str, params: Mapping, seed: int) -> np.ndarray:
    """Apply degradation ``kind`` with concrete ``params``; deterministic per ``seed``."""
    _check_kind(kind)
    clean = np.asarray(clean, dtype=np.float64)
    rng = np.random.default_rng([int(seed), 1])
    p = dict(params)
    if kind == "rain":
        out = _rain(clean, p, rng)
    elif kind == "snow":
        out = _snow(clean, p, rng)
    elif kind == "haze":
        out = haze(clean, p["haze_t"], p["haze_airlight"])
    else:
        out = _raindrop(clean, p, rng)
    return np.clip(out, 0.0, 1.0)


def haze(clean: np.ndarray, t: float, airlight: float) -> np.ndarray:
    return clean * t + airlight * (1.0 - t)


def _check_kind(kind: str) -> None:
    if kind not in DEGRADATION_TYPES:
        raise ConfigError(f"unknown degradation type {kind!r}; choose from {DEGRADATION_TYPES}")


def _grid(shape):
    H, W = shape[-2:]
    return np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")


def _rain(img, p, rng):
    n = int(p.get("rain_count", 0))
    if n == 0:
        return img.copy()
    H, W = img.shape[-2:]
    yy, xx = _grid(img.shape)
    theta = np.deg2rad(p["rain_angle"])
    dy, dx = np.cos(theta), np.sin(theta)           # direction, measured from vertical
    half = 0.5 * p["rain_length"]
    width = p["rain_width"]
    overlay = np.zeros((H, W))
    for _ in range(n):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        strength = p["rain_intensity"] * rng.uniform(0.6, 1.0)
        ry, rx = yy - cy, xx - cx
        along = np.clip(ry * dy + rx * dx, -half, half)
        d2 = (ry - along * dy) ** 2 + (rx - along * dx) ** 2
        overlay = np.maximum(overlay, strength * np.exp(-d2 / (2 * width * width)))
    return img + overlay[None]


def _soft_disk(yy, xx, cy, cx, r):
    return np.clip(r + 0.5 - np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2), 0.0, 1.0)


def _snow(img, p, rng):
    n = int(p.get("snow_count", 0))
    out = img.copy()
    if n == 0:
        return out
    H, W = img.shape[-2:]
    yy, xx = _grid(img.shape)
    for _ in range(n):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        r = p["snow_radius"] * rng.uniform(0.7, 1.3)
        alpha = p["snow_opacity"] * _soft_disk(yy, xx, cy, cx, r)
        out = out * (1 - alpha) + alpha
    return out


def _raindrop(img, p, rng):
    n = int(p.get("raindrop_count", 0))
    out = img.copy()
    if n == 0:
        return out
    H, W = img.shape[-2:]
    yy, xx = _grid(img.shape)
    blurred = gaussian_filter(img, sigma=(0, p["raindrop_blur"], p["raindrop_blur"]), mode="nearest")
    lens = blurred + p["raindrop_lift"]
    for _ in range(n):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        r = p["raindrop_radius"] * rng.uniform(0.7, 1.3)
        m = _soft_disk(yy, xx, cy, cx, r)
        out = out * (1 - m) + lens * m
    return out


# ---------------------------------------------------------------- corpus

def sample_seed(corpus_seed: int, split: str, kind: str, index: int) -> int:
    ss = np.random.SeedSequence([int(corpus_seed), SPLITS.index(split), class_index(kind), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def make_sample(seed: int, kind: str, ranges: DegradeParams, size: int, sample_id: str = "",
                params: Optional[Mapping] = None) -> Sample:
    """Build one sample. ``params`` overrides the draw from ``ranges`` (manifest replay)."""
    if params is None:
        params = draw_params(kind, ranges, np.random.default_rng([int(seed), 2]))
    clean = synth_clean(seed, size, size)
    degraded = degrade(clean, kind, params, seed)
    return Sample(quantize(clean) / 255.0, quantize(degraded) / 255.0, class_index(kind), int(seed),
                  kind, dict(params), sample_id)


def quantize(img: np.ndarray) -> np.ndarray:
    """``[0,1]`` float to ``uint8`` levels, same layout."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    """Write a ``(3,H,W)`` image in ``[0,1]``; format follows the extension (PPM P6 or PNG)."""
    Image.fromarray(np.ascontiguousarray(quantize(img).transpose(1, 2, 0)), mode="RGB").save(path)


def read_image(path) -> np.ndarray:
    """Read a PPM/PNG as ``(3,H,W)`` float64 in ``[0,1]``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def _format_value(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def manifest_line(s: Sample, split: str) -> str:
    parts = [f"id={s.sample_id}", f"split={split}", f"type={s.kind}", f"label={s.label}", f"seed={s.seed}"]
    parts += [f"{k}={_format_value(v)}" for k, v in sorted(s.params.items())]
    return " ".join(parts)


def parse_manifest(text: str) -> list[dict]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        row = {}
        for tok in line.split():
            if "=" not in tok:
                raise ConfigError(f"manifest line {lineno}: token {tok!r} is not key=value")
            k, v = tok.split("=", 1)
            row[k] = v
        for key in ("id", "split", "type", "seed"):
            if key not in row:
                raise ConfigError(f"manifest line {lineno}: missing key {key!r}")
        rows.append(row)
    return rows


def row_params(row: Mapping) -> dict:
    kind = row["type"]
    return {k: (int(v) if k in _INT_PARAMS else float(v)) for k, v in row.items() if k.startswith(kind + "_")}


def split_plan(cfg: RunConfig) -> list[tuple[str, str, int]]:
    """``(split, kind, index)`` for every sample the config asks for."""
    t = cfg.train
    plan = []
    for split, n in (("train", t.train_per_type), ("val", t.val_per_type)):
        for kind in t.types:
            plan += [(split, kind, i) for i in range(n)]
    return plan


def generate_corpus(cfg: RunConfig, out_dir, force: bool = False) -> dict:
    """Write every split to ``out_dir``; returns ``{(split, kind): count}``."""
    cfg.validate()
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ContractError(f"{out} exists and is not empty (use --force to overwrite)")
    if out.exists():
        shutil.rmtree(out)
    t = cfg.train
    lines = {s: [] for s in SPLITS}
    counts: dict = {}
    for split, kind, i in split_plan(cfg):
        (out / split).mkdir(parents=True, exist_ok=True)
        sid = f"{kind}_{i:04d}"
        s = make_sample(sample_seed(t.corpus_seed, split, kind, i), kind, cfg.degrade, t.image_size, sid)
        write_image(out / split / f"{sid}_clean.ppm", s.clean)
        write_image(out / split / f"{sid}_degraded.ppm", s.degraded)
        lines[split].append(manifest_line(s, split))
        counts[(split, kind)] = counts.get((split, kind), 0) + 1
    for split in SPLITS:
        if lines[split]:
            (out / split / MANIFEST).write_text(
                "# m2restore corpus manifest v1\n" + "\n".join(lines[split]) + "\n", encoding="utf-8")
    return counts


@dataclass
class SplitData:
    clean: np.ndarray        # (N, 3, H, W) float32
    degraded: np.ndarray
    labels: np.ndarray       # (N,) int64
    ids: list
    kinds: list

    def __len__(self):
        return len(self.ids)


def load_split(corpus_dir, split: str) -> SplitData:
    path = Path(corpus_dir) / split / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"split {split!r} not found under {corpus_dir}")
    rows = parse_manifest(path.read_text(encoding="utf-8"))
    if not rows:
        raise ContractError(f"split {split!r} is empty")
    base = path.parent
    clean = np.stack([read_image(base / f"{r['id']}_clean.ppm") for r in rows]).astype(np.float32)
    degr = np.stack([read_image(base / f"{r['id']}_degraded.ppm") for r in rows]).astype(np.float32)
    labels = np.array([class_index(r["type"]) for r in rows], dtype=np.int64)
    return SplitData(clean, degr, labels, [r["id"] for r in rows], [r["type"] for r in rows])


def regenerate(corpus_dir, split: str, size: Optional[int] = None) -> Iterable[Sample]:
    """Rebuild samples from the manifest alone (seed, type and concrete parameters)."""
    base = Path(corpus_dir) / split
    for r in parse_manifest((base / MANIFEST).read_text(encoding="utf-8")):
        sz = size if size is not None else Image.open(base / f"{r['id']}_clean.ppm").size[0]
        yield make_sample(int(r["seed"]), r["type"], DegradeParams(), sz, r["id"], params=row_params(r))


def corpus_bytes(corpus_dir) -> dict:
    """``relative path -> bytes`` of every file in a corpus (for determinism checks)."""
    root = Path(corpus_dir)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
