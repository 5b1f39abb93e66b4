"""Manifest ingestion, image geometry, wafer-aware splits, few-shot sampling
and the procedural defect-image generator used in place of fab data."""

from __future__ import annotations

import json
import logging
import math
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import CropError, DataError, ManifestError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test", "unassigned")
MANIFEST_KEYS = ("path", "layer", "label", "wafer", "split")


@dataclass(frozen=True)
class ImageRecord:
    image_path: str
    layer_id: int
    class_label: Optional[int]
    wafer_id: str
    split: str = "unassigned"

    def __post_init__(self):
        if not self.wafer_id:
            raise ManifestError(f"empty wafer id for {self.image_path!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r} for {self.image_path!r}")
        if self.class_label is not None and self.class_label < 1:
            raise ManifestError(f"class label must be >= 1, got {self.class_label}")

    @property
    def labeled(self) -> bool:
        return self.class_label is not None

    def to_json(self) -> dict:
        return {
            "path": self.image_path,
            "layer": self.layer_id,
            "label": self.class_label,
            "wafer": self.wafer_id,
            "split": self.split,
        }


@dataclass
class Manifest:
    """Records of one manifest file plus the class and layer sets they declare."""

    records: list[ImageRecord]
    root: Path = Path(".")

    @property
    def classes(self) -> list[int]:
        return class_set(self.records)

    @property
    def layers(self) -> list[int]:
        return sorted({r.layer_id for r in self.records})

    def resolve(self, record: ImageRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() else self.root / p

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


def class_set(records: Iterable[ImageRecord]) -> list[int]:
    return sorted({r.class_label for r in records if r.class_label is not None})


def _parse_line(obj, lineno: int) -> ImageRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected a JSON object")
    missing = [k for k in MANIFEST_KEYS if k not in obj]
    if missing:
        raise ManifestError(f"line {lineno}: missing key(s) {', '.join(missing)}")
    extra = sorted(set(obj) - set(MANIFEST_KEYS))
    if extra:
        raise ManifestError(f"line {lineno}: unknown key(s) {', '.join(extra)}")
    path, layer, label, wafer, split = (obj[k] for k in MANIFEST_KEYS)
    if not isinstance(path, str) or not path:
        raise ManifestError(f"line {lineno}: 'path' must be a non-empty string")
    if isinstance(layer, bool) or not isinstance(layer, int):
        raise ManifestError(f"line {lineno}: 'layer' must be an integer")
    if label is not None and (isinstance(label, bool) or not isinstance(label, int) or label < 1):
        raise ManifestError(f"line {lineno}: 'label' must be an integer >= 1 or null")
    if not isinstance(wafer, str) or not wafer:
        raise ManifestError(f"line {lineno}: 'wafer' must be a non-empty string")
    if split not in SPLITS:
        raise ManifestError(
            f"line {lineno}: unknown split {split!r} (expected one of {', '.join(SPLITS)})"
        )
    return ImageRecord(path, layer, label, wafer, split)


def load_manifest(path) -> Manifest:
    """Parse a JSON Lines manifest. Blank lines are skipped; relative image
    paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records: list[ImageRecord] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            rec = _parse_line(obj, lineno)
            key = os.path.normpath(rec.image_path)
            if key in seen:
                raise ManifestError(
                    f"line {lineno}: duplicate path {rec.image_path!r} (first seen on line {seen[key]})"
                )
            seen[key] = lineno
            records.append(rec)
    return Manifest(records, path.parent)


def write_manifest(records: Iterable[ImageRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


# ---------------------------------------------------------------------------
# image IO and geometry


def read_image(path) -> np.ndarray:
    """Load a single-channel 8- or 16-bit PNG as float64 in [0, 1]."""
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except FileNotFoundError:
        raise DataError(f"image not found: {path}") from None
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel image, got mode {mode}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if mode.startswith("I"):
        return np.clip(arr.astype(np.float64) / 65535.0, 0.0, 1.0)
    raise DataError(f"{path}: unsupported pixel type {arr.dtype}")


def write_png(image: np.ndarray, path, bits: int = 8) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if bits == 8:
        Image.fromarray(np.rint(img * 255).astype(np.uint8), mode="L").save(path)
    elif bits == 16:
        Image.fromarray(np.rint(img * 65535).astype(np.uint16)).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


@dataclass(frozen=True)
class CropSpec:
    """Crop window plus output size. ``crop_origin=None`` centres the window
    and ``crop_size=None`` takes the whole image."""

    crop_origin: Optional[tuple[int, int]] = None
    crop_size: Optional[tuple[int, int]] = None
    output_size: tuple[int, int] = (224, 224)

    def __post_init__(self):
        if min(self.output_size) < 1:
            raise ValueError(f"output_size must be positive, got {self.output_size}")
        if self.crop_size is not None and min(self.crop_size) < 1:
            raise ValueError(f"crop_size must be positive, got {self.crop_size}")

    def window(self, shape: tuple[int, int]) -> tuple[int, int, int, int]:
        h, w = shape
        ch, cw = self.crop_size if self.crop_size is not None else (h, w)
        if self.crop_origin is None:
            r0, c0 = (h - ch) // 2, (w - cw) // 2
        else:
            r0, c0 = self.crop_origin
        if r0 < 0 or c0 < 0 or r0 + ch > h or c0 + cw > w:
            raise CropError(
                f"crop window origin=({r0}, {c0}) size=({ch}, {cw}) "
                f"does not fit image of size ({h}, {w})"
            )
        return r0, c0, ch, cw


# Presets for the two inspection layers: annotation banners are trimmed by a
# centred 340x340 crop before resizing.
LAYER_CROPS = {
    1: CropSpec(crop_size=(340, 340)),  # 680x680 sources
    2: CropSpec(crop_size=(340, 340)),  # 480x480 sources
}


def _resize_axis(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    oh, ow = size
    if (h, w) == (oh, ow):
        return img.copy()
    r0, r1, fr = _resize_axis(h, oh)
    c0, c1, fc = _resize_axis(w, ow)
    rows = img[r0] * (1.0 - fr)[:, None] + img[r1] * fr[:, None]
    return rows[:, c0] * (1.0 - fc)[None, :] + rows[:, c1] * fc[None, :]


def preprocess_image(image: np.ndarray, spec: CropSpec = CropSpec()) -> np.ndarray:
    """Crop the configured window and bilinearly resize it to ``spec.output_size``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise CropError(f"expected a 2-D grayscale raster, got shape {img.shape}")
    r0, c0, ch, cw = spec.window(img.shape)
    out = bilinear_resize(img[r0:r0 + ch, c0:c0 + cw], spec.output_size)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# splitting and sampling


def wafer_aware_split(
    records: Sequence[ImageRecord],
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> list[ImageRecord]:
    """Assign train/val/test so that every wafer lands in exactly one split.

    Wafers are visited largest first (seeded shuffle breaks size ties) and
    each goes to the split currently furthest below its target image count.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be 3 nonnegative fractions summing to 1, got {ratios}")
    if not records:
        return []

    by_wafer: dict[str, list[int]] = defaultdict(list)
    for i, r in enumerate(records):
        by_wafer[r.wafer_id].append(i)
    wafers = sorted(by_wafer)
    rng = np.random.default_rng(seed)
    order = [wafers[i] for i in rng.permutation(len(wafers))]
    order.sort(key=lambda w: -len(by_wafer[w]))

    names = SPLITS[:3]
    total = len(records)
    target = [r * total for r in ratios]
    count = [0, 0, 0]
    assignment: dict[str, str] = {}
    for w in order:
        deficits = [target[s] - count[s] for s in range(3)]
        s = max(range(3), key=lambda j: (deficits[j], -j))
        assignment[w] = names[s]
        count[s] += len(by_wafer[w])

    if len(wafers) == 1:
        log.warning("all %d records sit on one wafer (%s); everything goes to train", total, wafers[0])
        assignment = {wafers[0]: "train"}
    else:
        wafers_of_class: dict[int, set[str]] = defaultdict(set)
        for r in records:
            if r.class_label is not None:
                wafers_of_class[r.class_label].add(r.wafer_id)
        lonely = sorted(c for c, ws in wafers_of_class.items() if len(ws) == 1)
        if lonely:
            log.warning("classes %s occur on a single wafer; they cannot appear in more than one split", lonely)

    return [replace(r, split=assignment[r.wafer_id]) for r in records]


def few_shot_indices(labels: Sequence[Optional[int]], n_per_class: int, seed: int) -> list[int]:
    """Indices of a class-stratified sample of ``min(n, available)`` per class."""
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = defaultdict(list)
    for i, y in enumerate(labels):
        if y is not None:
            by_class[int(y)].append(i)
    chosen: list[int] = []
    short = []
    for c in sorted(by_class):
        idx = by_class[c]
        take = min(n_per_class, len(idx))
        if take < n_per_class:
            short.append(c)
        chosen.extend(idx[j] for j in rng.choice(len(idx), size=take, replace=False))
    if short:
        log.warning("classes %s have fewer than %d records; using all of them", short, n_per_class)
    return sorted(chosen)


def sample_few_shot(
    train: Sequence[ImageRecord], n_per_class: int, seed: int
) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Split train records into a few-shot labeled subset and the unlabeled pool.

    Pool records keep their ground-truth labels; only evaluation code may look
    at them.
    """
    picked = set(few_shot_indices([r.class_label for r in train], n_per_class, seed))
    labeled = [r for i, r in enumerate(train) if i in picked]
    pool = [r for i, r in enumerate(train) if i not in picked]
    return labeled, pool


# ---------------------------------------------------------------------------
# synthetic defect images

SEPARATION_CONTRAST = {"low": 0.10, "medium": 0.22, "high": 0.6}
# pose jitter (fractions of the image, degrees) and background texture levels
SHIFT = 0.02
ROTATION = 5.0
SCALE_JITTER = 0.05
STRIPE_AMP = (0.015, 0.03)
SHADING = 0.04
PIXEL_NOISE = 0.03


def _disk(u, v, r, soft=0.02):
    return np.clip((r - np.hypot(u, v)) / soft + 0.5, 0.0, 1.0)


def _segment(u, v, x0, y0, x1, y1, width):
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((u - x0) * dx + (v - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    d = np.hypot(u - (x0 + t * dx), v - (y0 + t * dy))
    return np.clip((width / 2 - d) / 0.01 + 0.5, 0.0, 1.0)


def _box(u, v, hw, hh):
    return np.clip((np.minimum(hw - np.abs(u), hh - np.abs(v))) / 0.01 + 0.5, 0.0, 1.0)


def _m_blob(u, v):
    return np.exp(-(u * u + v * v) / (2 * 0.09 ** 2))


def _m_scratch(u, v):
    return _segment(u, v, -0.32, -0.18, 0.32, 0.18, 0.035)


def _m_ring(u, v):
    r = np.hypot(u, v)
    return np.clip((0.035 - np.abs(r - 0.22)) / 0.01 + 0.5, 0.0, 1.0)


def _m_bridge(u, v):
    bars = _box(u + 0.14, v, 0.035, 0.3) + _box(u - 0.14, v, 0.035, 0.3)
    return np.maximum(bars * 0.6, _box(u, v, 0.14, 0.045))


def _m_void(u, v):
    return -_disk(u, v, 0.16)


def _m_cluster(u, v):
    pts = [(-0.2, -0.14), (0.16, -0.2), (0.0, 0.04), (-0.16, 0.22), (0.22, 0.16)]
    return np.clip(sum(_disk(u - x, v - y, 0.07) for x, y in pts), 0.0, 1.0)


def _m_cross(u, v):
    return np.maximum(_box(u, v, 0.28, 0.035), _box(u, v, 0.035, 0.28))


def _m_pad(u, v):
    return _box(u, v, 0.24, 0.09)


def _m_arc(u, v):
    r = np.hypot(u, v)
    band = np.clip((0.04 - np.abs(r - 0.24)) / 0.01 + 0.5, 0.0, 1.0)
    return band * (v < 0.02)


def _m_double_line(u, v):
    return np.maximum(_box(u, v - 0.1, 0.3, 0.03), _box(u, v + 0.1, 0.3, 0.03))


def _m_triangle(u, v):
    # dark upward triangle from three half-planes
    h = np.minimum.reduce([v + 0.2, 0.28 - v - 1.7 * u, 0.28 - v + 1.7 * u])
    return -np.clip(h / 0.01 + 0.5, 0.0, 1.0)


def _m_dark_grid(u, v):
    pts = [(x, y) for x in (-0.16, 0.0, 0.16) for y in (-0.16, 0.0, 0.16)]
    return -np.clip(sum(_disk(u - x, v - y, 0.05) for x, y in pts), 0.0, 1.0)


MOTIFS = (
    ("blob", _m_blob),
    ("scratch", _m_scratch),
    ("ring", _m_ring),
    ("bridge", _m_bridge),
    ("void", _m_void),
    ("particle_cluster", _m_cluster),
    ("cross", _m_cross),
    ("pad", _m_pad),
    ("arc", _m_arc),
    ("double_line", _m_double_line),
    ("triangle", _m_triangle),
    ("dark_grid", _m_dark_grid),
)


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 11
    images_per_class: int = 20
    image_size: tuple[int, int] = (256, 256)
    separation: str = "high"
    wafers_per_class: int = 5
    seed: int = 7
    layer_split: int = 5  # classes 1..layer_split are layer 1, the rest layer 2

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_classes > len(MOTIFS):
            raise ValueError(f"num_classes {self.num_classes} exceeds the {len(MOTIFS)} defined motifs")
        if self.images_per_class < 1:
            raise ValueError("images_per_class must be >= 1")
        if self.wafers_per_class < 1:
            raise ValueError("wafers_per_class must be >= 1")
        if self.separation not in SEPARATION_CONTRAST:
            raise ValueError(f"separation must be one of {sorted(SEPARATION_CONTRAST)}")
        if min(self.image_size) < 8:
            raise ValueError("image_size too small")


def _smooth_field(rng: np.random.Generator, size: tuple[int, int], cells: int) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells))
    return bilinear_resize(coarse, size)


def _wafer_background(spec: SynthSpec, wafer_index: int) -> np.ndarray:
    """Line/space pattern plus slow shading; shared by every image on a wafer."""
    rng = np.random.default_rng([spec.seed, 0x5AFE, wafer_index])
    h, w = spec.image_size
    period = rng.uniform(0.05, 0.09) * w
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(STRIPE_AMP[0], STRIPE_AMP[1])
    cols = np.arange(w)
    stripes = amp * np.sin(2 * np.pi * cols / period + phase)
    shading = SHADING * _smooth_field(rng, (h, w), 4)
    return 0.45 + rng.uniform(-0.03, 0.03) + stripes[None, :] + shading


def render_defect(spec: SynthSpec, class_index: int, background: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_size
    contrast = SEPARATION_CONTRAST[spec.separation]
    ty, tx = rng.uniform(-SHIFT, SHIFT, size=2)
    angle = np.deg2rad(rng.uniform(-ROTATION, ROTATION))
    scale = rng.uniform(1.0 - SCALE_JITTER, 1.0 + SCALE_JITTER)
    yy, xx = np.mgrid[0:h, 0:w]
    y = (yy + 0.5) / h - 0.5 - ty
    x = (xx + 0.5) / w - 0.5 - tx
    ca, sa = math.cos(angle), math.sin(angle)
    u = (ca * x + sa * y) / scale
    v = (-sa * x + ca * y) / scale
    motif = MOTIFS[class_index][1](u, v)
    noise = PIXEL_NOISE * rng.standard_normal((h, w))
    return np.clip(background + contrast * rng.uniform(0.85, 1.15) * motif + noise, 0.0, 1.0)


def generate_synthetic(spec: SynthSpec, out_dir, threads: int = 1) -> Manifest:
    """Write ``num_classes * images_per_class`` PNGs and a manifest under ``out_dir``.

    Class ``c`` always carries motif ``c-1``. Each class spreads round-robin
    over ``wafers_per_class`` wafers, and every image on a wafer shares its
    background texture. Per-image randomness is seeded from (seed, index).
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"cannot write to {out_dir}: {exc}") from None

    backgrounds = [_wafer_background(spec, w) for w in range(spec.wafers_per_class)]
    jobs = []
    for c in range(spec.num_classes):
        for j in range(spec.images_per_class):
            jobs.append((c, j, c * spec.images_per_class + j))

    def make(job):
        c, j, idx = job
        wafer = j % spec.wafers_per_class
        rng = np.random.default_rng([spec.seed, idx])
        img = render_defect(spec, c, backgrounds[wafer], rng)
        rel = f"images/c{c + 1:02d}_{j:04d}.png"
        write_png(img, out_dir / rel)
        layer = 1 if c + 1 <= spec.layer_split else 2
        return ImageRecord(rel, layer, c + 1, f"W{wafer + 1:03d}", "unassigned")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(make, jobs))
    else:
        records = [make(j) for j in jobs]
    write_manifest(records, out_dir / "manifest.jsonl")
    return Manifest(records, out_dir)
