"""Confusion-matrix metrics, accuracy-vs-shots curves, SVG plots and the
JSON run report."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

SCHEMA_VERSION = 1
METHODS = ("knn", "finetune", "pseudo")


def confusion(true, pred, num_classes: int) -> np.ndarray:
    """counts[i, j] = number of samples with true class i predicted as j."""
    t = np.asarray(true, dtype=np.int64)
    p = np.asarray(pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"{t.size} true labels but {p.size} predictions")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} label out of range [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 2.0 * precision * recall / s if s > 0 else 0.0


@dataclass
class ClassReport:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    accuracy: float
    macro_f1: float
    class_ids: Optional[list[int]] = None

    def to_json(self) -> dict:
        ids = self.class_ids or list(range(len(self.precision)))
        return {
            "accuracy": round(self.accuracy, 4),
            "macro_f1": round(self.macro_f1, 4),
            "classes": [
                {
                    "class": c,
                    "precision": round(p, 4),
                    "recall": round(r, 4),
                    "f1": round(f, 4),
                    "support": s,
                }
                for c, p, r, f, s in zip(ids, self.precision, self.recall, self.f1, self.support)
            ],
        }

    def table(self) -> str:
        ids = self.class_ids or list(range(len(self.precision)))
        lines = [f"{'class':>6} {'precision':>9} {'recall':>7} {'f1':>6} {'support':>8}"]
        for c, p, r, f, s in zip(ids, self.precision, self.recall, self.f1, self.support):
            lines.append(f"{c:>6} {p:>9.2f} {r:>7.2f} {f:>6.2f} {s:>8}")
        lines.append(f"accuracy {self.accuracy:.4f}  macro-F1 {self.macro_f1:.4f}")
        return "\n".join(lines)


def precision_recall_f1(cm, class_ids: Optional[Sequence[int]] = None) -> ClassReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(cm)
    cols = cm.sum(axis=0)
    rows = cm.sum(axis=1)
    precision = [int(d) / int(c) if c else 0.0 for d, c in zip(diag, cols)]
    recall = [int(d) / int(r) if r else 0.0 for d, r in zip(diag, rows)]
    f1 = [f1_score(p, r) for p, r in zip(precision, recall)]
    return ClassReport(
        precision,
        recall,
        f1,
        [int(r) for r in rows],
        int(diag.sum()) / total,
        float(np.mean(f1)),
        list(class_ids) if class_ids is not None else None,
    )


# ---------------------------------------------------------------------------
# curves


@dataclass(frozen=True)
class CurvePoint:
    shots: int
    accuracy: float
    method: str
    layer: str = "all"


@dataclass
class CurveSeries:
    method: str
    layer: str
    points: list[CurvePoint] = field(default_factory=list)

    def __post_init__(self):
        shots = [p.shots for p in self.points]
        if any(b <= a for a, b in zip(shots, shots[1:])):
            raise ValueError(f"shots must increase strictly within series {self.method}/{self.layer}")


def group_series(points: Iterable[CurvePoint]) -> list[CurveSeries]:
    groups: dict[tuple[str, str], list[CurvePoint]] = {}
    for p in points:
        groups.setdefault((p.layer, p.method), []).append(p)
    order = {m: i for i, m in enumerate(METHODS)}
    keys = sorted(groups, key=lambda k: (k[0], order.get(k[1], len(order)), k[1]))
    return [CurveSeries(m, layer, sorted(groups[(layer, m)], key=lambda p: p.shots)) for layer, m in keys]


def fmt_rate(x: float) -> str:
    return str(round(float(x), 4))


def write_curve_csv(points: Sequence[CurvePoint], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("shots,accuracy,method,layer\n")
        for s in group_series(points):
            for p in s.points:
                fh.write(f"{p.shots},{fmt_rate(p.accuracy)},{p.method},{p.layer}\n")


def read_curve_csv(path) -> list[CurvePoint]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "shots,accuracy,method,layer":
        raise ValueError(f"{path}: not a curve CSV")
    out = []
    for line in lines[1:]:
        s, a, m, layer = line.split(",")
        out.append(CurvePoint(int(s), float(a), m, layer))
    return out


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
            "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939")
_DASH = {"knn": "4 3", "finetune": "", "pseudo": "8 4"}


def _svg_frame(width, height, title, xlabel, ylabel):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{width / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {height / 2:.1f})">{escape(ylabel)}</text>',
    ]


def curve_svg(points: Sequence[CurvePoint], title: str = "Test accuracy vs. labeled images per class") -> str:
    w, h = 640, 420
    left, right, top, bottom = 60, 150, 35, 50
    pw, ph = w - left - right, h - top - bottom
    series = group_series(points)
    shots = sorted({p.shots for p in points})
    out = _svg_frame(w, h, title, "labeled images per class", "test accuracy")
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')

    # log-spaced x axis when shots span a decade, otherwise linear
    if shots and shots[-1] > 0 and shots[0] > 0 and shots[-1] / shots[0] >= 10:
        lo, hi = np.log(shots[0]), np.log(shots[-1])
        xmap = lambda s: left + pw * (np.log(s) - lo) / (hi - lo)
    elif shots:
        lo, hi = shots[0], max(shots[-1], shots[0] + 1)
        xmap = lambda s: left + pw * (s - lo) / (hi - lo) if hi > lo else left + pw / 2
    else:
        xmap = None
    ymap = lambda a: top + ph * (1.0 - a)
    for t in range(6):
        a = t / 5
        y = ymap(a)
        out.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 7}" y="{y + 4:.1f}" text-anchor="end" font-size="10">{a:.1f}</text>')
    for s in shots:
        x = xmap(s)
        out.append(f'<line x1="{x:.1f}" y1="{top + ph}" x2="{x:.1f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{top + ph + 16}" text-anchor="middle" font-size="10">{s}</text>')
    layers = sorted({s.layer for s in series})
    for i, s in enumerate(series):
        color = _PALETTE[layers.index(s.layer) % len(_PALETTE)]
        dash = _DASH.get(s.method, "2 2")
        pts = " ".join(f"{xmap(p.shots):.1f},{ymap(p.accuracy):.1f}" for p in s.points)
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"{dash_attr}>'
                   f'<title>{escape(s.method)} / layer {escape(s.layer)}</title></polyline>')
        for p in s.points:
            out.append(f'<circle cx="{xmap(p.shots):.1f}" cy="{ymap(p.accuracy):.1f}" r="2.5" fill="{color}"/>')
        ly = top + 12 + 16 * i
        out.append(f'<line x1="{w - right + 10}" y1="{ly}" x2="{w - right + 34}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"{dash_attr}/>')
        out.append(f'<text x="{w - right + 38}" y="{ly + 4}" font-size="10">'
                   f'{escape(s.method)} (layer {escape(s.layer)})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def shots_curve(points: Sequence[CurvePoint], csv_path, svg_path) -> list[CurveSeries]:
    """Write the curve CSV and its SVG chart; returns the grouped series."""
    series = group_series(points)
    write_curve_csv(points, csv_path)
    Path(svg_path).write_text(curve_svg(points), encoding="utf-8")
    return series


def scatter_svg(y: np.ndarray, labels, title: str = "t-SNE layout") -> str:
    w, h = 560, 520
    left, right, top, bottom = 30, 100, 35, 30
    pw, ph = w - left - right, h - top - bottom
    out = _svg_frame(w, h, title, "", "")
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>')
    y = np.asarray(y, dtype=np.float64).reshape(-1, 2)
    labels = list(labels) if labels is not None else [None] * len(y)
    if len(y):
        lo, hi = y.min(axis=0), y.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        classes = sorted({l for l in labels if l is not None})
        for (a, b), lab in zip(y, labels):
            cx = left + pw * (a - lo[0]) / span[0]
            cy = top + ph * (1.0 - (b - lo[1]) / span[1])
            color = _PALETTE[classes.index(lab) % len(_PALETTE)] if lab is not None else "#444"
            out.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="2.5" fill="{color}" fill-opacity="0.8"/>')
        for i, c in enumerate(classes):
            ly = top + 12 + 15 * i
            out.append(f'<circle cx="{w - right + 16}" cy="{ly}" r="4" fill="{_PALETTE[i % len(_PALETTE)]}"/>')
            out.append(f'<text x="{w - right + 26}" y="{ly + 4}" font-size="10">class {c}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# run report


def crc32_file(path) -> str:
    crc = 0
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            crc = zlib.crc32(chunk, crc)
    return f"{crc:08x}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, float):
        if obj != obj:
            return None
        return obj
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, Path):
        return obj.as_posix()
    return obj


def emit_run_report(path, config: dict, stages: dict, root=None, files: Iterable = ()) -> dict:
    """Write the run report as sorted-key JSON.

    ``files`` are digested (CRC32) and listed relative to ``root`` so that two
    identical runs in different directories produce identical reports.
    """
    root = Path(root) if root is not None else Path(path).parent
    digests = {}
    for f in files:
        f = Path(f) if Path(f).is_absolute() else root / f
        digests[f.resolve().relative_to(root.resolve()).as_posix()] = crc32_file(f)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "stages": stages,
        "files": dict(sorted(digests.items())),
    }
    try:
        text = json.dumps(_jsonable(doc), indent=2, sort_keys=True, allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"report is not serializable: {exc}") from None
    Path(path).write_text(text + "\n", encoding="utf-8")
    return doc
