"""Pipeline stages over a run directory.

Each stage reads its upstream artifacts from the run directory, writes its
own outputs under ``<run>/<stage>/`` and records a section in
``<run>/report.json``. Layout::

    data/       synth: images/ and manifest.jsonl
    ingest/     validated manifest copy
    split/      manifest with wafer-aware splits
    embed/      train.embs, val.embs, test.embs
    knn/ train/ pseudo/ tsne/ sweep/
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import zlib
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataset as ds
from .config import RunConfig, dump_toml
from .embedder import EmbeddingStore, embed_batch, load_store, make_backend, save_store
from .errors import ConfigError, DataError
from .knn import KnnIndex, evaluate_knn, l2_normalize, neighbour_agreement
from .metrics import (
    CurvePoint,
    confusion,
    emit_run_report,
    precision_recall_f1,
    scatter_svg,
    shots_curve,
)
from .pseudolabel import pseudo_label_rounds
from .trainer import load_head, predict, representation, save_head, train_head
from .tsne import run_tsne, write_layout_csv

log = logging.getLogger(__name__)

UNLABELED = 0  # label slot for unlabeled rows inside a store
STAGE_SPLITS = ("train", "val", "test")


@dataclass
class Run:
    root: Path
    config: RunConfig
    resume: bool = False
    force: bool = False

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    # -- restartability -----------------------------------------------------

    def begin(self, stage: str, outputs: Sequence[Path]) -> bool:
        """Return False when the stage can be skipped (``--resume`` with
        complete outputs). Raises when outputs exist and neither flag is set."""
        existing = [p for p in outputs if p.exists()]
        if existing and not (self.resume or self.force):
            names = ", ".join(p.relative_to(self.root).as_posix() for p in existing)
            raise ConfigError(f"{stage}: outputs already exist ({names}); pass --resume to reuse or --force to overwrite")
        if existing and self.resume and len(existing) == len(outputs) and stage in self.stages():
            log.info("%s: reusing existing outputs", stage)
            return False
        for p in existing:
            shutil.rmtree(p) if p.is_dir() else p.unlink()
        return True

    # -- report -------------------------------------------------------------

    @property
    def report_path(self) -> Path:
        return self.path("report.json")

    def stages(self) -> dict:
        if not self.report_path.exists():
            return {}
        try:
            return json.loads(self.report_path.read_text(encoding="utf-8")).get("stages", {})
        except json.JSONDecodeError:
            raise DataError(f"{self.report_path} is not valid JSON") from None

    def record(self, stage: str, section: dict, outputs: Sequence[Path] = ()) -> dict:
        stages = self.stages()
        section = dict(section)
        section["outputs"] = sorted(p.relative_to(self.root).as_posix() for p in outputs)
        stages[stage] = section
        return self.write_report(stages)

    def write_report(self, stages: dict) -> dict:
        files = []
        for sec in stages.values():
            for rel in sec.get("outputs", []):
                p = self.path(rel)
                if p.is_file():
                    files.append(p)
        self.path("config.toml").write_text(dump_toml(self.config), encoding="utf-8")
        return emit_run_report(self.report_path, self.config.to_dict(), stages, self.root, files)


def open_run(root, config: RunConfig, resume: bool = False, force: bool = False) -> Run:
    root = Path(root).resolve()
    root.mkdir(parents=True, exist_ok=True)
    return Run(root, config, resume, force)


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DataError(f"missing upstream artifact {path} (run '{producer}' first)")
    return path


def _rebase(records, src_root: Path, dst_dir: Path):
    out = []
    for r in records:
        p = Path(r.image_path)
        absolute = p if p.is_absolute() else (src_root / p)
        rel = os.path.relpath(absolute, dst_dir)
        out.append(replace(r, image_path=Path(rel).as_posix()))
    return out


def _dir_digest(directory: Path) -> str:
    crc = 0
    for f in sorted(directory.rglob("*")):
        if f.is_file():
            crc = zlib.crc32(f.relative_to(directory).as_posix().encode(), crc)
            crc = zlib.crc32(f.read_bytes(), crc)
    return f"{crc:08x}"


# ---------------------------------------------------------------------------
# stages


def stage_synth(run: Run) -> dict:
    out = run.path("data")
    if not run.begin("synth", [out]):
        return run.stages()["synth"]
    spec = run.config.synth_spec()
    manifest = ds.generate_synthetic(spec, out, threads=run.config.threads)
    section = {
        "images": len(manifest),
        "classes": manifest.classes,
        "seed": spec.seed,
        "images_digest": _dir_digest(out / "images"),
    }
    run.record("synth", section, [out / "manifest.jsonl"])
    return section


def _manifest_path(run: Run) -> Path:
    p = Path(run.config.data.manifest)
    return p if p.is_absolute() else run.path(p)


def stage_ingest(run: Run) -> dict:
    out = run.path("ingest", "manifest.jsonl")
    if not run.begin("ingest", [out]):
        return run.stages()["ingest"]
    src = _require(_manifest_path(run), "synth")
    manifest = ds.load_manifest(src)
    shapes = Counter()
    for r in manifest:
        img = ds.read_image(manifest.resolve(r))
        run.config.crop_for(r.layer_id).window(img.shape)
        shapes[f"{img.shape[0]}x{img.shape[1]}"] += 1
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.write_manifest(_rebase(manifest.records, manifest.root, out.parent), out)
    counts = Counter((r.layer_id, r.class_label) for r in manifest)
    section = {
        "records": len(manifest),
        "classes": manifest.classes,
        "layers": manifest.layers,
        "unlabeled": sum(1 for r in manifest if r.class_label is None),
        "image_sizes": dict(sorted(shapes.items())),
        "distribution": [
            {"layer": layer, "class": c, "count": n}
            for (layer, c), n in sorted(counts.items(), key=lambda kv: (kv[0][0], kv[0][1] or 0))
        ],
    }
    run.record("ingest", section, [out])
    return section


def stage_split(run: Run) -> dict:
    out = run.path("split", "manifest.jsonl")
    if not run.begin("split", [out]):
        return run.stages()["split"]
    manifest = ds.load_manifest(_require(run.path("ingest", "manifest.jsonl"), "ingest"))
    seed = run.config.seed if run.config.data.split_seed is None else run.config.data.split_seed
    records = ds.wafer_aware_split(manifest.records, tuple(run.config.data.split_ratios), seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.write_manifest(_rebase(records, manifest.root, out.parent), out)
    section = {
        "seed": seed,
        "ratios": list(run.config.data.split_ratios),
        "counts": {s: sum(1 for r in records if r.split == s) for s in STAGE_SPLITS},
        "wafers": {s: len({r.wafer_id for r in records if r.split == s}) for s in STAGE_SPLITS},
    }
    run.record("split", section, [out])
    return section


def split_records(run: Run) -> tuple[ds.Manifest, dict[str, list[ds.ImageRecord]]]:
    manifest = ds.load_manifest(_require(run.path("split", "manifest.jsonl"), "split"))
    by = {s: [r for r in manifest if r.split == s] for s in STAGE_SPLITS}
    return manifest, by


def stage_embed(run: Run) -> dict:
    outs = [run.path("embed", f"{s}.embs") for s in STAGE_SPLITS]
    if not run.begin("embed", outs):
        return run.stages()["embed"]
    manifest, by = split_records(run)
    cfg = run.config
    backend = make_backend(cfg.embed.backend, cfg.embed.model_path, cfg.embed.output_name, cfg.threads)
    outs[0].parent.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split, path in zip(STAGE_SPLITS, outs):
        recs = by[split]
        images = [ds.preprocess_image(ds.read_image(manifest.resolve(r)), cfg.crop_for(r.layer_id)) for r in recs]
        labels = [UNLABELED if r.class_label is None else r.class_label for r in recs]
        store = embed_batch(images, backend, labels=labels, threads=cfg.threads)
        save_store(store, path)
        counts[split] = store.count
    section = {
        "backend": backend.descriptor.name,
        "kind": backend.descriptor.kind,
        "dim": backend.descriptor.embedding_dim,
        "counts": counts,
    }
    run.record("embed", section, outs)
    return section


def load_split_store(run: Run, split: str) -> EmbeddingStore:
    path = _require(run.path("embed", f"{split}.embs"), "embed")
    return load_store(path, run.stages().get("embed", {}).get("backend", ""))


# ---------------------------------------------------------------------------
# evaluation helpers shared by knn/train/pseudo/sweep


@dataclass
class Problem:
    """Embedded train/val/test rows restricted to one class set, labels as
    class indices (-1 for unlabeled)."""

    classes: list[int]
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    layer: str = "all"

    def few_shot(self, shots: int, seed: int):
        labels = [int(v) if v >= 0 else None for v in self.train_y]
        picked = np.array(ds.few_shot_indices(labels, shots, seed), dtype=np.intp)
        rest = np.setdiff1d(np.arange(len(self.train_y)), picked)
        return picked, rest


def _to_index(labels: np.ndarray, classes: list[int]) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(classes)}
    return np.array([lookup.get(int(v), -1) for v in labels], dtype=np.int64)


def build_problems(run: Run, per_layer: bool = False) -> list[Problem]:
    manifest, by = split_records(run)
    stores = {s: load_split_store(run, s) for s in STAGE_SPLITS}
    groups: list[tuple[str, list[int]]] = []
    if per_layer:
        for layer in manifest.layers:
            groups.append((str(layer), ds.class_set(r for r in manifest if r.layer_id == layer)))
    else:
        groups.append(("all", manifest.classes))
    problems = []
    for tag, classes in groups:
        parts = {}
        for s in STAGE_SPLITS:
            st = stores[s]
            y = _to_index(st.labels, classes) if st.count else np.zeros(0, np.int64)
            keep = np.ones(st.count, dtype=bool)
            if per_layer:
                keep &= np.array([r.layer_id == int(tag) for r in by[s]], dtype=bool)
            if s != "train":
                # evaluation splits keep labeled rows of this class set only
                keep &= y >= 0
            parts[s] = (st.data[keep].astype(np.float64), y[keep])
        problems.append(Problem(classes, *parts["train"], *parts["val"], *parts["test"], layer=tag))
    if not problems or len(problems[0].classes) < 2:
        raise DataError("need at least two labeled classes")
    return problems


def _class_report(true_idx, pred_idx, classes) -> dict:
    if len(true_idx) == 0:
        return {}
    cm = confusion(true_idx, pred_idx, len(classes))
    rep = precision_recall_f1(cm, classes).to_json()
    rep["confusion"] = cm.tolist()
    return rep


def _write_predictions(path: Path, true_idx, pred_idx, classes) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("row,true,predicted\n")
        for i, (t, p) in enumerate(zip(true_idx, pred_idx)):
            fh.write(f"{i},{classes[t]},{classes[p]}\n")


def knn_accuracy(p: Problem, labeled, k: int, run: Run):
    cfg = run.config
    x = p.train_x[labeled]
    if cfg.knn.normalize:
        x = l2_normalize(x)
    index = KnnIndex(x, p.train_y[labeled], cfg.knn.metric)
    k = min(k, index.size)
    test = EmbeddingStore(p.test_x, p.test_y)
    if index.size < 2 and cfg.knn.bandwidth_mode == "median":
        params = replace(cfg.kernel(k), bandwidth=1.0, bandwidth_mode="fixed")
    else:
        params = cfg.kernel(k)
    return evaluate_knn(index, test, params, normalize=cfg.knn.normalize)


def _test_accuracy_head(head, p: Problem) -> tuple[float, np.ndarray]:
    if len(p.test_y) == 0:
        return float("nan"), np.zeros(0, np.int64)
    _, pred = predict(head, p.test_x)
    return float(np.mean(pred == p.test_y)), pred


def stage_knn(run: Run) -> dict:
    outs = [run.path("knn", "predictions.csv")]
    if not run.begin("knn", outs):
        return run.stages()["knn"]
    cfg = run.config
    (p,) = build_problems(run)
    labeled, _ = p.few_shot(cfg.knn.shots, cfg.seed)
    ks = cfg.knn.k_values or [cfg.knn.k]
    results = []
    best = None
    for k in ks:
        res = knn_accuracy(p, labeled, k, run)
        results.append({"k": k, "accuracy": round(res.accuracy, 4), "bandwidth": res.bandwidth})
        if best is None or res.accuracy > best[0].accuracy:
            best = (res, k)
    res, k = best
    outs[0].parent.mkdir(parents=True, exist_ok=True)
    _write_predictions(outs[0], p.test_y, res.predictions, p.classes)
    section = {
        "shots": cfg.knn.shots,
        "labeled": int(len(labeled)),
        "metric": cfg.knn.metric,
        "normalize": cfg.knn.normalize,
        "sweep": results,
        "best_k": k,
        "report": _class_report(p.test_y, res.predictions, p.classes),
    }
    run.record("knn", section, outs)
    return section


def stage_train(run: Run) -> dict:
    outs = [run.path("train", "head.bin"), run.path("train", "predictions.csv")]
    if not run.begin("train", outs):
        return run.stages()["train"]
    cfg = run.config
    (p,) = build_problems(run)
    labeled, _ = p.few_shot(cfg.train.shots, cfg.seed)
    val = (p.val_x, p.val_y) if len(p.val_y) else None
    lrs = cfg.train.lr_values or [cfg.train.peak_lr]
    runs = []
    best = None
    for lr in lrs:
        result = train_head(p.train_x[labeled], p.train_y[labeled], len(p.classes), cfg.train_config(peak_lr=lr), val=val)
        acc, pred = _test_accuracy_head(result.head, p)
        val_acc = result.history[result.best_epoch - 1]["val_accuracy"] if result.best_epoch else None
        final_loss = result.history[-1]["loss"] if result.history else None
        runs.append({"peak_lr": lr, "test_accuracy": round(acc, 4), "val_accuracy": val_acc,
                     "best_epoch": result.best_epoch, "final_loss": final_loss})
        key = (val_acc if val_acc is not None else -(final_loss or 0.0))
        if best is None or key > best[0]:
            best = (key, result, acc, pred, lr)
    _, result, acc, pred, lr = best
    outs[0].parent.mkdir(parents=True, exist_ok=True)
    save_head(result.head, outs[0])
    _write_predictions(outs[1], p.test_y, pred, p.classes)
    section = {
        "shots": cfg.train.shots,
        "labeled": int(len(labeled)),
        "head": cfg.train.head,
        "classes": p.classes,
        "runs": runs,
        "chosen_lr": lr,
        "history_tail": result.history[-5:],
        "report": _class_report(p.test_y, pred, p.classes),
    }
    run.record("train", section, outs)
    return section


def stage_pseudo(run: Run) -> dict:
    outs = [run.path("pseudo", "head.bin"), run.path("pseudo", "predictions.csv")]
    if not run.begin("pseudo", outs):
        return run.stages()["pseudo"]
    cfg = run.config
    (p,) = build_problems(run)
    labeled, pool = p.few_shot(cfg.pseudo.shots, cfg.seed)
    cap = cfg.pseudo.max_unlabeled
    if cap is not None:
        # subsample the pool without looking at its labels
        rng = np.random.default_rng(cfg.seed)
        pool = np.sort(rng.permutation(pool)[:cap])
    result = pseudo_label_rounds(
        p.train_x[labeled], p.train_y[labeled], p.train_x[pool], len(p.classes),
        test=(p.test_x, p.test_y), config=cfg.pseudo_config(),
        unlabeled_truth=p.train_y[pool],
    )
    acc, pred = _test_accuracy_head(result.head, p)
    outs[0].parent.mkdir(parents=True, exist_ok=True)
    save_head(result.head, outs[0])
    _write_predictions(outs[1], p.test_y, pred, p.classes)
    section = {
        "shots": cfg.pseudo.shots,
        "labeled": int(len(labeled)),
        "unlabeled": int(len(pool)),
        "threshold": cfg.pseudo.threshold,
        "alpha": cfg.pseudo.alpha,
        **result.to_json(),
        "report": _class_report(p.test_y, pred, p.classes),
    }
    run.record("pseudo", section, outs)
    return section


def stage_tsne(run: Run) -> dict:
    outs = [run.path("tsne", "layout.csv"), run.path("tsne", "layout.svg")]
    if not run.begin("tsne", outs):
        return run.stages()["tsne"]
    cfg = run.config
    store = load_split_store(run, cfg.tsne.split)
    x = store.data.astype(np.float64)
    labels = store.labels
    if cfg.tsne.max_points is not None and store.count > cfg.tsne.max_points:
        rows = np.sort(np.random.default_rng(cfg.seed).permutation(store.count)[: cfg.tsne.max_points])
        x, labels = x[rows], labels[rows]
    if cfg.tsne.representation == "head":
        head = load_head(_require(run.path("train", "head.bin"), "train"))
        x = representation(head, x)
    layout = run_tsne(x, cfg.tsne_config())
    outs[0].parent.mkdir(parents=True, exist_ok=True)
    lab = [int(v) if v != UNLABELED else None for v in labels]
    write_layout_csv(layout, lab, outs[0])
    title = f"t-SNE of {cfg.tsne.split} embeddings ({cfg.tsne.representation})"
    outs[1].write_text(scatter_svg(layout.y, lab, title), encoding="utf-8")
    labeled = labels != UNLABELED
    agreement = None
    if labeled.sum() > 10:
        agreement = neighbour_agreement(layout.y[labeled], labels[labeled], k=10)
    section = {
        "points": int(len(x)),
        "representation": cfg.tsne.representation,
        "perplexity": layout.perplexity,
        "kl_initial": layout.kl_initial,
        "kl_final": layout.kl,
        "knn10_agreement": agreement,
        "trace": [[i, v] for i, v in layout.trace],
    }
    run.record("tsne", section, outs)
    return section


def sweep_points(run: Run) -> list[CurvePoint]:
    cfg = run.config
    points = []
    for p in build_problems(run, per_layer=cfg.sweep.per_layer):
        for shots in cfg.sweep.shots:
            labeled, pool = p.few_shot(shots, cfg.seed)
            for method in cfg.sweep.methods:
                if method == "knn":
                    acc = knn_accuracy(p, labeled, cfg.knn.k, run).accuracy
                elif method == "finetune":
                    head = train_head(p.train_x[labeled], p.train_y[labeled], len(p.classes), cfg.train_config()).head
                    acc = _test_accuracy_head(head, p)[0]
                else:
                    acc = pseudo_label_rounds(
                        p.train_x[labeled], p.train_y[labeled], p.train_x[pool], len(p.classes),
                        test=(p.test_x, p.test_y), config=cfg.pseudo_config(),
                    ).final_accuracy
                log.info("sweep layer=%s shots=%d %s: %.4f", p.layer, shots, method, acc)
                points.append(CurvePoint(shots, acc, method, p.layer))
    return points


def stage_sweep(run: Run) -> dict:
    outs = [run.path("sweep", "curve.csv"), run.path("sweep", "curve.svg")]
    if not run.begin("sweep", outs):
        return run.stages()["sweep"]
    points = sweep_points(run)
    outs[0].parent.mkdir(parents=True, exist_ok=True)
    series = shots_curve(points, outs[0], outs[1])
    section = {
        "shots": list(run.config.sweep.shots),
        "methods": list(run.config.sweep.methods),
        "series": [
            {"method": s.method, "layer": s.layer, "points": [[q.shots, round(q.accuracy, 4)] for q in s.points]}
            for s in series
        ],
    }
    run.record("sweep", section, outs)
    return section


def stage_report(run: Run) -> dict:
    """Re-verify every recorded output and rewrite the report."""
    stages = run.stages()
    if not stages:
        raise DataError(f"no stages recorded in {run.report_path}")
    for name, sec in stages.items():
        for rel in sec.get("outputs", []):
            _require(run.path(rel), name)
    return run.write_report(stages)


STAGES = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "split": stage_split,
    "embed": stage_embed,
    "knn": stage_knn,
    "train": stage_train,
    "pseudo": stage_pseudo,
    "tsne": stage_tsne,
    "sweep": stage_sweep,
    "report": stage_report,
}
