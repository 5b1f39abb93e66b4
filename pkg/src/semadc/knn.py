"""Gaussian-kernel weighted k-nearest-neighbour classification."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

METRICS = ("euclidean", "cosine")


def gaussian_weight(d, h):
    """exp(-d^2 / (2 h^2)); ``h=inf`` gives uniform votes."""
    if np.any(np.asarray(h) <= 0):
        raise ValueError(f"bandwidth must be positive, got {h}")
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    out = np.exp(-(d * d) / (2.0 * np.square(h)))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class KernelParams:
    k: int = 10
    bandwidth: Optional[float] = None
    bandwidth_mode: str = "median"  # "fixed" or "median"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.bandwidth_mode not in ("fixed", "median"):
            raise ValueError(f"bandwidth_mode must be 'fixed' or 'median', got {self.bandwidth_mode!r}")
        if self.bandwidth_mode == "fixed" and (self.bandwidth is None or not self.bandwidth > 0):
            raise ValueError("fixed bandwidth mode needs a positive bandwidth")


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def pairwise_distances(a: np.ndarray, b: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    if metric == "euclidean":
        return cdist(a, b, "euclidean")
    if metric == "cosine":
        # 1 - cos; zero vectors are treated as orthogonal to everything
        return np.clip(1.0 - l2_normalize(a) @ l2_normalize(b).T, 0.0, 2.0)
    raise ValueError(f"unknown metric {metric!r}")


class KnnIndex:
    """Immutable labeled vectors for exhaustive neighbour search."""

    def __init__(self, vectors, labels: Sequence[int], metric: str = "euclidean"):
        vectors = np.array(vectors, dtype=np.float64)
        labels = np.array(labels, dtype=np.int64)
        if vectors.ndim != 2 or vectors.shape[0] < 1:
            raise ValueError("index needs at least one vector")
        if labels.shape != (vectors.shape[0],):
            raise ValueError(f"{vectors.shape[0]} vectors but {labels.shape[0]} labels")
        if metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
        vectors.setflags(write=False)
        labels.setflags(write=False)
        self.vectors = vectors
        self.labels = labels
        self.classes = np.unique(labels)
        self.classes.setflags(write=False)
        self.metric = metric
        self._bandwidths: dict[int, float] = {}

    @classmethod
    def from_store(cls, store, metric: str = "euclidean", normalize: bool = False) -> "KnnIndex":
        if store.labels is None:
            raise ValueError("index store must be labeled")
        x = store.data.astype(np.float64)
        return cls(l2_normalize(x) if normalize else x, store.labels, metric)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def distances(self, queries: np.ndarray) -> np.ndarray:
        return pairwise_distances(queries, self.vectors, self.metric)

    def bandwidth(self, params: KernelParams) -> float:
        if params.bandwidth_mode == "fixed":
            return float(params.bandwidth)
        k = min(params.k, self.size - 1)
        if k not in self._bandwidths:
            self._bandwidths[k] = median_heuristic_bandwidth(self, k)
        return self._bandwidths[k]


def median_heuristic_bandwidth(index: KnnIndex, k: int) -> float:
    """Median over training points of the distance to their k-th nearest other point."""
    n = index.size
    if n < 2:
        raise ValueError("median heuristic needs at least two training points")
    k = max(1, min(k, n - 1))
    d = index.distances(index.vectors)
    np.fill_diagonal(d, np.inf)
    kth = np.partition(d, k - 1, axis=1)[:, k - 1]
    h = float(np.median(kth))
    if h > 0:
        return h
    positive = d[np.isfinite(d) & (d > 0)]
    if positive.size == 0:
        raise ValueError("all training vectors are identical; bandwidth is undefined")
    return float(positive.min())


def _vote(dist_row: np.ndarray, labels: np.ndarray, classes: np.ndarray, k: int, h: float):
    """Weighted vote over the k nearest entries of one distance row."""
    order = np.argsort(dist_row, kind="stable")[:k]
    nd = dist_row[order]
    w = gaussian_weight(nd, h)
    slot = np.searchsorted(classes, labels[order])
    scores = np.zeros(len(classes))
    dsum = np.zeros(len(classes))
    present = np.zeros(len(classes), dtype=bool)
    for s, wi, di in zip(slot, w, nd):
        scores[s] += wi
        dsum[s] += di
        present[s] = True
    # max score, then smaller summed distance, then lower class id
    best = None
    for s in np.flatnonzero(present):
        key = (-scores[s], dsum[s], classes[s])
        if best is None or key < best[0]:
            best = (key, s)
    return int(classes[best[1]]), scores


def classify(index: KnnIndex, query, params: KernelParams = KernelParams()):
    """Return ``(label, scores)`` with ``scores`` aligned to ``index.classes``."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query has shape {q.shape}, index dimension is {index.dim}")
    if params.k > index.size:
        raise ValueError(f"k={params.k} exceeds index size {index.size}")
    h = index.bandwidth(params)
    return _vote(index.distances(q[None, :])[0], index.labels, index.classes, params.k, h)


def classify_batch(index: KnnIndex, queries, params: KernelParams = KernelParams(), block: int = 512):
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != index.dim:
        raise ValueError(f"queries have shape {q.shape}, index dimension is {index.dim}")
    if params.k > index.size:
        raise ValueError(f"k={params.k} exceeds index size {index.size}")
    h = index.bandwidth(params)
    preds = np.empty(q.shape[0], dtype=np.int64)
    scores = np.empty((q.shape[0], len(index.classes)))
    for start in range(0, q.shape[0], block):
        d = index.distances(q[start:start + block])
        for i, row in enumerate(d):
            preds[start + i], scores[start + i] = _vote(row, index.labels, index.classes, params.k, h)
    return preds, scores


@dataclass
class KnnResult:
    accuracy: float
    predictions: np.ndarray
    correct: int
    total: int
    bandwidth: float


def evaluate_knn(index: KnnIndex, test_store, params: KernelParams = KernelParams(), normalize: bool = False) -> KnnResult:
    if test_store.labels is None:
        raise ValueError("test store has no labels")
    x = test_store.data.astype(np.float64)
    if normalize:
        x = l2_normalize(x)
    preds, _ = classify_batch(index, x, params)
    correct = int(np.sum(preds == test_store.labels))
    total = int(test_store.count)
    acc = correct / total if total else 0.0
    return KnnResult(acc, preds, correct, total, index.bandwidth(params))


def leave_one_out(vectors, labels, params: KernelParams, metric: str = "euclidean") -> np.ndarray:
    """Predict each point from all the others."""
    index = KnnIndex(vectors, labels, metric)
    if params.k > index.size - 1:
        raise ValueError(f"k={params.k} needs at least {params.k + 1} points")
    h = index.bandwidth(params)
    d = index.distances(index.vectors)
    np.fill_diagonal(d, np.inf)
    return np.array([_vote(row, index.labels, index.classes, params.k, h)[0] for row in d])


def neighbour_agreement(vectors, labels, k: int = 10) -> float:
    """Fraction of points whose unweighted k-NN majority label equals their own."""
    labels = np.asarray(labels)
    preds = leave_one_out(vectors, labels, KernelParams(k=k, bandwidth=math.inf, bandwidth_mode="fixed"))
    return float(np.mean(preds == labels))
