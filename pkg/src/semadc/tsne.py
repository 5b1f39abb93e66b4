"""Exact O(N^2) t-SNE to two dimensions."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    momentum_initial: float = 0.5
    momentum_final: float = 0.8
    momentum_switch: int = 250
    learning_rate: float = 200.0
    init_scale: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if not self.perplexity > 0:
            raise ValueError("perplexity must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.exaggeration <= 0 or self.exaggeration_iters < 0:
            raise ValueError("invalid early exaggeration settings")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be positive")


def squared_distances(x: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _row_distribution(d_row: np.ndarray, log_sigma: float):
    """Conditional row for one sigma and its entropy (nats)."""
    beta = 0.5 * math.exp(-2.0 * log_sigma)
    logits = -d_row * beta
    logits -= logits.max()
    p = np.exp(logits)
    s = p.sum()
    p /= s
    # H = log s - sum p * logits
    h = math.log(s) - float(np.dot(p, logits))
    return p, h


@dataclass
class ConditionalAffinities:
    p: np.ndarray  # rows are p_{j|i}
    sigma: np.ndarray
    converged: np.ndarray  # per-row flag; False rows hit the bisection limit


def conditional_affinities(x, perplexity: float, tol: float = 1e-4, max_steps: int = 64) -> ConditionalAffinities:
    """Per-point Gaussian conditionals with sigma bisected (on log sigma) to
    match ``perplexity`` = 2**H."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if x.ndim != 2 or n < 4:
        raise ValueError(f"need at least 4 points, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    if perplexity > (n - 1) / 3:
        log.warning("perplexity %.3g exceeds (N-1)/3 = %.3g for N=%d", perplexity, (n - 1) / 3, n)
    target = math.log(perplexity)  # compare entropies in nats
    d = squared_distances(x)
    p = np.zeros((n, n))
    sigma = np.zeros(n)
    converged = np.ones(n, dtype=bool)
    positive = d[d > 0]
    scale = 0.5 * math.log(np.median(positive)) if positive.size else 0.0
    for i in range(n):
        row = np.delete(d[i], i)
        lo, hi = scale - 30.0, scale + 30.0
        ls = scale
        for _ in range(max_steps):
            pr, h = _row_distribution(row, ls)
            if abs(math.exp(h) - perplexity) < tol:
                break
            # entropy grows with sigma
            if h > target:
                hi = ls
            else:
                lo = ls
            ls = 0.5 * (lo + hi)
        else:
            pr, h = _row_distribution(row, ls)
            if abs(math.exp(h) - perplexity) >= tol:
                converged[i] = False
                log.warning(
                    "row %d: perplexity search stopped at %.6g (target %.6g), log-sigma bracket [%.3g, %.3g]",
                    i, math.exp(h), perplexity, lo, hi,
                )
        p[i, np.arange(n) != i] = pr
        sigma[i] = math.exp(ls)
    return ConditionalAffinities(p, sigma, converged)


def symmetrize(p_cond) -> np.ndarray:
    """Joint p_ij = (p_{j|i} + p_{i|j}) / 2N."""
    p = np.asarray(p_cond, dtype=np.float64)
    n = p.shape[0]
    joint = (p + p.T) / (2.0 * n)
    np.fill_diagonal(joint, 0.0)
    return joint


def low_dim_affinities(y) -> tuple[np.ndarray, float]:
    """Student-t affinities Q and their normalizer Z."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] < 2:
        raise ValueError("need at least 2 points")
    w = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(w, 0.0)
    z = float(w.sum())
    return w / z, z


def kl_and_gradient(p, y) -> tuple[float, np.ndarray]:
    """KL(P || Q) over off-diagonal entries and its gradient w.r.t. ``y``."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != (y.shape[0], y.shape[0]):
        raise ValueError(f"P is {p.shape} but Y has {y.shape[0]} rows")
    w = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(w, 0.0)
    q = w / w.sum()
    mask = p > 0
    kl = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
    m = (p - q) * w
    grad = 4.0 * (m.sum(axis=1)[:, None] * y - m @ y)
    return kl, grad


@dataclass
class EmbeddingLayout:
    y: np.ndarray
    kl: float
    kl_initial: float
    trace: list[tuple[int, float]] = field(default_factory=list)
    perplexity: float = 0.0


def run_tsne(x, config: TsneConfig = TsneConfig()) -> EmbeddingLayout:
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 4:
        raise ValueError(f"t-SNE needs at least 4 points, got {n}")
    perplexity = config.perplexity
    if perplexity > (n - 1) / 3:
        perplexity = (n - 1) / 3
        log.warning("perplexity clamped to %.4g for N=%d", perplexity, n)
    p = symmetrize(conditional_affinities(x, perplexity).p)

    rng = np.random.default_rng(config.seed)
    y = rng.normal(0.0, config.init_scale, size=(n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    kl0, _ = kl_and_gradient(p, y)
    trace = [(0, kl0)]
    for it in range(1, config.iterations + 1):
        exaggerate = it <= config.exaggeration_iters
        _, grad = kl_and_gradient(p * config.exaggeration if exaggerate else p, y)
        momentum = config.momentum_initial if it <= config.momentum_switch else config.momentum_final
        same = (grad > 0) == (update > 0)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - config.learning_rate * gains * grad
        y = y + update
        y -= y.mean(axis=0)
        if it % 50 == 0 or it == config.iterations:
            kl, _ = kl_and_gradient(p, y)
            if not math.isfinite(kl) or not np.all(np.isfinite(y)):
                raise NumericError(f"t-SNE diverged at iteration {it}; KL trace {trace}")
            trace.append((it, kl))
    return EmbeddingLayout(y, trace[-1][1], kl0, trace, perplexity)


def write_layout_csv(layout: EmbeddingLayout, labels, path) -> None:
    labels = [] if labels is None else list(labels)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("index,x,y,label\n")
        for i, (a, b) in enumerate(layout.y):
            lab = labels[i] if i < len(labels) and labels[i] is not None else ""
            fh.write(f"{i},{float(a)!r},{float(b)!r},{lab}\n")


def read_layout_csv(path) -> tuple[np.ndarray, list]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()
    if not rows or rows[0] != "index,x,y,label":
        raise ValueError(f"{path}: not a layout CSV")
    y, labels = [], []
    for line in rows[1:]:
        _, a, b, lab = line.split(",")
        y.append((float(a), float(b)))
        labels.append(int(lab) if lab else None)
    return np.array(y).reshape(-1, 2), labels
