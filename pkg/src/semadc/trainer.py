"""Classification head over frozen embeddings: forward/backward by hand,
softmax cross-entropy, AdamW and a cosine schedule with linear warmup."""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import erf

from .errors import BadMagicError, ChecksumError, NumericError, StoreFormatError, TruncatedFileError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass
class HeadParams:
    """Layer ``i`` maps ``x @ weights[i] + biases[i]``; weights are (fan_in, fan_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) not in (1, 2) or len(self.weights) != len(self.biases):
            raise ValueError("a head has one (linear) or two (GELU MLP) layers")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i} input {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")

    @property
    def activation(self) -> str:
        return "none" if len(self.weights) == 1 else "gelu"

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, flat: list[np.ndarray]) -> "HeadParams":
        return HeadParams(list(flat[0::2]), list(flat[1::2]))

    def copy(self) -> "HeadParams":
        return HeadParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_head(input_dim: int, num_classes: int, hidden: Optional[int] = None, seed: int = 0) -> HeadParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    dims = [input_dim] + ([hidden] if hidden else []) + [num_classes]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return HeadParams(weights, biases)


def _check_input(head: HeadParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != head.input_dim:
        raise ValueError(f"embedding dim {x.shape[1]} != head input dim {head.input_dim}")
    return x


def _forward_cache(head: HeadParams, x: np.ndarray):
    if head.activation == "none":
        return x @ head.weights[0] + head.biases[0], None
    pre = x @ head.weights[0] + head.biases[0]
    hid = gelu(pre)
    return hid @ head.weights[1] + head.biases[1], (pre, hid)


def forward(head: HeadParams, x) -> np.ndarray:
    """Logits, shape (B, C)."""
    return _forward_cache(head, _check_input(head, x))[0]


def representation(head: HeadParams, x) -> np.ndarray:
    """Penultimate features: hidden activations for an MLP head, logits for a linear one."""
    x = _check_input(head, x)
    if head.activation == "none":
        return forward(head, x)
    return gelu(x @ head.weights[0] + head.biases[0])


def backward(head: HeadParams, x, dlogits) -> list[np.ndarray]:
    """Gradients in ``head.params()`` order given dLoss/dLogits."""
    x = _check_input(head, x)
    g = np.asarray(dlogits, dtype=np.float64)
    if g.shape != (x.shape[0], head.num_classes):
        raise ValueError(f"upstream gradient shape {g.shape} != {(x.shape[0], head.num_classes)}")
    if head.activation == "none":
        return [x.T @ g, g.sum(axis=0)]
    pre = x @ head.weights[0] + head.biases[0]
    hid = gelu(pre)
    dhid = g @ head.weights[1].T
    dpre = dhid * gelu_grad(pre)
    return [x.T @ dpre, dpre.sum(axis=0), hid.T @ g, g.sum(axis=0)]


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    b, c = z.shape
    if y.shape != (b,):
        raise ValueError(f"{b} logit rows but {y.shape} labels")
    if b and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    if b == 0:
        return 0.0, np.zeros_like(z)
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(logsum - shifted[rows, y]))
    grad = np.exp(shifted - logsum[:, None])
    grad[rows, y] -= 1.0
    return loss, grad / b


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    peak_lr: float = 1e-2
    min_lr: float = 0.0
    warmup_steps: Optional[int] = None  # None -> 10% of the steps
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: Optional[int] = None  # None -> linear head; MLP default width is 512
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be positive")
        if not 0 <= self.min_lr <= self.peak_lr:
            raise ValueError("need 0 <= min_lr <= peak_lr")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("invalid AdamW constants")
        if self.hidden is not None and self.hidden < 1:
            raise ValueError("hidden width must be >= 1")
        if self.warmup_steps is not None and self.epochs and not 0 <= self.warmup_steps < self.epochs:
            raise ValueError("need 0 <= warmup_steps < total steps")

    @property
    def total_steps(self) -> int:
        return self.epochs

    @property
    def warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return int(0.1 * self.epochs)


def cosine_warmup_lr(t: int, peak: float, min_lr: float, warmup: int, total: int) -> float:
    """Linear warmup from 0 to ``peak`` then cosine decay to ``min_lr`` at ``total``."""
    if t < 0 or t > total:
        raise ValueError(f"step {t} outside [0, {total}]")
    if t == warmup:
        return peak  # also covers warmup == 0, where the cosine form can round off peak
    if t < warmup:
        return peak * (t / warmup)
    return min_lr + 0.5 * (peak - min_lr) * (1.0 + math.cos(math.pi * (t - warmup) / (total - warmup)))


def schedule_lr(t: int, config: TrainConfig) -> float:
    return cosine_warmup_lr(t, config.peak_lr, config.min_lr, config.warmup, config.total_steps)


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adamw_step(params, grads, state: OptimizerState, lr: float, config: TrainConfig):
    """One AdamW update with decoupled weight decay. Returns new params; the state is updated in place."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter and gradient shapes disagree")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {i} at step {state.t + 1}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        # same as p - lr * (adaptive + wd * p), written so that g == 0 decays by exactly (1 - lr * wd)
        out.append(p * (1.0 - lr * config.weight_decay) - lr * (m_hat / (np.sqrt(v_hat) + config.eps)))
    return out


def accuracy(head: HeadParams, x, y) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(np.argmax(forward(head, x), axis=1) == np.asarray(y)))


@dataclass
class TrainResult:
    head: HeadParams
    history: list[dict] = field(default_factory=list)
    best_epoch: Optional[int] = None


# Extra objective term: (head, step) -> (loss, grads) or None to skip.
ExtraTerm = Callable[[HeadParams, int], Optional[tuple[float, list[np.ndarray]]]]


def optimize(
    head: HeadParams,
    x,
    y,
    config: TrainConfig,
    val: Optional[tuple] = None,
    extra: Optional[ExtraTerm] = None,
) -> TrainResult:
    """Full-batch AdamW on mean cross-entropy, one step per epoch."""
    x = _check_input(head, x)
    y = np.asarray(y, dtype=np.intp)
    if x.shape[0] == 0:
        raise ValueError("empty labeled set")
    state = OptimizerState.zeros_like(head.params())
    history: list[dict] = []
    best_acc, best_head, best_epoch = -1.0, head, None
    for step in range(1, config.total_steps + 1):
        logits, cache = _forward_cache(head, x)
        loss, dlogits = softmax_cross_entropy(logits, y)
        grads = backward(head, x, dlogits)
        entry = {"epoch": step, "loss": loss}
        total = loss
        term = extra(head, step) if extra is not None else None
        if term is not None:
            extra_loss, extra_grads = term
            grads = [g + e for g, e in zip(grads, extra_grads)]
            entry["extra_loss"] = extra_loss
            total = loss + extra_loss
        if not math.isfinite(total):
            raise NumericError(f"loss became {total} at step {step}")
        lr = schedule_lr(step, config)
        head = head.with_params(adamw_step(head.params(), grads, state, lr, config))
        entry["lr"] = lr
        if val is not None:
            acc = accuracy(head, val[0], val[1])
            entry["val_accuracy"] = acc
            if acc > best_acc:
                best_acc, best_head, best_epoch = acc, head, step
        history.append(entry)
    if val is not None and best_epoch is not None:
        return TrainResult(best_head, history, best_epoch)
    return TrainResult(head, history)


def train_head(x, y, num_classes: int, config: TrainConfig = TrainConfig(), val=None) -> TrainResult:
    """Train a fresh head on class indices ``y`` in ``[0, num_classes)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("labeled store must be a nonempty 2-D array")
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    head = init_head(x.shape[1], num_classes, config.hidden, config.seed)
    return optimize(head, x, y, config, val=val)


def predict(head: HeadParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities and argmax indices (ties go to the lowest index)."""
    p = softmax(forward(head, x))
    return p, np.argmax(p, axis=1)


# ---------------------------------------------------------------------------
# checkpoint format

HEAD_MAGIC = b"HEAD"
HEAD_VERSION = 1


def save_head(head: HeadParams, path) -> None:
    parts = [struct.pack("<4sHIB", HEAD_MAGIC, HEAD_VERSION, head.num_classes, len(head.weights))]
    for w, b in zip(head.weights, head.biases):
        parts.append(struct.pack("<II", *w.shape))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_head(path) -> HeadParams:
    raw = Path(path).read_bytes()
    if raw[:4] != HEAD_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {HEAD_MAGIC!r}")
    if len(raw) < 11 + 4:
        raise TruncatedFileError(f"{path}: truncated header")
    _, version, classes, nlayers = struct.unpack_from("<4sHIB", raw)
    if version != HEAD_VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    off = 11
    weights, biases = [], []
    for _ in range(nlayers):
        if off + 8 > len(raw) - 4:
            raise TruncatedFileError(f"{path}: truncated layer header")
        rows, cols = struct.unpack_from("<II", raw, off)
        off += 8
        need = 8 * (rows * cols + cols)
        if off + need > len(raw) - 4:
            raise TruncatedFileError(f"{path}: truncated layer payload")
        weights.append(np.frombuffer(raw, "<f8", rows * cols, off).reshape(rows, cols).astype(np.float64))
        off += 8 * rows * cols
        biases.append(np.frombuffer(raw, "<f8", cols, off).astype(np.float64))
        off += 8 * cols
    if off + 4 != len(raw):
        raise StoreFormatError(f"{path}: {len(raw) - off - 4} unexpected trailing bytes")
    (crc,) = struct.unpack_from("<I", raw, off)
    if zlib.crc32(raw[:off]) != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    head = HeadParams(weights, biases)
    if head.num_classes != classes:
        raise StoreFormatError(f"{path}: header says {classes} classes, layers give {head.num_classes}")
    return head
