"""Confidence-thresholded pseudo-labelling: label the unlabeled pool with the
current head, then retrain on labeled + pseudo-labeled rows together."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .trainer import (
    HeadParams,
    TrainConfig,
    TrainResult,
    backward,
    forward,
    init_head,
    optimize,
    softmax,
    softmax_cross_entropy,
)


@dataclass(frozen=True)
class PseudoLabelConfig:
    threshold: float = 0.9
    alpha: float = 1.0
    rounds: int = 1
    ramp: bool = False  # linear 0 -> alpha over the first half of the steps
    fresh_init: bool = True
    train: TrainConfig = TrainConfig()

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")


@dataclass
class PseudoLabelSet:
    indices: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    @classmethod
    def empty(cls) -> "PseudoLabelSet":
        return cls(np.zeros(0, np.intp), np.zeros(0, np.intp), np.zeros(0))


def assign_pseudo_labels(head: HeadParams, unlabeled, threshold: float) -> PseudoLabelSet:
    """Keep rows whose top softmax probability reaches ``threshold``."""
    x = np.asarray(unlabeled, dtype=np.float64)
    if x.shape[0] == 0:
        return PseudoLabelSet.empty()
    p = softmax(forward(head, x))
    conf = p.max(axis=1)
    keep = np.flatnonzero(conf >= threshold)
    return PseudoLabelSet(keep, np.argmax(p[keep], axis=1), conf[keep])


def alpha_at(step: int, config: PseudoLabelConfig) -> float:
    if not config.ramp:
        return config.alpha
    half = max(1, config.train.total_steps // 2)
    return config.alpha * min(1.0, step / half)


def combined_objective(head: HeadParams, x_labeled, y_labeled, x_pseudo, y_pseudo, alpha: float):
    """CE(labeled) + alpha * CE(pseudo) and its gradients in ``head.params()`` order."""
    loss, dl = softmax_cross_entropy(forward(head, x_labeled), y_labeled)
    grads = backward(head, x_labeled, dl)
    if len(y_pseudo) and alpha:
        lp, dp = softmax_cross_entropy(forward(head, x_pseudo), y_pseudo)
        loss += alpha * lp
        grads = [g + e for g, e in zip(grads, backward(head, x_pseudo, alpha * dp))]
    return loss, grads


def train_with_pseudo(
    x_labeled,
    y_labeled,
    x_unlabeled,
    pseudo: PseudoLabelSet,
    num_classes: int,
    config: PseudoLabelConfig = PseudoLabelConfig(),
    init: Optional[HeadParams] = None,
    val=None,
) -> TrainResult:
    """Minimise CE(labeled) + alpha * CE(pseudo), each a mean over its own rows.

    With no pseudo rows or ``alpha == 0`` the trajectory is exactly that of
    plain supervised training from the same seed.
    """
    x_labeled = np.asarray(x_labeled, dtype=np.float64)
    if x_labeled.shape[0] == 0:
        raise ValueError("empty labeled set")
    tc = config.train
    head = init.copy() if init is not None else init_head(x_labeled.shape[1], num_classes, tc.hidden, tc.seed)
    xp = np.asarray(x_unlabeled, dtype=np.float64)[pseudo.indices] if len(pseudo) else None
    yp = pseudo.labels

    def pseudo_term(h: HeadParams, step: int):
        a = alpha_at(step, config)
        if xp is None or a == 0.0:
            return None
        loss, dlogits = softmax_cross_entropy(forward(h, xp), yp)
        return a * loss, backward(h, xp, a * dlogits)

    return optimize(head, x_labeled, y_labeled, tc, val=val, extra=pseudo_term)


@dataclass
class RoundReport:
    round: int
    test_accuracy: float
    pseudo_count: int
    pseudo_correctness: Optional[float]

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "test_accuracy": self.test_accuracy,
            "pseudo_count": self.pseudo_count,
            "pseudo_correctness": self.pseudo_correctness,
        }


@dataclass
class PseudoRunResult:
    head: HeadParams
    baseline_accuracy: float
    rounds: list[RoundReport] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.rounds[-1].test_accuracy if self.rounds else self.baseline_accuracy

    def to_json(self) -> dict:
        return {
            "baseline_accuracy": self.baseline_accuracy,
            "final_accuracy": self.final_accuracy,
            "rounds": [r.to_json() for r in self.rounds],
        }


def _test_accuracy(head, test) -> float:
    if test is None or len(test[1]) == 0:
        return float("nan")
    return float(np.mean(np.argmax(forward(head, test[0]), axis=1) == np.asarray(test[1])))


def pseudo_label_rounds(
    x_labeled,
    y_labeled,
    x_unlabeled,
    num_classes: int,
    test=None,
    config: PseudoLabelConfig = PseudoLabelConfig(),
    unlabeled_truth=None,
) -> PseudoRunResult:
    """Supervised baseline, then ``rounds`` of pseudo-label/retrain.

    ``unlabeled_truth`` (class indices of the pool) is only used to score the
    pseudo labels; it never reaches training.
    """
    base = optimize(
        init_head(np.shape(x_labeled)[1], num_classes, config.train.hidden, config.train.seed),
        x_labeled,
        y_labeled,
        config.train,
    ).head
    result = PseudoRunResult(base, _test_accuracy(base, test))
    head = base
    for r in range(1, config.rounds + 1):
        pseudo = assign_pseudo_labels(head, x_unlabeled, config.threshold)
        correctness = None
        if unlabeled_truth is not None and len(pseudo):
            truth = np.asarray(unlabeled_truth)[pseudo.indices]
            correctness = float(np.mean(truth == pseudo.labels))
        init = None if config.fresh_init else head
        head = train_with_pseudo(x_labeled, y_labeled, x_unlabeled, pseudo, num_classes, config, init=init).head
        result.rounds.append(RoundReport(r, _test_accuracy(head, test), len(pseudo), correctness))
    result.head = head
    return result


def with_train(config: PseudoLabelConfig, **changes) -> PseudoLabelConfig:
    return replace(config, train=replace(config.train, **changes))
