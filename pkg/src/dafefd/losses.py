"""Online hard example mining and the classification / regression / total losses.

All per-detector quantities are flat over that detector's anchors, in the
anchor order produced by :func:`dafefd.anchors.tile_anchors`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .anchors import NEGATIVE, POSITIVE


@dataclass(frozen=True)
class LossWeights:
    lambda_b: float = 1.0
    lambda_d: float = 1.0

    def __post_init__(self):
        if self.lambda_b < 0 or self.lambda_d < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class SelectedAnchors:
    positives: np.ndarray
    negatives: np.ndarray

    @property
    def num_cls(self) -> int:
        return len(self.positives) + len(self.negatives)

    @property
    def num_reg(self) -> int:
        return len(self.positives)

    @property
    def indices(self) -> np.ndarray:
        return np.concatenate([self.positives, self.negatives])


def softmax_face(logits: np.ndarray) -> np.ndarray:
    """Face probability from ``(..., 2)`` background/face logits."""
    d = logits[..., 1] - logits[..., 0]
    return 0.5 * (1.0 + np.tanh(0.5 * d))


def ohem_select(
    face_scores: np.ndarray,
    labels: np.ndarray,
    budget: int = 256,
    max_pos_fraction: float = 0.5,
) -> SelectedAnchors:
    """Hardest positives (lowest face score) then hardest negatives (highest).

    Positives are capped at ``max_pos_fraction * budget``; negatives fill the
    rest. Ignored anchors are never picked; ties go to the lower index.
    """
    if budget <= 0:
        raise ValueError("OHEM budget must be positive")
    scores = np.asarray(face_scores, dtype=np.float64)
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    pos = pos[np.argsort(scores[pos], kind="stable")][: int(max_pos_fraction * budget)]
    neg = neg[np.argsort(-scores[neg], kind="stable")][: budget - len(pos)]
    return SelectedAnchors(pos, neg)


def cls_loss(
    logits: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    selections: Sequence[SelectedAnchors],
) -> tuple[float, list[np.ndarray]]:
    """Sum over detectors of the mean 2-way cross-entropy over selected anchors.

    ``logits[m]`` is ``(A_m, 2)``. Returns the loss and per-detector gradients.
    A detector with an empty selection contributes nothing.
    """
    total = 0.0
    grads = []
    for z, lab, sel in zip(logits, labels, selections):
        g = np.zeros_like(z, dtype=np.float64)
        grads.append(g)
        idx = sel.indices
        if len(idx) == 0:
            continue
        zi = z[idx]
        target = (lab[idx] == POSITIVE).astype(np.int64)
        m = zi.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(zi - m).sum(axis=1))
        total += float(np.sum(lse - zi[np.arange(len(idx)), target])) / len(idx)
        p = np.exp(zi - lse[:, None])
        p[np.arange(len(idx)), target] -= 1.0
        np.add.at(g, idx, p / len(idx))
    return total, grads


def smooth_l1(x: np.ndarray) -> np.ndarray:
    a = np.abs(x)
    return np.where(a < 1.0, 0.5 * x * x, a - 0.5)


def smooth_l1_grad(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def box_loss(
    deltas: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
    selections: Sequence[SelectedAnchors],
) -> tuple[float, list[np.ndarray], bool]:
    """Sum over detectors of smooth-L1 over selected positives / their count.

    ``deltas[m]`` and ``targets[m]`` are ``(A_m, 4)``; only rows of selected
    positives are read from ``targets``. The flag is ``False`` when no
    detector had a selected positive (the loss is then 0).
    """
    total = 0.0
    grads = []
    any_pos = False
    for d, t, sel in zip(deltas, targets, selections):
        g = np.zeros_like(d, dtype=np.float64)
        grads.append(g)
        idx = sel.positives
        if len(idx) == 0:
            continue
        any_pos = True
        r = d[idx] - t[idx]
        total += float(np.sum(smooth_l1(r))) / len(idx)
        np.add.at(g, idx, smooth_l1_grad(r) / len(idx))
    return total, grads, any_pos


def total_loss(cls: float, box: float, den: float, weights: LossWeights) -> float:
    for name, v in (("cls", cls), ("box", box), ("den", den)):
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite {name} loss: {v}")
    return cls + weights.lambda_b * box + weights.lambda_d * den
