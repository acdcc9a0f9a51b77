"""Anchor tiling, IoU geometry, anchor/ground-truth matching and box encoding.

Boxes are ``(x1, y1, x2, y2)`` in continuous pixel coordinates. Vectorised
routines take ``(n, 4)`` float arrays; :class:`Box` is the scalar form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
BASE_SIZE = 16.0


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ValueError(f"non-finite box {self}")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise ValueError(f"box must have positive extent: {self}")

    @classmethod
    def from_center(cls, cx, cy, w, h) -> Box:
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    @classmethod
    def from_xywh(cls, x, y, w, h) -> Box:
        return cls(x, y, x + w, y + h)

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    @property
    def cx(self) -> float:
        return (self.x1 + self.x2) / 2

    @property
    def cy(self) -> float:
        return (self.y1 + self.y2) / 2

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class RegressionTarget:
    tx: float
    ty: float
    tw: float
    th: float


@dataclass(frozen=True)
class DetectorAnchors:
    """Anchor layout for one detector: stride plus square sizes in pixels."""

    stride: int
    scales: tuple[float, ...]
    base_size: float = BASE_SIZE

    @property
    def sizes(self) -> tuple[float, ...]:
        return tuple(s * self.base_size for s in self.scales)


@dataclass(frozen=True)
class AnchorConfig:
    detectors: tuple[DetectorAnchors, ...] = (
        DetectorAnchors(4, (1.0,)),
        DetectorAnchors(8, (1.5, 2.0)),
        DetectorAnchors(16, (4.0, 8.0)),
        DetectorAnchors(32, (16.0, 32.0)),
    )


@dataclass
class AnchorGrid:
    """Anchors of one detector, ordered ``(row, col, scale)`` with scale fastest."""

    boxes: np.ndarray
    feat_h: int
    feat_w: int
    num_scales: int
    stride: int

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class MatchResult:
    labels: np.ndarray
    matched_gt: np.ndarray
    max_iou: np.ndarray

    @property
    def num_positive(self) -> int:
        return int(np.sum(self.labels == POSITIVE))


def tile_anchors(entry: DetectorAnchors, image_w: int, image_h: int) -> AnchorGrid:
    """Square anchors of side ``scale * base_size`` centred at ``(j+0.5)*stride``.

    Anchors crossing the image border are kept.
    """
    if not entry.scales:
        raise ValueError("detector has no anchor scales")
    if image_w < entry.stride or image_h < entry.stride:
        raise ValueError(f"image {image_w}x{image_h} smaller than stride {entry.stride}")
    fh, fw = -(-image_h // entry.stride), -(-image_w // entry.stride)
    cy = (np.arange(fh) + 0.5) * entry.stride
    cx = (np.arange(fw) + 0.5) * entry.stride
    sizes = np.asarray(entry.sizes, dtype=np.float64)
    cyy, cxx, ss = np.meshgrid(cy, cx, sizes, indexing="ij")
    half = ss / 2
    boxes = np.stack([cxx - half, cyy - half, cxx + half, cyy + half], axis=-1).reshape(-1, 4)
    return AnchorGrid(boxes, fh, fw, len(sizes), entry.stride)


def tile_all(config: AnchorConfig, image_w: int, image_h: int) -> list[AnchorGrid]:
    return [tile_anchors(d, image_w, image_h) for d in config.detectors]


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def match_anchors(
    anchors: AnchorGrid | np.ndarray,
    gts: np.ndarray | Sequence[Box],
    pos_thr: float = 0.5,
    neg_thr: float = 0.3,
    force_best: bool = True,
    mid_as_negative: bool = False,
) -> MatchResult:
    """Label anchors positive (IoU > pos_thr), negative (< neg_thr) or ignore.

    With ``force_best`` the highest-IoU anchor of every ground truth is made
    positive too (first index on ties), provided it overlaps at all.
    """
    boxes = anchors.boxes if isinstance(anchors, AnchorGrid) else np.asarray(anchors)
    gts = _as_box_array(gts)
    n = len(boxes)
    if len(gts) == 0:
        return MatchResult(
            np.full(n, NEGATIVE, dtype=np.int8), np.full(n, -1, dtype=np.int64), np.zeros(n)
        )
    ious = iou_matrix(boxes, gts)
    matched = ious.argmax(axis=1)
    max_iou = ious[np.arange(n), matched]
    labels = np.full(n, IGNORE, dtype=np.int8)
    labels[max_iou < neg_thr] = NEGATIVE
    if mid_as_negative:
        labels[max_iou <= pos_thr] = NEGATIVE
    labels[max_iou > pos_thr] = POSITIVE
    if force_best:
        best = ious.argmax(axis=0)
        for g, a in enumerate(best):
            if ious[a, g] > 0:
                labels[a] = POSITIVE
                matched[a] = g
    matched = np.where(labels == POSITIVE, matched, -1)
    return MatchResult(labels, matched, max_iou)


def _as_box_array(gts) -> np.ndarray:
    if isinstance(gts, np.ndarray):
        return gts.reshape(-1, 4).astype(np.float64)
    return np.array([g.as_array() if isinstance(g, Box) else g for g in gts], dtype=np.float64).reshape(-1, 4)


def encode_array(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Row-wise ``(tx, ty, tw, th)`` of ``gts`` relative to ``anchors``."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0) or np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("boxes must have positive extent")
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    gx = gts[:, 0] + gw / 2
    gy = gts[:, 1] + gh / 2
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def encode(anchor: Box, gt: Box) -> RegressionTarget:
    t = encode_array(anchor.as_array()[None], gt.as_array()[None])[0]
    return RegressionTarget(*map(float, t))


def decode(anchor: Box, t: RegressionTarget) -> Box:
    b = decode_array(anchor.as_array()[None], np.array([[t.tx, t.ty, t.tw, t.th]]))[0]
    return Box(*map(float, b))


@dataclass
class OverlapStats:
    max_ious: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray
    mean: float = field(default=float("nan"))
    median: float = field(default=float("nan"))

    def rows(self) -> list[tuple[float, float, int]]:
        return [
            (float(lo), float(hi), int(c))
            for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts)
        ]


def anchor_overlap_stats(images, config: AnchorConfig = AnchorConfig(), bins: int = 10) -> OverlapStats:
    """Best IoU of each ground truth against the union of all detectors' anchors.

    ``images`` is an iterable of ``(image_w, image_h, gt_boxes)``.
    """
    best = []
    for w, h, gts in images:
        gts = _as_box_array(gts)
        if len(gts) == 0:
            continue
        anchors = np.concatenate([g.boxes for g in tile_all(config, w, h)])
        best.append(iou_matrix(gts, anchors).max(axis=1))
    edges = np.linspace(0.0, 1.0, bins + 1)
    if not best:
        return OverlapStats(np.zeros(0), edges, np.zeros(0, dtype=np.int64))
    vals = np.concatenate(best)
    counts, _ = np.histogram(vals, bins=edges)
    return OverlapStats(vals, edges, counts, float(vals.mean()), float(np.median(vals)))
