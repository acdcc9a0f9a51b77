"""Detection post-processing (top-k, decode, NMS) and average-precision evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .anchors import AnchorGrid, decode_array, iou_matrix
from .losses import softmax_face

# exp() guard for width/height deltas, as in common RPN implementations
MAX_LOG_RATIO = math.log(1000.0 / 16)


@dataclass
class Detection:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float
    detector: int

    @property
    def box(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2])


def nms(boxes: np.ndarray, scores: np.ndarray, thr: float) -> np.ndarray:
    """Greedy suppression of boxes with IoU > ``thr`` against a kept box.

    Candidates are visited by descending score, ties by lower index. Returns
    kept indices in visiting order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores differ in length")
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        ious = np.where(inter > 0, inter / (areas[i] + areas[rest] - inter), 0.0)
        order = rest[ious <= thr]
    return np.array(keep, dtype=np.int64)


def postprocess(
    outputs,
    grids: Sequence[AnchorGrid],
    image_w: int,
    image_h: int,
    topk: int = 1000,
    nms_thr: float = 0.3,
    score_thr: float = 0.01,
    per_detector_nms: bool = False,
) -> list[Detection]:
    """Top-k per detector, decode, clip, pool, NMS and score threshold.

    ``outputs`` are the detector outputs for a single image. Boxes are clipped
    to ``image_w`` x ``image_h`` (the unpadded size); boxes that collapse are dropped.
    """
    boxes, scores, dets = [], [], []
    for m, (out, grid) in enumerate(zip(outputs, grids)):
        logits = out.flat_logits()[0]
        deltas = out.flat_deltas()[0]
        if len(logits) != len(grid):
            raise ValueError(f"detector {m + 1}: {len(logits)} outputs for {len(grid)} anchors")
        s = softmax_face(logits)
        idx = np.argsort(-s, kind="stable")[:topk]
        idx = idx[s[idx] >= score_thr]
        d = deltas[idx].copy()
        d[:, 2:] = np.clip(d[:, 2:], -MAX_LOG_RATIO, MAX_LOG_RATIO)
        b = decode_array(grid.boxes[idx], d)
        b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, image_w)
        b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, image_h)
        ok = (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])
        boxes.append(b[ok])
        scores.append(s[idx][ok])
        dets.append(np.full(int(ok.sum()), m + 1))
    boxes = np.concatenate(boxes)
    scores = np.concatenate(scores)
    dets = np.concatenate(dets)
    if per_detector_nms:
        keep = np.concatenate(
            [np.flatnonzero(dets == m)[nms(boxes[dets == m], scores[dets == m], nms_thr)] for m in range(1, 5)]
        )
        keep = keep[np.argsort(-scores[keep], kind="stable")]
    else:
        keep = nms(boxes, scores, nms_thr)
    return [Detection(*map(float, boxes[k]), float(scores[k]), int(dets[k])) for k in keep]


def detect(net, image: np.ndarray, image_w: int, image_h: int, **kw) -> list[Detection]:
    """Run the network on one padded ``(1, C, H, W)`` image and post-process."""
    from .anchors import tile_all

    outs, _ = net.forward(image)
    grids = tile_all(net.cfg.anchors, image.shape[3], image.shape[2])
    return postprocess(outs, grids, image_w, image_h, **kw)


@dataclass
class EvalReport:
    ap: float
    pr_points: list[tuple[float, float]] = field(default_factory=list)
    thresholds: list[float] = field(default_factory=list)
    tp: int = 0
    fp: int = 0
    num_gt: int = 0
    no_ground_truth: bool = False


def ap_at_iou(dets_per_image, gts_per_image, iou_thr: float = 0.5) -> EvalReport:
    """All-point interpolated AP over a global descending-score sweep.

    ``dets_per_image[i]`` is a sequence of ``(box, score)`` or :class:`Detection`;
    ``gts_per_image[i]`` an ``(n, 4)`` box array. A detection is a true
    positive when the best-overlapping still-unmatched ground truth in its
    image reaches ``iou_thr``; that ground truth is then consumed.
    """
    gts = [np.asarray(g, dtype=np.float64).reshape(-1, 4) for g in gts_per_image]
    num_gt = sum(len(g) for g in gts)
    flat = []
    for i, dets in enumerate(dets_per_image):
        for k, d in enumerate(dets):
            if isinstance(d, Detection):
                box, score = d.box, d.score
            else:
                box, score = np.asarray(d[0], dtype=np.float64), float(d[1])
            flat.append((-score, i, k, box, score))
    flat.sort(key=lambda t: (t[0], t[1], t[2]))
    if num_gt == 0:
        return EvalReport(0.0, [], [], 0, len(flat), 0, True)
    matched = [np.zeros(len(g), dtype=bool) for g in gts]
    tp_flags = np.zeros(len(flat), dtype=bool)
    for n, (_, i, _, box, _) in enumerate(flat):
        g = gts[i] if i < len(gts) else np.zeros((0, 4))
        if len(g) == 0:
            continue
        ious = iou_matrix(box[None], g)[0]
        ious[matched[i]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_thr:
            matched[i][j] = True
            tp_flags[n] = True
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    # precision envelope, then area under the step curve
    env = np.maximum.accumulate(precision[::-1])[::-1] if len(flat) else precision
    prev = np.concatenate([[0.0], recall[:-1]]) if len(flat) else recall
    ap = float(np.sum((recall - prev) * env))
    return EvalReport(
        ap,
        [(float(r), float(p)) for r, p in zip(recall, precision)],
        [t[4] for t in flat],
        int(tp[-1]) if len(flat) else 0,
        int(fp[-1]) if len(flat) else 0,
        num_gt,
    )


def pr_export(report: EvalReport, csv_path, svg_path=None) -> None:
    try:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("recall", "precision", "score_threshold"))
            for (r, p), t in zip(report.pr_points, report.thresholds):
                w.writerow((repr(r), repr(p), repr(float(t))))
        if svg_path is not None:
            Path(svg_path).write_text(pr_svg(report))
    except OSError as exc:
        raise OSError(f"cannot write PR curve to {exc.filename}: {exc.strerror}") from exc


def read_pr_csv(path) -> list[tuple[float, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [(float(r), float(p), float(t)) for r, p, t in rows[1:]]


def pr_svg(report: EvalReport, size: int = 320, margin: int = 40) -> str:
    span = size - 2 * margin

    def xy(r, p):
        return f"{margin + r * span:.2f},{size - margin - p * span:.2f}"

    pts = " ".join(xy(r, p) for r, p in report.pr_points)
    ticks = []
    for k in range(6):
        v = k / 5
        x = margin + v * span
        y = size - margin - v * span
        ticks.append(f'<text x="{x:.1f}" y="{size - margin + 16}" font-size="10" text-anchor="middle">{v:.1f}</text>')
        ticks.append(f'<text x="{margin - 6}" y="{y + 3:.1f}" font-size="10" text-anchor="end">{v:.1f}</text>')
    return "\n".join(
        [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
            f'<rect width="{size}" height="{size}" fill="white"/>',
            f'<line x1="{margin}" y1="{size - margin}" x2="{size - margin}" y2="{size - margin}" stroke="black"/>',
            f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{size - margin}" stroke="black"/>',
            *ticks,
            f'<text x="{size / 2}" y="{size - 6}" font-size="12" text-anchor="middle">recall</text>',
            f'<text x="12" y="{size / 2}" font-size="12" text-anchor="middle" '
            f'transform="rotate(-90 12 {size / 2})">precision</text>',
            f'<text x="{size / 2}" y="20" font-size="12" text-anchor="middle">AP = {report.ap:.4f}</text>',
            f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{pts}"/>',
            "</svg>",
            "",
        ]
    )
