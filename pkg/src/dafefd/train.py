"""Multi-task training loop: OHEM detection losses plus density regression."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import anchors as anc
from .annotations import parse_annotations, resolve_image
from .config import RunConfig, TrainConfig
from .density import density_loss, generate_gt_density, points_from_boxes
from .imageio import read_pnm, to_network_input
from .losses import box_loss, cls_loss, ohem_select, softmax_face, total_loss
from .network import DAFENet, NetConfig, pad_to_multiple, unflatten
from .optim import SGD, Schedule

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iter", "L_cls", "L_box", "L_den", "lr")


@dataclass
class Sample:
    image: np.ndarray  # (1, C, H, W), already padded
    boxes: np.ndarray  # (n, 4) x1, y1, x2, y2
    width: int  # before padding
    height: int


@dataclass
class Targets:
    labels: list[np.ndarray]
    reg: list[np.ndarray]
    density: np.ndarray | None


class Dataset:
    def __init__(self, samples: list[Sample], names: list[str] | None = None):
        if not samples:
            raise ValueError("dataset is empty")
        self.samples = samples
        self.names = names or [str(i) for i in range(len(samples))]

    def __len__(self):
        return len(self.samples)

    @classmethod
    def from_annotations(cls, path) -> Dataset:
        records = parse_annotations(path)
        samples = []
        for r in records:
            img = read_pnm(resolve_image(path, r.image_path))
            h, w = img.shape[:2]
            samples.append(Sample(pad_to_multiple(to_network_input(img)), r.boxes(), w, h))
        return cls(samples, [r.image_path for r in records])


def flip_sample(s: Sample) -> Sample:
    img = s.image[:, :, :, : s.width][..., ::-1]
    b = s.boxes.copy()
    if len(b):
        b[:, [0, 2]] = s.width - s.boxes[:, [2, 0]]
    return Sample(pad_to_multiple(np.ascontiguousarray(img)), b, s.width, s.height)


def build_targets(sample: Sample, net_cfg: NetConfig, cfg: TrainConfig, with_density: bool) -> Targets:
    h, w = sample.image.shape[2:]
    grids = anc.tile_all(net_cfg.anchors, w, h)
    all_boxes = np.concatenate([g.boxes for g in grids])
    match = anc.match_anchors(
        all_boxes, sample.boxes, cfg.pos_iou, cfg.neg_iou, mid_as_negative=cfg.mid_as_negative
    )
    reg = np.zeros((len(all_boxes), 4))
    pos = np.flatnonzero(match.labels == anc.POSITIVE)
    if len(pos):
        reg[pos] = anc.encode_array(all_boxes[pos], sample.boxes[match.matched_gt[pos]])
    splits = np.cumsum([len(g) for g in grids])[:-1]
    density = None
    if with_density:
        dm = generate_gt_density(points_from_boxes(sample.boxes), w, h, 4, cfg.gaussian)
        density = dm.grid[None, None]
    return Targets(np.split(match.labels, splits), np.split(reg, splits), density)


@dataclass
class StepResult:
    cls: float
    box: float
    den: float
    total: float
    has_pos: bool


def train_step(net: DAFENet, sample: Sample, targets: Targets, cfg: TrainConfig, scale: float = 1.0) -> StepResult:
    """Forward, losses and backward for one image; gradients accumulate into ``net``."""
    outs, density = net.forward(sample.image)
    logits = [o.flat_logits()[0] for o in outs]
    deltas = [o.flat_deltas()[0] for o in outs]
    sels = [
        ohem_select(softmax_face(z), lab, cfg.ohem_budget, cfg.max_pos_fraction)
        for z, lab in zip(logits, targets.labels)
    ]
    lc, gc = cls_loss(logits, targets.labels, sels)
    lb, gb, has_pos = box_loss(deltas, targets.reg, sels)
    lam = cfg.weights
    ld = 0.0
    g_den = None
    if density is not None and targets.density is not None:
        ld, gd = density_loss(density, targets.density, cfg.density_loss)
        if lam.lambda_d > 0:
            g_den = gd * (lam.lambda_d * scale)
    total = total_loss(lc, lb, ld, lam)
    head = []
    for o, c, b in zip(outs, gc, gb):
        fh, fw = o.cls_logits.shape[2:]
        head.append((unflatten(c[None] * scale, fh, fw, 2), unflatten(b[None] * (lam.lambda_b * scale), fh, fw, 4)))
    net.backward(head, g_den)
    return StepResult(lc, lb, ld, total, has_pos)


@dataclass
class TrainResult:
    net: DAFENet
    trace: list[tuple] = field(default_factory=list)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for row in self.trace:
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def train(
    dataset: Dataset,
    run: RunConfig,
    out_dir=None,
    checkpoint: Callable[[DAFENet, int, Path], None] | None = None,
    progress_every: int = 0,
) -> TrainResult:
    """Run SGD for ``run.train.iterations`` steps; deterministic given the seed.

    Images are visited in a per-epoch shuffled order. With ``out_dir`` the
    loss trace is written to ``trace.csv`` and ``checkpoint`` is called at each
    learning-rate milestone and at the end.
    """
    cfg = run.train
    net = DAFENet(run.net, seed=cfg.seed)
    opt = SGD(net.parameters(), Schedule(cfg.lr, cfg.milestones), cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    with_density = net.dem is not None
    cache: dict[tuple[int, bool], tuple[Sample, Targets]] = {}

    def prepared(idx: int, flip: bool):
        key = (idx, flip)
        if key not in cache:
            s = dataset.samples[idx]
            if flip:
                s = flip_sample(s)
            cache[key] = (s, build_targets(s, run.net, cfg, with_density))
        return cache[key]

    order: list[int] = []
    result = TrainResult(net)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    scale = 1.0 / cfg.batch_size
    for it in range(cfg.iterations):
        lr = opt.lr
        net.zero_grad()
        acc = np.zeros(3)
        for _ in range(cfg.batch_size):
            if not order:
                order = list(rng.permutation(len(dataset)))
            idx = int(order.pop())
            flip = bool(rng.integers(2)) if cfg.flip else False
            sample, targets = prepared(idx, flip)
            r = train_step(net, sample, targets, cfg, scale)
            acc += (r.cls, r.box, r.den)
        acc *= scale
        if not all(math.isfinite(v) for v in acc):
            raise FloatingPointError(f"non-finite loss at iteration {it + 1}: {acc.tolist()}")
        opt.step()
        result.trace.append((it + 1, acc[0], acc[1], acc[2], lr))
        if progress_every and (it + 1) % progress_every == 0:
            log.info("iter %d cls %.4f box %.4f den %.6f lr %g", it + 1, *acc, lr)
        if out is not None and checkpoint is not None and (it + 1 in cfg.milestones):
            checkpoint(net, it + 1, out)
    if out is not None:
        result.write_trace(out / "trace.csv")
        if checkpoint is not None:
            checkpoint(net, cfg.iterations, out)
    return result


def total_from_row(row, weights) -> float:
    return row[1] + weights.lambda_b * row[2] + weights.lambda_d * row[3]
