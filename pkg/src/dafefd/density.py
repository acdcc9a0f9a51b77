"""Ground-truth density maps, the density estimator branch and its loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import engine
from .engine import ShapeError
from .layers import Conv2d, MaxPool2, Module, ReLU


@dataclass(frozen=True)
class FacePoint:
    x: float
    y: float
    box_w: float = 1.0
    box_h: float = 1.0

    def __post_init__(self):
        if self.box_w <= 0 or self.box_h <= 0:
            raise ValueError(f"face extent must be positive: {self}")


@dataclass(frozen=True)
class GaussianSpec:
    sigma_mode: str = "adaptive"  # "adaptive" or "fixed"
    sigma_fixed: float = 4.0  # pixels
    adaptive_coeff: float = 0.25
    truncation_radius: float = 3.0  # in multiples of sigma
    normalize_after_truncation: bool = True

    def __post_init__(self):
        if self.sigma_mode not in ("adaptive", "fixed"):
            raise ValueError(f"unknown sigma mode {self.sigma_mode!r}")
        if self.truncation_radius < 2:
            raise ValueError("truncation radius must be >= 2 sigma")
        if self.sigma_fixed <= 0 or self.adaptive_coeff <= 0:
            raise ValueError("sigma parameters must be positive")

    def sigma_cells(self, point: FacePoint, stride: int) -> float:
        if self.sigma_mode == "fixed":
            return self.sigma_fixed / stride
        return max(1.0, self.adaptive_coeff * math.sqrt(point.box_w * point.box_h)) / stride

    @classmethod
    def parse(cls, text: str, **kw) -> GaussianSpec:
        """Parse ``fixed:<pixels>`` or ``adaptive:<coeff>``."""
        mode, _, val = text.partition(":")
        if mode == "fixed":
            return cls("fixed", sigma_fixed=float(val or 4.0), **kw)
        if mode == "adaptive":
            return cls("adaptive", adaptive_coeff=float(val or 0.25), **kw)
        raise ValueError(f"bad sigma spec {text!r}; expected fixed:<px> or adaptive:<coeff>")


@dataclass
class DensityMap:
    grid: np.ndarray
    stride: int

    @property
    def mass(self) -> float:
        return float(self.grid.sum())


def generate_gt_density(
    points: Sequence[FacePoint],
    image_w: int,
    image_h: int,
    stride: int = 4,
    spec: GaussianSpec = GaussianSpec(),
) -> DensityMap:
    """Sum of truncated isotropic Gaussians, one per face, at map resolution.

    Map cell ``(i, j)`` is centred on image pixel ``((j+0.5)*stride, (i+0.5)*stride)``.
    Each deposit keeps only cells within ``truncation_radius * sigma`` of its
    point and inside the map; with normalisation on it is rescaled to unit mass.
    """
    if image_w <= 0 or image_h <= 0:
        raise ValueError(f"empty image dimensions {image_w}x{image_h}")
    if stride < 1:
        raise ValueError("stride must be positive")
    mh, mw = -(-image_h // stride), -(-image_w // stride)
    grid = np.zeros((mh, mw), dtype=np.float64)
    for k, p in enumerate(points):
        if not (0 <= p.x <= image_w and 0 <= p.y <= image_h):
            raise ValueError(f"point {k} at ({p.x}, {p.y}) lies outside the {image_w}x{image_h} image")
        sigma = spec.sigma_cells(p, stride)
        u, v = p.x / stride - 0.5, p.y / stride - 0.5
        r = spec.truncation_radius * sigma
        j0, j1 = max(0, math.ceil(u - r)), min(mw - 1, math.floor(u + r))
        i0, i1 = max(0, math.ceil(v - r)), min(mh - 1, math.floor(v + r))
        if j0 > j1 or i0 > i1:
            dep = None
        else:
            jj = np.arange(j0, j1 + 1) - u
            ii = np.arange(i0, i1 + 1) - v
            d2 = ii[:, None] ** 2 + jj[None, :] ** 2
            dep = np.exp(-d2 / (2 * sigma * sigma)) / (2 * math.pi * sigma * sigma)
            dep[d2 > r * r] = 0.0
        if spec.normalize_after_truncation:
            total = 0.0 if dep is None else dep.sum()
            if total <= 0:
                # kernel narrower than the cell pitch: the nearest cell takes all the mass
                ni = min(max(int(round(v)), 0), mh - 1)
                nj = min(max(int(round(u)), 0), mw - 1)
                grid[ni, nj] += 1.0
                continue
            dep = dep / total
        if dep is not None:
            grid[i0 : i1 + 1, j0 : j1 + 1] += dep
    return DensityMap(grid, stride)


def points_from_boxes(boxes: np.ndarray) -> list[FacePoint]:
    """Face centres from ``(x1, y1, x2, y2)`` boxes."""
    return [
        FacePoint((b[0] + b[2]) / 2, (b[1] + b[3]) / 2, b[2] - b[0], b[3] - b[1])
        for b in np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    ]


class DensityEstimator(Module):
    """Density branch fed by the first three backbone stages.

    Taps 1 and 2 are max-pooled down to the resolution of tap 3. Every tap is
    reduced by a 1x1 conv, refined by a 3x3 conv + relu, then the three are
    concatenated and merged by a 1x1 conv into one relu'd density channel.
    """

    def __init__(self, tap_channels=(8, 16, 32), reduce_ch=8, conv_ch=8, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.reduce = [Conv2d(c, reduce_ch, 1, rng=rng) for c in tap_channels]
        self.refine = [Conv2d(reduce_ch, conv_ch, 3, padding=1, rng=rng) for _ in tap_channels]
        # small output weights keep the relu'd map near the bias instead of dying early
        self.merge = Conv2d(conv_ch * len(tap_channels), 1, 1, rng=rng, init_gain=0.1)
        self.merge.bias.data[:] = 0.01
        self._pools = [[MaxPool2(), MaxPool2()], [MaxPool2()], []]
        self._acts = [ReLU() for _ in tap_channels]
        self._out_act = ReLU()
        self._widths = [conv_ch] * len(tap_channels)
        self.features = None

    def forward(self, tap1, tap2, tap3):
        for a, b in ((tap1, tap2), (tap2, tap3)):
            if b.shape[2:] != (-(-a.shape[2] // 2), -(-a.shape[3] // 2)):
                raise ShapeError(f"tap stride mismatch: {a.shape} -> {b.shape}")
        branches = []
        for k, t in enumerate((tap1, tap2, tap3)):
            for pool in self._pools[k]:
                t = pool.forward(t)
            t = self.reduce[k].forward(t)
            branches.append(self._acts[k].forward(self.refine[k].forward(t)))
        self.features = engine.concat_channels(branches)
        return self._out_act.forward(self.merge.forward(self.features))

    def backward(self, g, feature_grad=None):
        """Returns gradients w.r.t. the three taps.

        ``feature_grad`` adds gradient flowing into the concatenated
        intermediate features (used by the add/concat fusion variants).
        """
        gf = self.merge.backward(self._out_act.backward(g))
        if feature_grad is not None:
            gf = gf + feature_grad
        out = []
        for k, gb in enumerate(engine.concat_channels_backward(self._widths, gf)):
            gt = self.reduce[k].backward(self.refine[k].backward(self._acts[k].backward(gb)))
            for pool in reversed(self._pools[k]):
                gt = pool.backward(gt)
            out.append(gt)
        return out


def density_loss(predicted: np.ndarray, target: np.ndarray, mode: str = "squared"):
    """Density regression loss and its gradient w.r.t. ``predicted``.

    ``squared`` (default): mean over the batch of ``||r_i||^2 / cells``.
    ``norm``: mean over the batch of ``||r_i||`` (plain Euclidean norm).
    """
    target = target.grid[None, None] if isinstance(target, DensityMap) else np.asarray(target)
    if predicted.shape != target.shape:
        raise ShapeError(f"density shape mismatch: predicted {predicted.shape} vs target {target.shape}")
    n = predicted.shape[0]
    r = predicted - target
    if mode == "squared":
        cells = r[0].size
        loss = float(np.sum(r * r)) / (n * cells)
        return loss, 2.0 * r / (n * cells)
    if mode == "norm":
        norms = np.sqrt(np.sum(r * r, axis=(1, 2, 3)))
        safe = np.where(norms > 0, norms, 1.0)
        grad = r / (n * safe[:, None, None, None])
        grad[norms == 0] = 0.0
        return float(norms.sum()) / n, grad
    raise ValueError(f"unknown density loss mode {mode!r}")
