"""Detection graph: mini backbone, fusion/context/enrichment modules and heads.

Wiring (strides relative to the input image)::

    conv1 (1) -> conv2 (2) -> conv3 (4) -> conv4 (8) -> conv5 (16) -> pool5 (32)
    DEM(conv1, conv2, conv3) -> density (4)
    D1 <- FEM(conv3, density)       stride 4
    D2 <- FFM(conv4, conv5)         stride 8
    D3 <- FFM(conv5, pool5)         stride 16
    D4 <- pool5                     stride 32
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .anchors import AnchorConfig
from .density import DensityEstimator
from .engine import ShapeError, Tensor
from .layers import Conv2d, ConvReLU, MaxPool2, Module, ReLU

TAPS = ("conv1", "conv2", "conv3", "conv4", "conv5", "pool5")
DETECTOR_STRIDES = (4, 8, 16, 32)
# prediction layers start small so early losses and their gradients stay moderate
HEAD_INIT_GAIN = 0.1
FUSIONS = ("fem", "add", "concat", "none")


@dataclass
class NetConfig:
    in_channels: int = 1
    widths: tuple[int, ...] = (8, 16, 32, 64, 64)
    convs_per_block: int = 2
    ffm_channels: int = 128
    ffm_relu: bool = True
    cam_enabled: bool = True
    cam_dilations: tuple[int, ...] = (1, 2, 4)
    cam_branch_width: int = 32
    cam_residual: bool = False
    dem_reduce: int = 8
    dem_conv: int = 8
    fusion: str = "fem"
    alpha_init: float = 0.1
    anchors: AnchorConfig = field(default_factory=AnchorConfig)

    def __post_init__(self):
        if len(self.widths) != 5 or min(self.widths) < 1:
            raise ValueError(f"need five positive block widths, got {self.widths}")
        if self.convs_per_block < 1 or self.in_channels < 1:
            raise ValueError("convs_per_block and in_channels must be positive")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        dil = list(self.cam_dilations)
        if not dil or min(dil) < 1 or len(set(dil)) != len(dil):
            raise ValueError(f"CAM dilations must be distinct and >= 1, got {dil}")
        if len(self.anchors.detectors) != 4:
            raise ValueError("exactly four detectors are required")
        for d, s in zip(self.anchors.detectors, DETECTOR_STRIDES):
            if d.stride != s:
                raise ValueError(f"detector strides must be {DETECTOR_STRIDES}")

    @property
    def num_scales(self) -> tuple[int, ...]:
        return tuple(len(d.scales) for d in self.anchors.detectors)


@dataclass
class DetectorOutput:
    """Per-detector head maps; channels are scale-major.

    ``cls_logits`` is ``(N, 2*S, H, W)`` with ``[bg_0, face_0, bg_1, face_1, ...]``,
    ``box_deltas`` is ``(N, 4*S, H, W)`` with ``[tx_0, ty_0, tw_0, th_0, tx_1, ...]``.
    """

    cls_logits: np.ndarray
    box_deltas: np.ndarray

    def flat_logits(self) -> np.ndarray:
        """``(N, H*W*S, 2)`` matching anchor order ``(row, col, scale)``."""
        n, c, h, w = self.cls_logits.shape
        return self.cls_logits.reshape(n, c // 2, 2, h, w).transpose(0, 3, 4, 1, 2).reshape(n, -1, 2)

    def flat_deltas(self) -> np.ndarray:
        n, c, h, w = self.box_deltas.shape
        return self.box_deltas.reshape(n, c // 4, 4, h, w).transpose(0, 3, 4, 1, 2).reshape(n, -1, 4)


def unflatten(flat: np.ndarray, h: int, w: int, k: int) -> np.ndarray:
    """Inverse of :meth:`DetectorOutput.flat_logits` / ``flat_deltas`` for gradients."""
    n = flat.shape[0]
    s = flat.shape[1] // (h * w)
    return np.ascontiguousarray(flat.reshape(n, h, w, s, k).transpose(0, 3, 4, 1, 2).reshape(n, s * k, h, w))


class Backbone(Module):
    def __init__(self, cfg: NetConfig, rng):
        self.blocks = []
        c = cfg.in_channels
        for width in cfg.widths:
            block = []
            for _ in range(cfg.convs_per_block):
                block.append(ConvReLU(c, width, 3, padding=1, rng=rng))
                c = width
            self.blocks.append(_Seq(block))
        self._pools = [MaxPool2() for _ in cfg.widths]

    def forward(self, x: np.ndarray) -> dict[str, np.ndarray]:
        engine.check4d(x, "image")
        taps = {}
        for k, (block, pool) in enumerate(zip(self.blocks, self._pools)):
            x = block.forward(x)
            taps[TAPS[k]] = x
            x = pool.forward(x)
        taps["pool5"] = x
        return taps

    def backward(self, grads: dict[str, np.ndarray], need_input_grad=False):
        g = grads.get("pool5")
        for k in range(len(self.blocks) - 1, -1, -1):
            g = self._pools[k].backward(g) if g is not None else None
            tg = grads.get(TAPS[k])
            if tg is not None:
                g = tg if g is None else g + tg
            if g is None:
                continue
            g = self.blocks[k].backward(g, need_input_grad or k > 0)
        return g


class _Seq(Module):
    def __init__(self, layers):
        self.layers = layers

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g, need_input_grad=True):
        for k in range(len(self.layers) - 1, -1, -1):
            g = self.layers[k].backward(g, need_input_grad or k > 0)
        return g


class FFM(Module):
    """1x1-reduce two adjacent stages, upsample the coarser one, add, relu."""

    def __init__(self, lo_ch, hi_ch, out_ch=128, use_relu=True, rng=None):
        self.lo = Conv2d(lo_ch, out_ch, 1, rng=rng)
        self.hi = Conv2d(hi_ch, out_ch, 1, rng=rng)
        self._relu = ReLU() if use_relu else None
        self._hi_shape = None

    def forward(self, f_lo, f_hi):
        h, w = f_lo.shape[2:]
        if f_hi.shape[2:] != (-(-h // 2), -(-w // 2)) or f_hi.shape[0] != f_lo.shape[0]:
            raise ShapeError(f"FFM needs the coarse map at half resolution: {f_lo.shape} vs {f_hi.shape}")
        r_hi = self.hi.forward(f_hi)
        self._hi_shape = r_hi.shape
        out = self.lo.forward(f_lo) + engine.bilinear_upsample(r_hi, h, w)
        return self._relu.forward(out) if self._relu else out

    def backward(self, g):
        if self._relu:
            g = self._relu.backward(g)
        g_lo = self.lo.backward(g)
        g_hi = self.hi.backward(engine.bilinear_upsample_backward(self._hi_shape, g))
        return g_lo, g_hi


class FEM(Module):
    """``f + alpha * density`` with the density broadcast over all channels."""

    def __init__(self, alpha=0.1):
        self.alpha = Tensor(np.array([alpha]))
        self._density = None

    def forward(self, f, density):
        if density.shape != (f.shape[0], 1) + f.shape[2:]:
            raise ShapeError(f"density {density.shape} does not match features {f.shape}")
        self._density = density
        return f + self.alpha.data[0] * density

    def backward(self, g):
        """Returns ``(feature_grad, density_grad)``; alpha's gradient is accumulated."""
        self.alpha.accumulate(np.array([np.sum(g * self._density)]))
        return g, self.alpha.data[0] * g.sum(axis=1, keepdims=True)


class CAM(Module):
    """Parallel dilated 3x3 branches (padding = dilation), relu, concat, 1x1 merge."""

    def __init__(self, in_ch, dilations=(1, 2, 4), branch_width=32, residual=False, rng=None):
        self.branches = [ConvReLU(in_ch, branch_width, 3, padding=d, dilation=d, rng=rng) for d in dilations]
        self.merge = Conv2d(branch_width * len(dilations), in_ch, 1, rng=rng)
        self._residual = residual
        self._widths = [branch_width] * len(dilations)

    def forward(self, f):
        cat = engine.concat_channels([b.forward(f) for b in self.branches])
        out = self.merge.forward(cat)
        return out + f if self._residual else out

    def backward(self, g):
        gcat = self.merge.backward(g)
        gf = g.copy() if self._residual else 0.0
        for b, gb in zip(self.branches, engine.concat_channels_backward(self._widths, gcat)):
            gf = gf + b.backward(gb)
        return gf


class Detector(Module):
    """Optional CAM followed by sibling 1x1 classification and regression convs."""

    def __init__(self, in_ch, num_scales, cfg: NetConfig, rng=None, prior=0.01):
        self.cam = (
            CAM(in_ch, cfg.cam_dilations, cfg.cam_branch_width, cfg.cam_residual, rng)
            if cfg.cam_enabled
            else None
        )
        self.cls = Conv2d(in_ch, 2 * num_scales, 1, rng=rng, init_gain=HEAD_INIT_GAIN)
        self.box = Conv2d(in_ch, 4 * num_scales, 1, rng=rng, init_gain=HEAD_INIT_GAIN)
        self.cls.bias.data[1::2] = -math.log((1 - prior) / prior)
        self.num_scales = num_scales

    def forward(self, f) -> DetectorOutput:
        if self.cam is not None:
            f = self.cam.forward(f)
        return DetectorOutput(self.cls.forward(f), self.box.forward(f))

    def backward(self, g_cls, g_box):
        g = self.cls.backward(g_cls) + self.box.backward(g_box)
        return self.cam.backward(g) if self.cam is not None else g


class DAFENet(Module):
    def __init__(self, cfg: NetConfig | None = None, seed: int = 0):
        cfg = cfg or NetConfig()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        w = cfg.widths
        self.backbone = Backbone(cfg, rng)
        self.dem = (
            DensityEstimator(w[:3], cfg.dem_reduce, cfg.dem_conv, rng=rng) if cfg.fusion != "none" else None
        )
        dem_feat = 3 * cfg.dem_conv
        if cfg.fusion == "fem":
            self.fem = FEM(cfg.alpha_init)
        elif cfg.fusion == "add":
            self.fuse_proj = Conv2d(dem_feat, w[2], 1, rng=rng)
        elif cfg.fusion == "concat":
            self.fuse_proj = Conv2d(w[2] + dem_feat, w[2], 1, rng=rng)
        self.ffm1 = FFM(w[3], w[4], cfg.ffm_channels, cfg.ffm_relu, rng)
        self.ffm2 = FFM(w[4], w[4], cfg.ffm_channels, cfg.ffm_relu, rng)
        ns = cfg.num_scales
        self.detectors = [
            Detector(w[2], ns[0], cfg, rng),
            Detector(cfg.ffm_channels, ns[1], cfg, rng),
            Detector(cfg.ffm_channels, ns[2], cfg, rng),
            Detector(w[4], ns[3], cfg, rng),
        ]
        self._taps = None

    def forward(self, image: np.ndarray):
        """Returns ``(detector_outputs, density)``; density is ``None`` without a DEM."""
        n, c, h, wd = image.shape
        if c != self.cfg.in_channels or h < 1 or wd < 1:
            raise ShapeError(f"image shape {image.shape} incompatible with in_channels={self.cfg.in_channels}")
        taps = self.backbone.forward(image)
        self._taps = taps
        density = None
        f1 = taps["conv3"]
        if self.dem is not None:
            density = self.dem.forward(taps["conv1"], taps["conv2"], taps["conv3"])
            if self.cfg.fusion == "fem":
                f1 = self.fem.forward(f1, density)
            elif self.cfg.fusion == "add":
                f1 = f1 + self.fuse_proj.forward(self.dem.features)
            else:
                f1 = self.fuse_proj.forward(engine.concat_channels([f1, self.dem.features]))
        inputs = [
            f1,
            self.ffm1.forward(taps["conv4"], taps["conv5"]),
            self.ffm2.forward(taps["conv5"], taps["pool5"]),
            taps["pool5"],
        ]
        outs = [d.forward(f) for d, f in zip(self.detectors, inputs)]
        return outs, density

    def backward(self, head_grads, density_grad=None, need_input_grad=False):
        """Backpropagate ``[(g_cls, g_box)] * 4`` plus an optional density gradient."""
        gin = [d.backward(gc, gb) for d, (gc, gb) in zip(self.detectors, head_grads)]
        tg = {k: None for k in TAPS}
        g_lo, g_hi = self.ffm1.backward(gin[1])
        tg["conv4"] = g_lo
        tg["conv5"] = g_hi
        g_lo, g_hi = self.ffm2.backward(gin[2])
        tg["conv5"] = tg["conv5"] + g_lo
        tg["pool5"] = g_hi + gin[3]
        g3 = gin[0]
        if self.dem is not None:
            g_den = density_grad
            feat_grad = None
            if self.cfg.fusion == "fem":
                g3, gd = self.fem.backward(g3)
                g_den = gd if g_den is None else g_den + gd
            elif self.cfg.fusion == "add":
                feat_grad = self.fuse_proj.backward(g3)
            else:
                gcat = self.fuse_proj.backward(g3)
                g3, feat_grad = engine.concat_channels_backward([self.cfg.widths[2], 3 * self.cfg.dem_conv], gcat)
            if g_den is None:
                g_den = np.zeros((g3.shape[0], 1) + g3.shape[2:])
            t1, t2, t3 = self.dem.backward(g_den, feat_grad)
            tg["conv1"], tg["conv2"] = t1, t2
            g3 = g3 + t3
        tg["conv3"] = g3
        return self.backbone.backward(tg, need_input_grad)


def pad_to_multiple(image: np.ndarray, multiple: int = 32) -> np.ndarray:
    """Reflect-pad the bottom/right of an (N, C, H, W) image to a multiple of ``multiple``."""
    h, w = image.shape[2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return image
    mode = "reflect" if h > 1 and w > 1 else "edge"
    return np.pad(image, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode)
