"""Plain-text ``key=value`` run configuration with ``[section]`` headers.

Unknown sections or keys are rejected. ``RunConfig.to_text`` is the canonical
form echoed into model files.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from .anchors import BASE_SIZE, AnchorConfig, DetectorAnchors
from .density import GaussianSpec
from .losses import LossWeights
from .network import NetConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    milestones: tuple[int, ...] = (1600, 1900)
    batch_size: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    ohem_budget: int = 256
    max_pos_fraction: float = 0.5
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    mid_as_negative: bool = False
    gaussian: GaussianSpec = field(default_factory=GaussianSpec)
    density_loss: str = "squared"
    flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1 or self.ohem_budget < 1:
            raise ConfigError("iterations, batch_size and ohem_budget must be positive")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("invalid optimizer settings")
        if not 0 < self.max_pos_fraction <= 1:
            raise ConfigError("max_pos_fraction must lie in (0, 1]")
        if not 0 <= self.neg_iou <= self.pos_iou <= 1:
            raise ConfigError("need 0 <= neg_iou <= pos_iou <= 1")
        if self.density_loss not in ("squared", "norm"):
            raise ConfigError(f"density loss must be squared or norm, got {self.density_loss!r}")


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    annotations: str = ""
    out: str = ""

    def to_text(self) -> str:
        n, t = self.net, self.train
        g = t.gaussian
        sigma = f"fixed:{_num(g.sigma_fixed)}" if g.sigma_mode == "fixed" else f"adaptive:{_num(g.adaptive_coeff)}"
        d = n.anchors.detectors
        sections = {
            "backbone": {
                "in_channels": n.in_channels,
                "widths": _ints(n.widths),
                "convs_per_block": n.convs_per_block,
            },
            "anchors": {
                "base_size": _num(d[0].base_size),
                **{f"d{k + 1}": f"{det.stride}:{_nums(det.scales)}" for k, det in enumerate(d)},
            },
            "ffm": {"channels": n.ffm_channels, "relu": _bool(n.ffm_relu)},
            "cam": {
                "enabled": _bool(n.cam_enabled),
                "dilations": _ints(n.cam_dilations),
                "branch_width": n.cam_branch_width,
                "residual": _bool(n.cam_residual),
            },
            "dem": {
                "fusion": n.fusion,
                "reduce": n.dem_reduce,
                "conv": n.dem_conv,
                "alpha_init": _num(n.alpha_init),
            },
            "density": {
                "sigma": sigma,
                "truncation": _num(g.truncation_radius),
                "normalize": _bool(g.normalize_after_truncation),
                "loss": t.density_loss,
            },
            "loss": {
                "lambda_b": _num(t.weights.lambda_b),
                "lambda_d": _num(t.weights.lambda_d),
                "ohem_budget": t.ohem_budget,
                "max_pos_fraction": _num(t.max_pos_fraction),
                "pos_iou": _num(t.pos_iou),
                "neg_iou": _num(t.neg_iou),
                "mid_as_negative": _bool(t.mid_as_negative),
            },
            "optim": {
                "lr": _num(t.lr),
                "momentum": _num(t.momentum),
                "weight_decay": _num(t.weight_decay),
                "milestones": _ints(t.milestones),
                "iterations": t.iterations,
                "batch_size": t.batch_size,
            },
            "run": {"seed": t.seed, "flip": _bool(t.flip)},
            "paths": {"annotations": self.annotations, "out": self.out},
        }
        lines = []
        for name, kv in sections.items():
            lines.append(f"[{name}]")
            lines.extend(f"{k}={v}" for k, v in kv.items())
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> RunConfig:
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc).splitlines()[0]) from exc
        known = _KNOWN
        for sec in parser.sections():
            if sec not in known:
                raise ConfigError(f"unknown config section [{sec}]")
            for key in parser[sec]:
                if key not in known[sec]:
                    raise ConfigError(f"unknown config key {sec}.{key}")
        default = cls()
        n, t = default.net, default.train

        def get(sec, key, conv, fallback):
            if parser.has_option(sec, key):
                raw = parser.get(sec, key)
                try:
                    return conv(raw)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"bad value for {sec}.{key}: {raw!r} ({exc})") from exc
            return fallback

        base = get("anchors", "base_size", float, BASE_SIZE)
        dets = []
        for k, det in enumerate(n.anchors.detectors):
            dets.append(get("anchors", f"d{k + 1}", lambda s: _parse_det(s, base), replace(det, base_size=base)))
        sigma_text = get("density", "sigma", str, None)
        gkw = dict(
            truncation_radius=get("density", "truncation", float, t.gaussian.truncation_radius),
            normalize_after_truncation=get("density", "normalize", _parse_bool, True),
        )
        try:
            gaussian = GaussianSpec.parse(sigma_text, **gkw) if sigma_text else GaussianSpec(**gkw)
            net = NetConfig(
                in_channels=get("backbone", "in_channels", int, n.in_channels),
                widths=get("backbone", "widths", _parse_ints, n.widths),
                convs_per_block=get("backbone", "convs_per_block", int, n.convs_per_block),
                ffm_channels=get("ffm", "channels", int, n.ffm_channels),
                ffm_relu=get("ffm", "relu", _parse_bool, n.ffm_relu),
                cam_enabled=get("cam", "enabled", _parse_bool, n.cam_enabled),
                cam_dilations=get("cam", "dilations", _parse_ints, n.cam_dilations),
                cam_branch_width=get("cam", "branch_width", int, n.cam_branch_width),
                cam_residual=get("cam", "residual", _parse_bool, n.cam_residual),
                dem_reduce=get("dem", "reduce", int, n.dem_reduce),
                dem_conv=get("dem", "conv", int, n.dem_conv),
                fusion=get("dem", "fusion", str, n.fusion),
                alpha_init=get("dem", "alpha_init", float, n.alpha_init),
                anchors=AnchorConfig(tuple(dets)),
            )
            train = TrainConfig(
                iterations=get("optim", "iterations", int, t.iterations),
                lr=get("optim", "lr", float, t.lr),
                momentum=get("optim", "momentum", float, t.momentum),
                weight_decay=get("optim", "weight_decay", float, t.weight_decay),
                milestones=get("optim", "milestones", _parse_ints, t.milestones),
                batch_size=get("optim", "batch_size", int, t.batch_size),
                weights=LossWeights(
                    get("loss", "lambda_b", float, t.weights.lambda_b),
                    get("loss", "lambda_d", float, t.weights.lambda_d),
                ),
                ohem_budget=get("loss", "ohem_budget", int, t.ohem_budget),
                max_pos_fraction=get("loss", "max_pos_fraction", float, t.max_pos_fraction),
                pos_iou=get("loss", "pos_iou", float, t.pos_iou),
                neg_iou=get("loss", "neg_iou", float, t.neg_iou),
                mid_as_negative=get("loss", "mid_as_negative", _parse_bool, t.mid_as_negative),
                gaussian=gaussian,
                density_loss=get("density", "loss", str, t.density_loss),
                flip=get("run", "flip", _parse_bool, t.flip),
                seed=get("run", "seed", int, t.seed),
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(net, train, get("paths", "annotations", str, ""), get("paths", "out", str, ""))

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.from_text(text)


_KNOWN = {
    "backbone": {"in_channels", "widths", "convs_per_block"},
    "anchors": {"base_size", "d1", "d2", "d3", "d4"},
    "ffm": {"channels", "relu"},
    "cam": {"enabled", "dilations", "branch_width", "residual"},
    "dem": {"fusion", "reduce", "conv", "alpha_init"},
    "density": {"sigma", "truncation", "normalize", "loss"},
    "loss": {"lambda_b", "lambda_d", "ohem_budget", "max_pos_fraction", "pos_iou", "neg_iou", "mid_as_negative"},
    "optim": {"lr", "momentum", "weight_decay", "milestones", "iterations", "batch_size"},
    "run": {"seed", "flip"},
    "paths": {"annotations", "out"},
}


def _num(x: float) -> str:
    return repr(float(x)) if x != int(x) else str(int(x))


def _nums(xs) -> str:
    return ",".join(_num(x) for x in xs)


def _ints(xs) -> str:
    return ",".join(str(int(x)) for x in xs)


def _bool(b: bool) -> str:
    return "true" if b else "false"


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    s = s.strip()
    return tuple(int(v) for v in s.split(",")) if s else ()


def _parse_det(s: str, base: float) -> DetectorAnchors:
    stride, _, scales = s.partition(":")
    vals = tuple(float(v) for v in scales.split(",") if v.strip())
    if not vals:
        raise ValueError("empty anchor scale list")
    return DetectorAnchors(int(stride), vals, base)
