"""Dense float64 tensor ops with hand-written backward passes.

Activations are plain ``numpy`` arrays in (N, C, H, W) layout. Learnable
values live in :class:`Tensor`, which pairs the data with a gradient buffer.

Convolution is cross-correlation (the kernel is not flipped).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    """A parameter array with paired gradient storage."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        if any(d < 1 for d in self.data.shape):
            raise ShapeError(f"all dimensions must be >= 1, got {self.data.shape}")
        if grad is not None:
            grad = np.asarray(grad, dtype=DTYPE)
            if grad.shape != self.data.shape:
                raise ShapeError(f"grad shape {grad.shape} != data shape {self.data.shape}")
        self.grad = grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def check4d(x: np.ndarray, what: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (N, C, H, W), got shape {x.shape}")


@dataclass
class ConvSpec:
    """Hyper-parameters and parameters of one 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    weight: Tensor | None = None
    bias: Tensor | None = None

    def __post_init__(self):
        if isinstance(self.kernel, int):
            self.kernel = (self.kernel, self.kernel)
        self.kernel = tuple(int(k) for k in self.kernel)
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError(
                f"invalid stride/dilation/padding ({self.stride}, {self.dilation}, {self.padding})"
            )
        wshape = (self.out_channels, self.in_channels) + self.kernel
        if self.weight is None:
            self.weight = Tensor(np.zeros(wshape))
        elif not isinstance(self.weight, Tensor):
            self.weight = Tensor(self.weight)
        if self.weight.shape != wshape:
            raise ShapeError(f"weight shape {self.weight.shape} != expected {wshape}")
        if self.bias is None:
            self.bias = Tensor(np.zeros(self.out_channels))
        elif not isinstance(self.bias, Tensor):
            self.bias = Tensor(self.bias)
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.out_channels},)")

    def extent(self) -> tuple[int, int]:
        d = self.dilation
        return d * (self.kernel[0] - 1) + 1, d * (self.kernel[1] - 1) + 1

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        eh, ew = self.extent()
        p, s = self.padding, self.stride
        if eh > h + 2 * p or ew > w + 2 * p:
            raise ShapeError(
                f"kernel extent {(eh, ew)} exceeds padded input {(h + 2 * p, w + 2 * p)}"
            )
        return (h + 2 * p - eh) // s + 1, (w + 2 * p - ew) // s + 1


def _check_conv_input(x: np.ndarray, spec: ConvSpec) -> None:
    check4d(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"input shape {x.shape} has {x.shape[1]} channels but weight shape "
            f"{spec.weight.shape} expects {spec.in_channels}"
        )


def _windows(xp: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """Strided view (N, C, ho, wo, kh, kw) of the padded input."""
    eh, ew = spec.extent()
    d, s = spec.dilation, spec.stride
    v = sliding_window_view(xp, (eh, ew), axis=(2, 3))
    return v[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s, ::d, ::d]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def im2col(x: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, int, int]:
    """Rows are (n, i, j) output positions, columns are (c, ki, kj) taps."""
    n = x.shape[0]
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    win = _windows(_pad(x, spec.padding), spec, ho, wo)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
    return cols, ho, wo


def conv2d(x: np.ndarray, spec: ConvSpec, cols: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlation plus bias.

    Output size per axis is ``(H + 2p - dilation*(k-1) - 1) // stride + 1``.
    """
    _check_conv_input(x, spec)
    n = x.shape[0]
    o = spec.out_channels
    kh, kw = spec.kernel
    if kh == 1 and kw == 1 and spec.stride == 1 and spec.padding == 0:
        w = spec.weight.data.reshape(o, -1)
        out = np.einsum("oc,nchw->nohw", w, x, optimize=True)
        return out + spec.bias.data[None, :, None, None]
    if cols is None:
        cols, ho, wo = im2col(x, spec)
    else:
        ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    out = cols @ spec.weight.data.reshape(o, -1).T + spec.bias.data
    return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))


def conv2d_backward(
    x: np.ndarray,
    spec: ConvSpec,
    upstream: np.ndarray,
    cols: np.ndarray | None = None,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Returns ``(input_grad, weight_grad, bias_grad)``."""
    _check_conv_input(x, spec)
    n, c, h, w = x.shape
    o = spec.out_channels
    ho, wo = spec.output_hw(h, w)
    if upstream.shape != (n, o, ho, wo):
        raise ShapeError(
            f"upstream grad shape {upstream.shape} != conv output shape {(n, o, ho, wo)}"
        )
    kh, kw = spec.kernel
    bias_grad = upstream.sum(axis=(0, 2, 3))
    wmat = spec.weight.data.reshape(o, -1)
    if kh == 1 and kw == 1 and spec.stride == 1 and spec.padding == 0:
        weight_grad = np.einsum("nohw,nchw->oc", upstream, x, optimize=True)
        dx = np.einsum("oc,nohw->nchw", wmat, upstream, optimize=True) if need_input_grad else None
        return dx, weight_grad.reshape(spec.weight.shape), bias_grad

    g = upstream.transpose(0, 2, 3, 1).reshape(-1, o)
    if cols is None:
        cols, _, _ = im2col(x, spec)
    weight_grad = (g.T @ cols).reshape(spec.weight.shape)
    if not need_input_grad:
        return None, weight_grad, bias_grad

    dcols = (g @ wmat).reshape(n, ho, wo, c, kh, kw)
    p, s, d = spec.padding, spec.stride, spec.dilation
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * d, j * d
            dxp[:, :, r0 : r0 + s * (ho - 1) + 1 : s, c0 : c0 + s * (wo - 1) + 1 : s] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
    return np.ascontiguousarray(dx), weight_grad, bias_grad


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 / stride-2 max pooling.

    Odd sizes are padded with -inf on the bottom/right. Returns the pooled map
    and the flat in-window argmax (0..3, first row-major maximum wins).
    """
    check4d(x)
    n, c, h, w = x.shape
    hp, wp = h + h % 2, w + w % 2
    if (hp, wp) != (h, w):
        xp = np.full((n, c, hp, wp), -np.inf)
        xp[:, :, :h, :w] = x
    else:
        xp = x
    win = xp.reshape(n, c, hp // 2, 2, wp // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, hp // 2, wp // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2_backward(input_shape: tuple[int, ...], arg: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    n, c, h, w = input_shape
    if upstream.shape != arg.shape:
        raise ShapeError(f"upstream grad shape {upstream.shape} != pooled shape {arg.shape}")
    ho, wo = arg.shape[2:]
    g = np.zeros((n, c, ho, wo, 4), dtype=DTYPE)
    np.put_along_axis(g, arg[..., None], upstream[..., None], axis=-1)
    g = g.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    return np.ascontiguousarray(g[:, :, :h, :w])


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation matrix of shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_upsample(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize to a size no smaller than the input."""
    check4d(x)
    h, w = x.shape[2:]
    if out_h < h or out_w < w:
        raise ShapeError(f"cannot upsample {(h, w)} to smaller size {(out_h, out_w)}")
    ah, aw = interp_matrix(h, out_h), interp_matrix(w, out_w)
    return np.einsum("ih,nchw,jw->ncij", ah, x, aw, optimize=True)


def bilinear_upsample_backward(input_shape: tuple[int, ...], upstream: np.ndarray) -> np.ndarray:
    h, w = input_shape[2:]
    out_h, out_w = upstream.shape[2:]
    ah, aw = interp_matrix(h, out_h), interp_matrix(w, out_w)
    return np.einsum("ih,ncij,jw->nchw", ah, upstream, aw, optimize=True)


def concat_channels(inputs: Sequence[np.ndarray]) -> np.ndarray:
    if not inputs:
        raise ShapeError("concat of an empty list")
    ref = inputs[0].shape
    for t in inputs:
        check4d(t)
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat shape mismatch: {ref} vs {t.shape}")
    return np.concatenate(inputs, axis=1)


def concat_channels_backward(channel_counts: Sequence[int], upstream: np.ndarray) -> list[np.ndarray]:
    splits = np.cumsum(channel_counts)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(upstream, splits, axis=1)]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(output: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # gradient at exactly 0 is taken as 0
    return upstream * (output > 0)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def scale_add(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    """``a + alpha * b``; backward is ``(g, alpha * g, sum(g * b))``."""
    if a.shape != b.shape:
        raise ShapeError(f"scale_add shape mismatch: {a.shape} vs {b.shape}")
    return a + alpha * b


def scale_add_backward(b: np.ndarray, alpha: float, upstream: np.ndarray):
    return upstream, alpha * upstream, float(np.sum(upstream * b))


def grad_check(
    loss_fn: Callable[[bool], float],
    params: Iterable[Tensor],
    eps: float | Sequence[float] = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients with central finite differences.

    ``loss_fn(True)`` must return the scalar loss and accumulate gradients
    into every parameter's ``grad`` (they are zeroed beforehand);
    ``loss_fn(False)`` only evaluates the loss. With ``max_entries`` set,
    that many entries per parameter are sampled instead of all of them.

    ``eps`` may be a sequence of step sizes; each entry then scores the
    best agreement among them. Tiny gradients drown in rounding noise at
    small steps while large steps can straddle a relu or pooling kink, but
    a wrong analytic gradient disagrees at every step.

    Returns the max of ``|a - n| / max(|a|, |n|, 1e-12)`` over checked entries.
    """
    steps = [eps] if np.isscalar(eps) else list(eps)
    if not steps or not all(1e-7 <= e <= 1e-3 for e in steps):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.zero_grad()
    base = loss_fn(True)
    if not math.isfinite(base):
        raise FloatingPointError(f"non-finite loss {base}")
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for k in idx:
            orig = flat[k]
            best = math.inf
            for e in steps:
                flat[k] = orig + e
                lp = loss_fn(False)
                flat[k] = orig - e
                lm = loss_fn(False)
                flat[k] = orig
                if not (math.isfinite(lp) and math.isfinite(lm)):
                    raise FloatingPointError("non-finite loss during finite differences")
                num = (lp - lm) / (2 * e)
                best = min(best, abs(aflat[k] - num) / max(abs(aflat[k]), abs(num), 1e-12))
                if best < 1e-7:
                    break
            worst = max(worst, best)
    return worst


def he_init(spec: ConvSpec, rng: np.random.Generator, gain: float = 1.0) -> ConvSpec:
    """Fan-in normal init, std ``gain * sqrt(2 / fan_in)``, zero bias."""
    fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1]
    spec.weight.data[...] = gain * rng.normal(0.0, math.sqrt(2.0 / fan_in), size=spec.weight.shape)
    spec.bias.data[...] = 0.0
    return spec
