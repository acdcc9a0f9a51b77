"""Finite-difference checks for every differentiable op and the full pipeline.

Each check builds a random instance from a seed, reduces the op's output to
a scalar with a fixed random projection (or uses the real loss), and returns
the worst relative error reported by :func:`dafefd.engine.grad_check`.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import engine, losses
from .anchors import POSITIVE, NEGATIVE, IGNORE
from .density import DensityEstimator, density_loss
from .engine import ConvSpec, Tensor, grad_check
from .network import CAM, FEM, FFM, DAFENet, Detector, NetConfig, unflatten

# finite-difference step ladder, see engine.grad_check
EPS = (1e-6, 1e-5, 1e-7, 1e-4)


def _projected(forward: Callable[[], np.ndarray], backward: Callable[[np.ndarray], None], rng):
    """Loss ``sum(R * forward())`` with R drawn once on first use."""
    proj = {}

    def fn(with_grad: bool) -> float:
        out = forward()
        if "r" not in proj:
            proj["r"] = rng.normal(size=out.shape)
        if with_grad:
            backward(proj["r"])
        return float(np.sum(proj["r"] * out))

    return fn


def check_conv2d(rng) -> float:
    k = int(rng.integers(1, 4))
    d = int(rng.integers(1, 3))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, 3))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    hw = d * (k - 1) + 1 + int(rng.integers(0, 4))
    spec = ConvSpec(cin, cout, k, s, p, d, rng.normal(size=(cout, cin, k, k)), rng.normal(size=cout))
    x = Tensor(rng.normal(size=(int(rng.integers(1, 3)), cin, hw, hw + 1)))

    def bwd(g):
        dx, dw, db = engine.conv2d_backward(x.data, spec, g)
        x.accumulate(dx)
        spec.weight.accumulate(dw)
        spec.bias.accumulate(db)

    fn = _projected(lambda: engine.conv2d(x.data, spec), bwd, rng)
    return grad_check(fn, [x, spec.weight, spec.bias], EPS)


def check_maxpool2(rng) -> float:
    x = Tensor(rng.normal(size=(1, 2, int(rng.integers(2, 7)), int(rng.integers(2, 7)))))
    state = {}

    def fwd():
        out, state["arg"] = engine.maxpool2(x.data)
        return out

    fn = _projected(fwd, lambda g: x.accumulate(engine.maxpool2_backward(x.shape, state["arg"], g)), rng)
    return grad_check(fn, [x], EPS)


def check_upsample(rng) -> float:
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    oh, ow = h + int(rng.integers(0, 5)), w + int(rng.integers(0, 5))
    x = Tensor(rng.normal(size=(1, 2, h, w)))
    fn = _projected(
        lambda: engine.bilinear_upsample(x.data, oh, ow),
        lambda g: x.accumulate(engine.bilinear_upsample_backward(x.shape, g)),
        rng,
    )
    return grad_check(fn, [x], EPS)


def check_elementwise(rng) -> float:
    """concat, relu (inputs kept away from the kink), add and scale_add."""
    shape = (1, 2, 3, 4)
    a = Tensor(rng.normal(size=shape))
    b = Tensor(rng.normal(size=shape))
    r = rng.normal(size=shape)
    r = np.where(np.abs(r) < 0.1, 0.1 * np.sign(r) + r, r)
    c = Tensor(r)
    alpha = Tensor(rng.normal(size=1))
    state = {}

    def fwd():
        s = engine.scale_add(engine.add(a.data, b.data), c.data, alpha.data[0])
        rl = engine.relu(c.data)
        state["relu"] = rl
        return engine.concat_channels([s, rl])

    def bwd(g):
        gs, gr = engine.concat_channels_backward([2, 2], g)
        ga, gc, galpha = engine.scale_add_backward(c.data, alpha.data[0], gs)
        a.accumulate(ga)
        b.accumulate(ga)
        c.accumulate(gc + engine.relu_backward(state["relu"], gr))
        alpha.accumulate(np.array([galpha]))

    return grad_check(_projected(fwd, bwd, rng), [a, b, c, alpha], EPS)


def _offset_biases(module, rng) -> None:
    # zero biases put dead units exactly on the relu kink; move them off it
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data[...] = rng.uniform(0.05, 0.3, size=p.shape) * rng.choice([-1.0, 1.0], size=p.shape)


def _module_check(module, forward, backward, inputs, rng, max_entries=None) -> float:
    _offset_biases(module, rng)
    fn = _projected(forward, backward, rng)
    return grad_check(fn, module.parameters() + inputs, EPS, max_entries=max_entries, seed=int(rng.integers(1 << 30)))


def check_dem(rng) -> float:
    dem = DensityEstimator((2, 3, 4), 2, 2, rng=rng)
    t1 = Tensor(rng.normal(size=(1, 2, 8, 8)))
    t2 = Tensor(rng.normal(size=(1, 3, 4, 4)))
    t3 = Tensor(rng.normal(size=(1, 4, 2, 2)))
    _offset_biases(dem, rng)
    dem.merge.bias.data[:] = 1.0  # keep the output relu active

    def bwd(g):
        for t, gt in zip((t1, t2, t3), dem.backward(g)):
            t.accumulate(gt)

    fn = _projected(lambda: dem.forward(t1.data, t2.data, t3.data), bwd, rng)
    return grad_check(fn, dem.parameters() + [t1, t2, t3], EPS)


def check_ffm(rng) -> float:
    ffm = FFM(3, 4, 5, True, rng)
    lo = Tensor(rng.normal(size=(1, 3, 5, 4)))
    hi = Tensor(rng.normal(size=(1, 4, 3, 2)))

    def bwd(g):
        gl, gh = ffm.backward(g)
        lo.accumulate(gl)
        hi.accumulate(gh)

    return _module_check(ffm, lambda: ffm.forward(lo.data, hi.data), bwd, [lo, hi], rng)


def check_fem(rng) -> float:
    fem = FEM(float(rng.normal()))
    f = Tensor(rng.normal(size=(1, 3, 4, 4)))
    d = Tensor(np.abs(rng.normal(size=(1, 1, 4, 4))))

    def bwd(g):
        gf, gd = fem.backward(g)
        f.accumulate(gf)
        d.accumulate(gd)

    return _module_check(fem, lambda: fem.forward(f.data, d.data), bwd, [f, d], rng)


def check_cam(rng) -> float:
    cam = CAM(3, (1, 2), 2, residual=bool(rng.integers(2)), rng=rng)
    f = Tensor(rng.normal(size=(1, 3, 5, 5)))
    return _module_check(cam, lambda: cam.forward(f.data), lambda g: f.accumulate(cam.backward(g)), [f], rng)


def check_detector(rng) -> float:
    cfg = NetConfig(cam_dilations=(1, 2), cam_branch_width=2)
    det = Detector(3, 2, cfg, rng)
    f = Tensor(rng.normal(size=(1, 3, 4, 4)))
    state = {}

    def fwd():
        o = det.forward(f.data)
        state["o"] = o
        return np.concatenate([o.cls_logits.ravel(), o.box_deltas.ravel()])

    def bwd(g):
        o = state["o"]
        nc = o.cls_logits.size
        f.accumulate(det.backward(g[:nc].reshape(o.cls_logits.shape), g[nc:].reshape(o.box_deltas.shape)))

    return _module_check(det, fwd, bwd, [f], rng)


def check_density_loss(rng) -> float:
    pred = Tensor(rng.normal(size=(2, 1, 3, 4)))
    target = rng.normal(size=(2, 1, 3, 4))

    def fn(with_grad):
        loss, g = density_loss(pred.data, target)
        if with_grad:
            pred.accumulate(g)
        return loss

    return grad_check(fn, [pred], EPS)


def _random_labels(rng, n):
    lab = rng.choice([POSITIVE, NEGATIVE, IGNORE], size=n, p=[0.3, 0.5, 0.2]).astype(np.int8)
    lab[0] = POSITIVE
    return lab


def check_cls_loss(rng) -> float:
    sizes = [int(rng.integers(3, 12)) for _ in range(4)]
    logits = [Tensor(rng.normal(size=(n, 2))) for n in sizes]
    labels = [_random_labels(rng, n) for n in sizes]
    sels = [losses.ohem_select(losses.softmax_face(z.data), lab, 5) for z, lab in zip(logits, labels)]

    def fn(with_grad):
        loss, grads = losses.cls_loss([z.data for z in logits], labels, sels)
        if with_grad:
            for z, g in zip(logits, grads):
                z.accumulate(g)
        return loss

    return grad_check(fn, logits, EPS)


def check_box_loss(rng) -> float:
    sizes = [int(rng.integers(3, 12)) for _ in range(4)]
    labels = [_random_labels(rng, n) for n in sizes]
    targets = [rng.normal(size=(n, 4)) for n in sizes]
    offs = []
    for n in sizes:
        # residuals kept at least 0.05 away from the |x| = 1 kink
        r = rng.uniform(-2.5, 2.5, size=(n, 4))
        r = np.where(np.abs(np.abs(r) - 1) < 0.05, r * 1.2, r)
        offs.append(r)
    deltas = [Tensor(t + r) for t, r in zip(targets, offs)]
    sels = [losses.ohem_select(rng.uniform(size=n), lab, 6) for n, lab in zip(sizes, labels)]

    def fn(with_grad):
        loss, grads, _ = losses.box_loss([d.data for d in deltas], targets, sels)
        if with_grad:
            for d, g in zip(deltas, grads):
                d.accumulate(g)
        return loss

    return grad_check(fn, deltas, EPS)


def tiny_net_config(**kw) -> NetConfig:
    base = dict(
        widths=(2, 3, 3, 4, 4),
        convs_per_block=1,
        ffm_channels=3,
        cam_dilations=(1, 2),
        cam_branch_width=2,
        dem_reduce=2,
        dem_conv=2,
    )
    base.update(kw)
    return NetConfig(**base)


def check_pipeline(rng, max_entries: int = 4, fusion: str = "fem", image_size: int = 32) -> float:
    """Full graph with the real cls + box + density losses on a random image."""
    from .train import Sample, build_targets
    from .config import TrainConfig

    net = DAFENet(tiny_net_config(fusion=fusion), seed=int(rng.integers(1 << 30)))
    _offset_biases(net, rng)
    if net.dem is not None:
        net.dem.merge.bias.data[:] = 0.5
    img = rng.normal(size=(1, 1, image_size, image_size))
    boxes = np.array([[4.0, 5.0, 14.0, 15.0], [16.0, 10.0, 30.0, 26.0]])
    cfg = TrainConfig(ohem_budget=16)
    targets = build_targets(Sample(img, boxes, image_size, image_size), net.cfg, cfg, net.dem is not None)
    sels = {}

    def fn(with_grad):
        outs, density = net.forward(img)
        logits = [o.flat_logits()[0] for o in outs]
        deltas = [o.flat_deltas()[0] for o in outs]
        if "s" not in sels:
            # the OHEM choice is frozen so the loss is a fixed smooth function
            sels["s"] = [
                losses.ohem_select(losses.softmax_face(z), lab, cfg.ohem_budget) for z, lab in zip(logits, targets.labels)
            ]
        lc, gc = losses.cls_loss(logits, targets.labels, sels["s"])
        lb, gb, _ = losses.box_loss(deltas, targets.reg, sels["s"])
        ld, gd = (0.0, None) if density is None else density_loss(density, targets.density)
        if with_grad:
            head = []
            for o, c, b in zip(outs, gc, gb):
                fh, fw = o.cls_logits.shape[2:]
                head.append((unflatten(c[None], fh, fw, 2), unflatten(b[None], fh, fw, 4)))
            net.backward(head, gd)
        return lc + lb + ld

    return grad_check(fn, net.parameters(), EPS, max_entries=max_entries, seed=int(rng.integers(1 << 30)))


CHECKS: dict[str, Callable] = {
    "conv2d": check_conv2d,
    "maxpool2": check_maxpool2,
    "bilinear_upsample": check_upsample,
    "elementwise": check_elementwise,
    "density_estimator": check_dem,
    "ffm": check_ffm,
    "fem": check_fem,
    "cam": check_cam,
    "detector": check_detector,
    "density_loss": check_density_loss,
    "cls_loss": check_cls_loss,
    "box_loss": check_box_loss,
    "pipeline": check_pipeline,
}


def run_suite(seed: int) -> dict[str, float]:
    """Worst relative error per check for one seed."""
    out = {}
    for k, (name, check) in enumerate(CHECKS.items()):
        out[name] = check(np.random.default_rng([seed, k]))
    return out
