import csv
from dataclasses import replace

import numpy as np
import pytest

from dafefd.anchors import POSITIVE
from dafefd.config import RunConfig, TrainConfig
from dafefd.gradcheck import tiny_net_config
from dafefd.imageio import to_network_input
from dafefd.losses import LossWeights
from dafefd.network import DAFENet, pad_to_multiple
from dafefd.train import TRACE_COLUMNS, Dataset, Sample, build_targets, flip_sample, train, train_step


def toy_sample(rng, size=32, boxes=((4, 6, 20, 22),)):
    img = rng.integers(0, 256, (size, size)).astype(np.uint8)
    return Sample(pad_to_multiple(to_network_input(img)), np.array(boxes, float), size, size)


def tiny_run(**train_kw):
    kw = dict(iterations=6, milestones=(4,))
    kw.update(train_kw)
    return RunConfig(net=tiny_net_config(), train=TrainConfig(**kw))


class TestTargets:
    def test_positive_for_matching_anchor(self):
        # D1 anchor at row 2, col 2 spans (2, 2, 18, 18); the GT is shifted 4 px right
        s = toy_sample(np.random.default_rng(0), boxes=((6, 2, 22, 18),))
        t = build_targets(s, RunConfig().net, TrainConfig(), with_density=True)
        assert t.labels[0][2 * 8 + 2] == POSITIVE
        np.testing.assert_allclose(t.reg[0][2 * 8 + 2], [0.25, 0, 0, 0])
        assert t.density.shape == (1, 1, 8, 8)
        assert t.density.sum() == pytest.approx(1.0)
        assert [len(l) for l in t.labels] == [64, 32, 8, 2]

    def test_no_faces(self):
        s = toy_sample(np.random.default_rng(0), boxes=())
        s = Sample(s.image, np.zeros((0, 4)), 32, 32)
        t = build_targets(s, RunConfig().net, TrainConfig(), with_density=True)
        assert all((l == 0).all() for l in t.labels)
        assert t.density.sum() == 0

    def test_flip(self):
        s = toy_sample(np.random.default_rng(1), boxes=((2, 3, 10, 12),))
        f = flip_sample(s)
        np.testing.assert_array_equal(f.boxes, [[22, 3, 30, 12]])
        np.testing.assert_array_equal(f.image[0, 0, :, 0], s.image[0, 0, :, 31])
        np.testing.assert_array_equal(flip_sample(f).image, s.image)


class TestStep:
    def test_density_gradient_gating(self):
        rng = np.random.default_rng(2)
        s = toy_sample(rng)
        run = tiny_run()
        seen = {}
        for lam in (0.0, 1.0):
            net = DAFENet(run.net, seed=0)
            orig = net.backward

            def spy(head, density_grad=None, **kw):
                seen[lam] = density_grad
                return orig(head, density_grad, **kw)

            net.backward = spy
            cfg = replace(run.train, weights=LossWeights(1.0, lam))
            r = train_step(net, s, build_targets(s, run.net, cfg, True), cfg)
            assert r.den > 0
        assert seen[0.0] is None
        assert seen[1.0] is not None and np.abs(seen[1.0]).sum() > 0

    def test_dem_gradient_affine_in_lambda(self):
        rng = np.random.default_rng(3)
        s = toy_sample(rng)
        run = tiny_run()
        grads = []
        for lam in (0.0, 1.0, 2.0):
            net = DAFENet(run.net, seed=0)
            cfg = replace(run.train, weights=LossWeights(1.0, lam))
            train_step(net, s, build_targets(s, run.net, cfg, True), cfg)
            grads.append(np.concatenate([p.grad.ravel() for p in net.dem.parameters()]))
        np.testing.assert_allclose(grads[2] - grads[1], grads[1] - grads[0], rtol=1e-9, atol=1e-15)
        assert np.abs(grads[1] - grads[0]).max() > 0


class TestTrain:
    def dataset(self):
        rng = np.random.default_rng(4)
        return Dataset([toy_sample(rng), toy_sample(rng, boxes=((10, 10, 30, 30), (0, 0, 8, 8)))], ["a", "b"])

    def test_deterministic_trace(self):
        a = train(self.dataset(), tiny_run(seed=3))
        b = train(self.dataset(), tiny_run(seed=3))
        assert a.trace == b.trace
        c = train(self.dataset(), tiny_run(seed=4))
        assert a.trace != c.trace

    def test_trace_and_checkpoints(self, tmp_path):
        calls = []
        res = train(self.dataset(), tiny_run(), tmp_path, lambda net, it, out: calls.append(it))
        assert calls == [4, 6]
        with open(tmp_path / "trace.csv") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == TRACE_COLUMNS
        assert [int(r[0]) for r in rows[1:]] == list(range(1, 7))
        assert [float(r[4]) for r in rows[1:]] == pytest.approx([1e-3] * 4 + [1e-4] * 2)
        assert all(float(r[3]) > 0 for r in rows[1:])
        assert len(res.trace) == 6

    def test_without_dem(self):
        run = tiny_run()
        run = replace(run, net=tiny_net_config(fusion="none"))
        res = train(self.dataset(), run)
        assert all(row[3] == 0.0 for row in res.trace)

    def test_batch_accumulation(self):
        res = train(self.dataset(), tiny_run(batch_size=2, iterations=2, milestones=()))
        assert len(res.trace) == 2

    def test_from_annotations(self, tmp_path):
        from dafefd.synthetic import gen_synthetic

        gen_synthetic(tmp_path, 3, seed=0, image_size=48, max_face=32)
        ds = Dataset.from_annotations(tmp_path / "annotations.txt")
        assert len(ds) == 3
        assert ds.samples[0].image.shape == (1, 1, 64, 64)
        assert ds.samples[0].width == 48
