import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dafefd.anchors import AnchorConfig, iou_matrix, tile_all
from dafefd.inference import EvalReport, ap_at_iou, nms, postprocess, pr_export, pr_svg, read_pr_csv
from dafefd.network import DetectorOutput


def nms_oracle(boxes, scores, thr):
    """Quadratic reference: walk candidates by (score desc, index asc)."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    alive = [True] * len(boxes)
    keep = []
    for a, i in enumerate(order):
        if not alive[i]:
            continue
        keep.append(i)
        for j in order[a + 1:]:
            if alive[j] and iou_matrix(boxes[i], boxes[j])[0, 0] > thr:
                alive[j] = False
    return keep


def random_boxes(rng, n, lim=200.0):
    xy = rng.uniform(0, lim, (n, 2))
    wh = rng.uniform(2, 60, (n, 2))
    return np.hstack([xy, xy + wh])


def ap_oracle(tp_flags, num_gt):
    """All-point AP by brute force: for each recall level take the best precision at or beyond it."""
    tp = fp = 0
    curve = []
    for f in tp_flags:
        tp += f
        fp += not f
        curve.append((tp / num_gt, tp / (tp + fp)))
    ap, prev = 0.0, 0.0
    for r, _ in curve:
        if r > prev:
            ap += (r - prev) * max(p for rr, p in curve if rr >= r)
            prev = r
    return ap


def greedy_flags(dets, gts, thr=0.5):
    """Independent TP/FP labelling via an explicit global sort and per-GT bookkeeping."""
    flat = sorted(((-s, i, k, b) for i, d in enumerate(dets) for k, (b, s) in enumerate(d)),
                  key=lambda t: t[:3])
    used = set()
    flags = []
    for _, i, _, b in flat:
        best, best_j = -1.0, None
        for j, g in enumerate(gts[i]):
            if (i, j) in used:
                continue
            v = iou_matrix(b, g)[0, 0]
            if v > best:
                best, best_j = v, j
        hit = best_j is not None and best >= thr
        if hit:
            used.add((i, best_j))
        flags.append(hit)
    return flags


class TestNMS:
    def test_single(self):
        assert list(nms(np.array([[0, 0, 1, 1.0]]), np.array([0.3]), 0.3)) == [0]

    def test_hand_example(self):
        boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11], [20, 20, 30, 30]], float)
        assert iou_matrix(boxes[0], boxes[1])[0, 0] == pytest.approx(81 / 119)
        assert list(nms(boxes, np.array([0.9, 0.8, 0.7]), 0.3)) == [0, 2]

    def test_threshold_one_keeps_all(self):
        rng = np.random.default_rng(0)
        boxes = random_boxes(rng, 30)
        boxes[1] = boxes[0]
        assert sorted(nms(boxes, rng.random(30), 1.0)) == list(range(30))

    def test_oracle_equivalence(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            boxes = random_boxes(rng, 500)
            scores = np.round(rng.random(500), 2)
            assert list(nms(boxes, scores, 0.3)) == nms_oracle(boxes, scores, 0.3)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), thr=st.floats(0.05, 0.95))
    def test_sorted_and_separated(self, seed, thr):
        rng = np.random.default_rng(seed)
        boxes = random_boxes(rng, 40, 80)
        scores = rng.random(40)
        keep = nms(boxes, scores, thr)
        assert list(scores[keep]) == sorted(scores[keep], reverse=True)
        m = iou_matrix(boxes[keep], boxes[keep])
        np.fill_diagonal(m, 0)
        assert (m <= thr).all()


class TestPostprocess:
    def grids(self, size=64):
        return tile_all(AnchorConfig(), size, size)

    def fields(self, grids, hot=None, deltas=None):
        outs = []
        for m, g in enumerate(grids):
            s = g.num_scales
            cls = np.zeros((1, 2 * s, g.feat_h, g.feat_w))
            cls[:, 1::2] = -20.0
            outs.append(DetectorOutput(cls, np.zeros((1, 4 * s, g.feat_h, g.feat_w))))
        return outs

    def test_single_confident_anchor(self):
        grids = self.grids()
        outs = self.fields(grids)
        outs[0].cls_logits[0, 1, 5, 7] = 10.0
        outs[0].box_deltas[0, :, 5, 7] = [0.1, -0.2, math.log(1.5), 0.0]
        dets = postprocess(outs, grids, 64, 64)
        assert len(dets) == 1
        d = dets[0]
        cx, cy = 7.5 * 4 + 0.1 * 16, 5.5 * 4 - 0.2 * 16
        np.testing.assert_allclose([d.x1, d.y1, d.x2, d.y2], [cx - 12, cy - 8, cx + 12, cy + 8])
        assert d.detector == 1 and d.score == pytest.approx(1 / (1 + math.exp(-10)))

    def test_duplicates_suppressed(self):
        grids = self.grids()
        outs = self.fields(grids)
        outs[0].cls_logits[0, 1, 4, 4] = 5.0
        outs[0].cls_logits[0, 1, 4, 5] = 4.0
        # shift the second anchor onto the first
        outs[0].box_deltas[0, 0, 4, 5] = -0.25
        dets = postprocess(outs, grids, 64, 64)
        assert len(dets) == 1 and dets[0].score == pytest.approx(1 / (1 + math.exp(-5)))

    def test_clipped_and_valid(self):
        rng = np.random.default_rng(0)
        grids = self.grids()
        outs = self.fields(grids)
        for o in outs:
            o.cls_logits[:] = rng.normal(size=o.cls_logits.shape)
            o.box_deltas[:] = rng.normal(size=o.box_deltas.shape) * 3
        dets = postprocess(outs, grids, 50, 60, score_thr=0.0)
        assert dets
        for d in dets:
            assert 0 <= d.x1 < d.x2 <= 50 and 0 <= d.y1 < d.y2 <= 60
            assert 0 < d.score < 1 and d.detector in (1, 2, 3, 4)
        again = postprocess(outs, grids, 50, 60, score_thr=0.0)
        assert dets == again

    def test_topk(self):
        grids = self.grids()
        outs = self.fields(grids)
        outs[0].cls_logits[0, 1] = np.arange(256).reshape(16, 16) / 10.0
        dets = postprocess(outs, grids, 64, 64, topk=3, nms_thr=1.0, score_thr=0.0)
        assert len([d for d in dets if d.detector == 1]) == 3

    def test_per_detector_nms(self):
        grids = self.grids()
        outs = self.fields(grids)
        outs[0].cls_logits[0, 1, 3, 3] = 5.0
        outs[1].cls_logits[0, 1, 1, 1] = 4.0
        outs[1].box_deltas[0, 2:4, 1, 1] = math.log(16 / 24)
        joint = postprocess(outs, grids, 64, 64)
        split = postprocess(outs, grids, 64, 64, per_detector_nms=True)
        assert len(joint) == 1 and len(split) == 2


class TestAP:
    gt = [np.array([[0, 0, 10, 10], [20, 20, 30, 30]], float)]

    def test_perfect(self):
        dets = [[(self.gt[0][0], 0.9), (self.gt[0][1], 0.8)]]
        assert ap_at_iou(dets, self.gt).ap == 1.0

    def test_all_miss(self):
        dets = [[(np.array([50, 50, 60, 60.0]), 0.9)]]
        rep = ap_at_iou(dets, self.gt)
        assert rep.ap == 0.0 and rep.fp == 1

    def test_half(self):
        dets = [[(self.gt[0][0], 0.9), (np.array([50, 50, 60, 60.0]), 0.8)]]
        assert ap_at_iou(dets, self.gt).ap == pytest.approx(0.5, abs=1e-12)

    def test_no_ground_truth(self):
        rep = ap_at_iou([[(np.array([0, 0, 1, 1.0]), 0.5)]], [np.zeros((0, 4))])
        assert rep.ap == 0.0 and rep.no_ground_truth

    def test_duplicate_is_false_positive(self):
        dets = [[(self.gt[0][0], 0.9), (self.gt[0][0], 0.8), (self.gt[0][1], 0.7)]]
        rep = ap_at_iou(dets, self.gt)
        assert (rep.tp, rep.fp) == (2, 1)
        assert rep.ap == pytest.approx(ap_oracle([True, False, True], 2))

    def random_eval(self, rng):
        gts, dets = [], []
        for _ in range(int(rng.integers(1, 5))):
            g = random_boxes(rng, int(rng.integers(0, 5)), 100)
            gts.append(g)
            d = [(b + rng.normal(0, 3, 4), float(rng.random())) for b in g if rng.random() < 0.8]
            d += [(b, float(rng.random())) for b in random_boxes(rng, int(rng.integers(0, 4)), 100)]
            dets.append(d)
        return dets, gts

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            dets, gts = self.random_eval(rng)
            num_gt = sum(len(g) for g in gts)
            if num_gt == 0:
                continue
            rep = ap_at_iou(dets, gts)
            assert rep.ap == pytest.approx(ap_oracle(greedy_flags(dets, gts), num_gt), abs=1e-12)

    def test_monotone_score_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            dets, gts = self.random_eval(rng)
            warped = [[(b, math.exp(3 * s) - 7) for b, s in d] for d in dets]
            assert ap_at_iou(dets, gts).ap == ap_at_iou(warped, gts).ap

    def test_low_false_positive_never_helps(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            dets, gts = self.random_eval(rng)
            base = ap_at_iou(dets, gts).ap
            extra = [list(d) for d in dets]
            extra[0].append((np.array([900, 900, 910, 910.0]), -1.0))
            assert ap_at_iou(extra, gts).ap <= base + 1e-15

    def test_recall_non_decreasing(self):
        dets, gts = self.random_eval(np.random.default_rng(3))
        r = [p[0] for p in ap_at_iou(dets, gts).pr_points]
        assert r == sorted(r)


class TestExport:
    def test_empty_report(self, tmp_path):
        pr_export(EvalReport(0.0), tmp_path / "pr.csv")
        assert (tmp_path / "pr.csv").read_text().strip() == "recall,precision,score_threshold"

    def test_round_trip(self, tmp_path):
        gts = [np.array([[0, 0, 10, 10], [20, 20, 30, 30]], float)]
        rep = ap_at_iou([[(gts[0][0], 0.9), (np.array([40, 40, 50, 50.0]), 1 / 3), (gts[0][1], 0.1)]], gts)
        pr_export(rep, tmp_path / "pr.csv", tmp_path / "pr.svg")
        rows = read_pr_csv(tmp_path / "pr.csv")
        assert [(r, p) for r, p, _ in rows] == rep.pr_points
        assert [t for _, _, t in rows] == rep.thresholds
        assert (tmp_path / "pr.svg").read_text().startswith("<svg")

    def test_perfect_curve(self):
        gts = [np.array([[0, 0, 10, 10]], float)]
        rep = ap_at_iou([[(gts[0][0], 0.9)]], gts)
        assert all(p == 1.0 for _, p in rep.pr_points)
        assert "polyline" in pr_svg(rep)

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError, match="nope"):
            pr_export(EvalReport(0.0), tmp_path / "nope" / "pr.csv")
