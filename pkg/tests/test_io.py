import logging

import numpy as np
import pytest

from dafefd.anchors import iou_matrix
from dafefd.annotations import AnnotationError, format_annotations, parse_annotations
from dafefd.config import ConfigError, RunConfig, TrainConfig
from dafefd.density import GaussianSpec
from dafefd.gradcheck import tiny_net_config
from dafefd.imageio import density_to_pgm, read_pnm, to_network_input, write_pgm, write_ppm
from dafefd.modelfile import ModelFileError, load_model, save_model
from dafefd.network import DAFENet
from dafefd.synthetic import gen_synthetic

TWO_FACES = """\
0--Parade/0_Parade_marchingband_1_849.jpg
2
449 330 122 149 0 0 0 0 0 0
10 20 30 40 1 0 0 0 0 0
"""

ZERO_QUIRK = """\
a.jpg
0
0 0 0 0 0 0 0 0 0 0
b.jpg
1
1 2 3 4 0 0 0 0 0 0
"""


def write(tmp_path, text, name="a.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestAnnotations:
    def test_two_faces(self, tmp_path):
        (rec,) = parse_annotations(write(tmp_path, TWO_FACES))
        assert rec.image_path == "0--Parade/0_Parade_marchingband_1_849.jpg"
        np.testing.assert_array_equal(rec.boxes(), [[449, 330, 571, 479], [10, 20, 40, 60]])
        assert rec.faces[1].attrs == (1, 0, 0, 0, 0, 0)

    def test_zero_count_quirk(self, tmp_path):
        a, b = parse_annotations(write(tmp_path, ZERO_QUIRK))
        assert a.faces == [] and a.boxes().shape == (0, 4)
        assert b.boxes().tolist() == [[1, 2, 4, 6]]

    def test_zero_count_without_padding_line(self, tmp_path):
        recs = parse_annotations(write(tmp_path, "a.jpg\n0\nb.jpg\n0\n"))
        assert [r.image_path for r in recs] == ["a.jpg", "b.jpg"]

    def test_nine_fields_names_line(self, tmp_path):
        text = "a.jpg\n1\n1 2 3 4 0 0 0 0 0\n"
        with pytest.raises(AnnotationError, match=r"a\.txt:3"):
            parse_annotations(write(tmp_path, text))

    def test_truncated(self, tmp_path):
        with pytest.raises(AnnotationError, match="truncated"):
            parse_annotations(write(tmp_path, "a.jpg\n3\n1 2 3 4 0 0 0 0 0 0\n"))

    def test_invalid_faces_filtered(self, tmp_path, caplog):
        text = "a.jpg\n3\n1 2 3 4 0 0 0 1 0 0\n1 2 0 4 0 0 0 0 0 0\n5 5 5 5 0 0 0 0 0 0\n"
        with caplog.at_level(logging.WARNING):
            (rec,) = parse_annotations(write(tmp_path, text))
        assert len(rec.faces) == 1
        assert "filtered 2" in caplog.text

    def test_missing_file(self, tmp_path):
        with pytest.raises(AnnotationError, match="cannot read"):
            parse_annotations(tmp_path / "nope.txt")

    def test_format_round_trip(self, tmp_path):
        recs = parse_annotations(write(tmp_path, ZERO_QUIRK))
        again = parse_annotations(write(tmp_path, format_annotations(recs), "b.txt"))
        assert again == recs


class TestSynthetic:
    def test_deterministic(self, tmp_path):
        gen_synthetic(tmp_path / "a", 4, seed=5)
        gen_synthetic(tmp_path / "b", 4, seed=5)
        for rel in ["annotations.txt"] + [f"images/img_{k:05d}.pgm" for k in range(4)]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_boxes_and_parse_agree(self, tmp_path):
        recs = gen_synthetic(tmp_path, 25, seed=1)
        parsed = parse_annotations(tmp_path / "annotations.txt")
        assert parsed == recs
        for r in parsed:
            b = r.boxes()
            assert 1 <= len(b) <= 8
            assert (b[:, :2] >= 0).all() and (b[:, 2:] <= 128).all()
            side = b[:, 2] - b[:, 0]
            assert ((side >= 8) & (side <= 64)).all()
            m = iou_matrix(b, b)
            np.fill_diagonal(m, 0)
            assert (m < 0.3).all()
            img = read_pnm(tmp_path / r.image_path)
            assert img.shape == (128, 128) and img.dtype == np.uint8

    def test_faces_brighter_than_background(self, tmp_path):
        (rec,) = gen_synthetic(tmp_path, 1, seed=2, min_face=30, max_face=40, max_faces=1)
        img = read_pnm(tmp_path / rec.image_path).astype(float)
        f = rec.faces[0]
        centre = img[f.y + f.h // 2 - 3 : f.y + f.h // 2 + 3, f.x + f.w // 2 - 3 : f.x + f.w // 2 + 3]
        assert centre.mean() > img.mean()


class TestImageIO:
    def test_pgm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (5, 7)).astype(np.uint8)
        write_pgm(tmp_path / "x.pgm", img)
        np.testing.assert_array_equal(read_pnm(tmp_path / "x.pgm"), img)

    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (4, 3, 3)).astype(np.uint8)
        write_ppm(tmp_path / "x.ppm", img)
        np.testing.assert_array_equal(read_pnm(tmp_path / "x.ppm"), img)

    def test_ascii_with_comment(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P2\n# note\n2 2\n255\n0 10\n20 255\n")
        np.testing.assert_array_equal(read_pnm(tmp_path / "a.pgm"), [[0, 10], [20, 255]])

    def test_truncated(self, tmp_path):
        (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x01")
        with pytest.raises(ValueError, match="truncated"):
            read_pnm(tmp_path / "t.pgm")

    def test_network_input(self):
        x = to_network_input(np.array([[0, 255]], dtype=np.uint8))
        np.testing.assert_array_equal(x, [[[[-2.0, 2.0]]]])
        assert to_network_input(np.zeros((2, 3, 3), np.uint8)).shape == (1, 3, 2, 3)

    def test_density_render(self):
        out = density_to_pgm(np.array([[0.0, 0.5], [1.0, 0.25]]))
        np.testing.assert_array_equal(out, [[0, 128], [255, 64]])
        assert not density_to_pgm(np.zeros((2, 2))).any()


class TestConfig:
    def test_round_trip(self):
        run = RunConfig()
        assert RunConfig.from_text(run.to_text()) == run

    def test_round_trip_custom(self):
        from dataclasses import replace

        run = RunConfig(tiny_net_config(cam_enabled=False, fusion="concat"),
                        TrainConfig(iterations=7, milestones=(3,), gaussian=GaussianSpec("fixed", 6.0), seed=9),
                        "a/b.txt", "out")
        assert RunConfig.from_text(run.to_text()) == run
        run = replace(run, train=replace(run.train, mid_as_negative=True, flip=False))
        assert RunConfig.from_text(run.to_text()) == run

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="optim.learning_rate"):
            RunConfig.from_text("[optim]\nlearning_rate=0.1\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            RunConfig.from_text("[model]\nx=1\n")

    @pytest.mark.parametrize("text", [
        "[optim]\nlr=-1\n",
        "[optim]\nlr=fast\n",
        "[cam]\ndilations=1,1\n",
        "[dem]\nfusion=multiply\n",
        "[density]\ntruncation=1\n",
        "[anchors]\nd1=8:1\n",
        "[loss]\nlambda_d=-2\n",
    ])
    def test_invalid_values(self, text):
        with pytest.raises(ConfigError):
            RunConfig.from_text(text)

    def test_partial_defaults(self):
        run = RunConfig.from_text("[optim]\niterations=10\n")
        assert run.train.iterations == 10 and run.train.lr == 0.001
        assert run.net == RunConfig().net

    def test_anchor_table(self):
        run = RunConfig.from_text("[anchors]\nd2=8:1.5,2,3\n")
        assert run.net.anchors.detectors[1].sizes == (24, 32, 48)


class TestModelFile:
    @pytest.fixture
    def saved(self, tmp_path):
        run = RunConfig(net=tiny_net_config())
        net = DAFENet(run.net, seed=4)
        path = tmp_path / "m.dafe"
        save_model(path, net, run)
        return path, net, run

    def test_round_trip(self, saved):
        path, net, run = saved
        loaded, run2 = load_model(path, expect=run)
        assert run2 == run
        for (na, a), (nb, b) in zip(net.named_parameters(), loaded.named_parameters()):
            assert na == nb
            bound = np.maximum(np.abs(a.data), np.finfo(np.float32).tiny) * np.finfo(np.float32).eps
            assert (np.abs(a.data - b.data) <= bound).all()

    def test_detect_output_preserved(self, saved):
        path, net, run = saved
        loaded, _ = load_model(path)
        for p in net.parameters():
            p.data[...] = p.data.astype(np.float32)
        x = np.random.default_rng(0).normal(size=(1, 1, 32, 32))
        a, _ = net.forward(x)
        b, _ = loaded.forward(x)
        for oa, ob in zip(a, b):
            assert np.array_equal(oa.cls_logits, ob.cls_logits)

    def test_header(self, saved):
        data = saved[0].read_bytes()
        assert data[:4] == b"DAFE" and data[4:8] == (1).to_bytes(4, "little")

    def test_truncated(self, saved, tmp_path):
        data = saved[0].read_bytes()
        for cut in (2, 10, 200, len(data) - 4):
            (tmp_path / "t.dafe").write_bytes(data[:cut])
            with pytest.raises(ModelFileError):
                load_model(tmp_path / "t.dafe")

    def test_bad_magic_and_version(self, saved, tmp_path):
        data = bytearray(saved[0].read_bytes())
        (tmp_path / "m1").write_bytes(b"XXXX" + data[4:])
        with pytest.raises(ModelFileError, match="magic"):
            load_model(tmp_path / "m1")
        data[4] = 2
        (tmp_path / "m2").write_bytes(bytes(data))
        with pytest.raises(ModelFileError, match="version"):
            load_model(tmp_path / "m2")

    def test_mismatched_config(self, saved):
        path, _, run = saved
        other = RunConfig(net=tiny_net_config(widths=(2, 3, 3, 4, 5)))
        with pytest.raises(ModelFileError, match="architecture"):
            load_model(path, expect=other)

    def test_missing_parameter(self, saved, tmp_path):
        path, net, run = saved
        # a net without CAM has fewer tensors than the config it claims
        small = DAFENet(tiny_net_config(cam_enabled=False))
        save_model(tmp_path / "s.dafe", small, run)
        with pytest.raises(ModelFileError, match="missing parameter 'detectors.0.cam"):
            load_model(tmp_path / "s.dafe")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ModelFileError, match="cannot read"):
            load_model(tmp_path / "none.dafe")
