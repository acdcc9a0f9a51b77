"""Command-line entry point: ``dafefd <subcommand> ...``.

Failures exit non-zero after printing one line ``error: <kind>: <message>``
to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import anchors as anc
from .annotations import AnnotationError, parse_annotations, resolve_image
from .config import ConfigError, RunConfig
from .density import GaussianSpec, generate_gt_density, points_from_boxes
from .imageio import density_to_pgm, read_pnm, to_network_input, write_pgm
from .inference import Detection, ap_at_iou, detect, pr_export
from .modelfile import ModelFileError, load_model, save_model
from .network import pad_to_multiple

log = logging.getLogger("dafefd")


class CLIError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: usage: {message}\n")
        raise SystemExit(2)


def _run_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        run = replace(run, train=replace(run.train, seed=args.seed))
    return run


def cmd_gen_synth(args, run):
    from .synthetic import gen_synthetic

    seed = args.seed if args.seed is not None else 0
    recs = gen_synthetic(args.out, args.num, seed, args.size, args.min_face, args.max_face, args.max_faces)
    log.info("wrote %d images to %s", len(recs), args.out)


def cmd_train(args, run):
    from .train import Dataset, train

    annots = args.annots or run.annotations
    if not annots:
        raise CLIError("usage", "train needs --annots or paths.annotations in the config")
    if args.iters is not None:
        run = replace(run, train=replace(run.train, iterations=args.iters))
    run = replace(run, annotations=str(annots), out=str(args.out))
    dataset = Dataset.from_annotations(annots)

    def checkpoint(net, it, out):
        name = "model.dafe" if it == run.train.iterations else f"model_iter{it}.dafe"
        save_model(out / name, net, run)

    train(dataset, run, args.out, checkpoint, progress_every=args.log_every)
    (Path(args.out) / "config.txt").write_text(run.to_text())


def _images_for(args):
    if args.image:
        return [(str(args.image), Path(args.image))]
    recs = parse_annotations(args.annots)
    return [(r.image_path, resolve_image(args.annots, r.image_path)) for r in recs]


def cmd_detect(args, run):
    if not args.image and not args.annots:
        raise CLIError("usage", "detect needs --image or --annots")
    net, _ = load_model(args.model)
    out = Path(args.out)
    if out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for name, path in _images_for(args):
            img = read_pnm(path)
            h, w = img.shape[:2]
            x = pad_to_multiple(to_network_input(img))
            dets = detect(net, x, w, h, topk=args.topk, nms_thr=args.nms, score_thr=args.score_thr,
                          per_detector_nms=args.per_detector_nms)
            for d in dets:
                fh.write(json.dumps({"image": name, "x1": d.x1, "y1": d.y1, "x2": d.x2, "y2": d.y2,
                                     "score": d.score, "detector": d.detector}) + "\n")


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                d = Detection(float(r["x1"]), float(r["y1"]), float(r["x2"]), float(r["y2"]),
                              float(r["score"]), int(r.get("detector", 0)))
            except (ValueError, KeyError, TypeError) as exc:
                raise CLIError("format", f"{path}:{lineno}: bad detection record ({exc})") from exc
            out.setdefault(r["image"], []).append(d)
    return out


def cmd_eval(args, run):
    recs = parse_annotations(args.annots)
    dets = read_detections(args.dets)
    unknown = set(dets) - {r.image_path for r in recs}
    if unknown:
        raise CLIError("format", f"detections for unannotated images: {sorted(unknown)[:3]}")
    report = ap_at_iou([dets.get(r.image_path, []) for r in recs], [r.boxes() for r in recs], args.iou)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ap.txt").write_text(
        f"ap={report.ap!r}\ntp={report.tp}\nfp={report.fp}\nnum_gt={report.num_gt}\n"
        f"no_ground_truth={str(report.no_ground_truth).lower()}\n"
    )
    pr_export(report, out / "pr.csv", out / "pr.svg")
    print(f"AP@{args.iou}={report.ap:.6f}")


def cmd_density(args, run):
    recs = parse_annotations(args.annots)
    target = Path(args.image)
    match = [r for r in recs if resolve_image(args.annots, r.image_path).resolve() == target.resolve()
             or r.image_path == args.image]
    if not match:
        raise CLIError("lookup", f"{args.image} has no record in {args.annots}")
    img = read_pnm(resolve_image(args.annots, match[0].image_path))
    h, w = img.shape[:2]
    g = run.train.gaussian
    spec = GaussianSpec.parse(args.sigma, truncation_radius=g.truncation_radius,
                              normalize_after_truncation=not args.no_normalize) if args.sigma else g
    dm = generate_gt_density(points_from_boxes(match[0].boxes()), w, h, args.stride, spec)
    out = Path(args.out)
    write_pgm(out, density_to_pgm(dm.grid))
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".csv")
    np.savetxt(csv_path, dm.grid, delimiter=",", fmt="%.17g")
    print(f"mass={dm.mass:.6f} faces={len(match[0].faces)}")


def cmd_anchor_stats(args, run):
    recs = parse_annotations(args.annots)
    images = []
    for r in recs:
        if args.image_size:
            w = h = args.image_size
        else:
            img = read_pnm(resolve_image(args.annots, r.image_path))
            h, w = img.shape[:2]
        images.append((w, h, r.boxes()))
    stats = anc.anchor_overlap_stats(images, run.net.anchors, args.bins)
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(("bin_low", "bin_high", "count"))
        wr.writerows(stats.rows())
    below = float(np.mean(stats.max_ious < 0.5)) if len(stats.max_ious) else 0.0
    print(f"faces={len(stats.max_ious)} mean={stats.mean:.4f} median={stats.median:.4f} frac_below_0.5={below:.4f}")


def cmd_gradcheck(args, run):
    from .gradcheck import run_suite

    seed = args.seed if args.seed is not None else 0
    worst = 0.0
    for s in range(seed, seed + args.seeds):
        for name, err in run_suite(s).items():
            ok = err < args.tol
            worst = max(worst, err)
            print(f"{'PASS' if ok else 'FAIL'} seed={s} {name} max_rel_err={err:.3e}")
    if worst >= args.tol:
        raise CLIError("gradcheck", f"max relative error {worst:.3e} >= {args.tol}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", type=Path, default=None)
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="dafefd", description="Density-aware face detector toolkit", parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-synth", parents=[common], help="write a synthetic face corpus")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--num", type=int, default=200)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--min-face", type=int, default=8)
    s.add_argument("--max-face", type=int, default=64)
    s.add_argument("--max-faces", type=int, default=8)
    s.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("train", parents=[common], help="train a detector")
    s.add_argument("--annots", type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--iters", type=int)
    s.add_argument("--log-every", type=int, default=100)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", parents=[common], help="run a trained model")
    s.add_argument("--model", required=True, type=Path)
    s.add_argument("--image", type=Path)
    s.add_argument("--annots", type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--score-thr", type=float, default=0.5)
    s.add_argument("--topk", type=int, default=1000)
    s.add_argument("--nms", type=float, default=0.3)
    s.add_argument("--per-detector-nms", action="store_true")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", parents=[common], help="average precision of detections")
    s.add_argument("--dets", required=True, type=Path)
    s.add_argument("--annots", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--iou", type=float, default=0.5)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("density", parents=[common], help="ground-truth density map for one image")
    s.add_argument("--annots", required=True, type=Path)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--csv", type=Path)
    s.add_argument("--sigma", help="fixed:<pixels> or adaptive:<coeff>")
    s.add_argument("--stride", type=int, default=4)
    s.add_argument("--no-normalize", action="store_true")
    s.set_defaults(func=cmd_density)

    s = sub.add_parser("anchor-stats", parents=[common], help="best anchor IoU histogram")
    s.add_argument("--annots", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--bins", type=int, default=10)
    s.add_argument("--image-size", type=int, help="assume square images of this size")
    s.set_defaults(func=cmd_anchor_stats)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--seeds", type=int, default=1)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run = _run_config(args)
        args.func(args, run)
    except CLIError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except AnnotationError as exc:
        print(f"error: annotations: {exc}", file=sys.stderr)
        return 1
    except ModelFileError as exc:
        print(f"error: model: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
