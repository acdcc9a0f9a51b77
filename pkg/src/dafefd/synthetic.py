"""Synthetic face corpus: bright rimmed disks over smooth textured noise."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .annotations import AnnotationRecord, Face, format_annotations
from .engine import bilinear_upsample
from .imageio import write_pgm

ANNOTATION_FILE = "annotations.txt"


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(50, 150, size=(1, 1, 9, 9))
    base = bilinear_upsample(coarse, size, size)[0, 0]
    return base + rng.normal(0, 12, size=(size, size))


def _place(rng, size, count, min_face, max_face, attempts=200) -> list[tuple[int, int, int]]:
    sides = np.exp(rng.uniform(math.log(min_face), math.log(max_face), size=count))
    sides = np.sort(np.round(sides).astype(int))[::-1]
    placed = []
    for s in sides:
        s = int(min(s, size))
        for _ in range(attempts):
            x = int(rng.integers(0, size - s + 1))
            y = int(rng.integers(0, size - s + 1))
            # one pixel of clearance keeps rims from touching
            if all(x + s + 1 <= px or px + ps + 1 <= x or y + s + 1 <= py or py + ps + 1 <= y for px, py, ps in placed):
                placed.append((x, y, s))
                break
    return placed


def render_faces(img: np.ndarray, faces, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0 : img.shape[0], 0 : img.shape[1]] + 0.5
    for x, y, s in faces:
        r = s / 2
        d = np.hypot(xx - (x + r), yy - (y + r))
        rim = max(1.0, 0.2 * r)
        inner = rng.uniform(185, 235)
        edge = rng.uniform(20, 60)
        img = np.where(d <= r - rim, inner, img)
        img = np.where((d > r - rim) & (d <= r), edge, img)
    return img


def gen_synthetic(
    out_dir,
    num_images: int,
    seed: int = 0,
    image_size: int = 128,
    min_face: int = 8,
    max_face: int = 64,
    max_faces: int = 8,
) -> list[AnnotationRecord]:
    """Write ``images/*.pgm`` and ``annotations.txt`` under ``out_dir``.

    Every image holds 1 to ``max_faces`` square faces with side drawn
    log-uniformly from ``[min_face, max_face]``; boxes never overlap.
    """
    if not 1 <= min_face <= max_face <= image_size:
        raise ValueError("need 1 <= min_face <= max_face <= image_size")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for k in range(num_images):
        count = int(rng.integers(1, max_faces + 1))
        faces = _place(rng, image_size, count, min_face, max_face)
        img = render_faces(_texture(rng, image_size), faces, rng)
        img = np.clip(np.round(img), 0, 255).astype(np.uint8)
        rel = f"images/img_{k:05d}.pgm"
        write_pgm(out / rel, img)
        records.append(AnnotationRecord(rel, [Face(x, y, s, s) for x, y, s in faces]))
    (out / ANNOTATION_FILE).write_text(format_annotations(records))
    return records
