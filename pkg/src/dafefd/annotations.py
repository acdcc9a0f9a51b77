"""WIDER-style face annotation files.

Layout per image: a path line, a face-count line, then one line per face of
ten integers ``x y w h blur expression illumination invalid occlusion pose``.
A count of 0 may be followed by a single all-zero face line.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ATTRIBUTES = ("blur", "expression", "illumination", "invalid", "occlusion", "pose")


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class Face:
    x: int
    y: int
    w: int
    h: int
    attrs: tuple[int, ...] = (0, 0, 0, 0, 0, 0)


@dataclass
class AnnotationRecord:
    image_path: str
    faces: list[Face] = field(default_factory=list)

    def boxes(self) -> np.ndarray:
        """``(n, 4)`` array of ``(x1, y1, x2, y2)``."""
        if not self.faces:
            return np.zeros((0, 4))
        return np.array([(f.x, f.y, f.x + f.w, f.y + f.h) for f in self.faces], dtype=np.float64)


def _ints(line: str, lineno: int, path, expect: int | None = None) -> list[int]:
    parts = line.split()
    if expect is not None and len(parts) != expect:
        raise AnnotationError(f"{path}:{lineno}: expected {expect} integers, found {len(parts)}: {line.strip()!r}")
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise AnnotationError(f"{path}:{lineno}: non-integer field in {line.strip()!r}") from None


def parse_annotations(path) -> list[AnnotationRecord]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise AnnotationError(f"cannot read {path}: {exc.strerror}") from exc
    records = []
    filtered = 0
    i = 0
    n = len(lines)
    while i < n:
        if not lines[i].strip():
            i += 1
            continue
        image_path = lines[i].strip()
        i += 1
        if i >= n:
            raise AnnotationError(f"{path}:{i}: truncated record for {image_path!r} (missing face count)")
        count_fields = _ints(lines[i], i + 1, path, expect=1)
        count = count_fields[0]
        if count < 0:
            raise AnnotationError(f"{path}:{i + 1}: negative face count")
        i += 1
        faces = []
        if count == 0:
            if i < n and len(lines[i].split()) == 10:
                vals = _ints(lines[i], i + 1, path, expect=10)
                if any(vals):
                    raise AnnotationError(f"{path}:{i + 1}: face line after a zero count must be all zeros")
                i += 1
        for _ in range(count):
            if i >= n:
                raise AnnotationError(f"{path}:{i}: truncated record for {image_path!r}: expected {count} faces")
            vals = _ints(lines[i], i + 1, path, expect=10)
            i += 1
            x, y, w, h = vals[:4]
            attrs = tuple(vals[4:])
            if attrs[3] == 1 or w <= 0 or h <= 0:
                filtered += 1
                continue
            faces.append(Face(x, y, w, h, attrs))
        records.append(AnnotationRecord(image_path, faces))
    if filtered:
        log.warning("%s: filtered %d invalid or empty faces", path, filtered)
    return records


def format_annotations(records) -> str:
    out = []
    for r in records:
        out.append(r.image_path)
        out.append(str(len(r.faces)))
        if not r.faces:
            out.append(" ".join(["0"] * 10))
        for f in r.faces:
            out.append(" ".join(str(v) for v in (f.x, f.y, f.w, f.h) + tuple(f.attrs)))
    return "\n".join(out) + "\n"


def resolve_image(annotation_path, image_path: str) -> Path:
    p = Path(image_path)
    return p if p.is_absolute() else Path(annotation_path).parent / p
