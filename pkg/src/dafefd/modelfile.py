"""Binary model persistence.

Layout (little-endian)::

    b"DAFE"  u32 version
    u32 config_len, config text (utf-8, the run config echoed verbatim)
    u32 tensor_count
    tensor_count x { u16 name_len, name, u8 ndim, u32 dims[ndim], u64 offset }
    payload: float32 values; each offset is absolute within the file
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .network import DAFENet

MAGIC = b"DAFE"
VERSION = 1


class ModelFileError(ValueError):
    pass


def save_model(path, net: DAFENet, run: RunConfig) -> None:
    cfg = run.to_text().encode()
    params = list(net.named_parameters())
    header = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(params))]
    dir_size = sum(2 + len(n.encode()) + 1 + 4 * p.data.ndim + 8 for n, p in params)
    offset = sum(len(h) for h in header) + dir_size
    entries, blobs = [], []
    for name, p in params:
        nb = name.encode()
        entries.append(
            struct.pack("<H", len(nb)) + nb + struct.pack("<B", p.data.ndim)
            + struct.pack(f"<{p.data.ndim}I", *p.data.shape) + struct.pack("<Q", offset)
        )
        blob = p.data.astype("<f4").tobytes()
        blobs.append(blob)
        offset += len(blob)
    tmp = Path(str(path) + ".tmp")
    try:
        tmp.write_bytes(b"".join(header + entries + blobs))
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"cannot write model {path}: {exc.strerror}") from exc


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFileError(f"{self.path}: truncated model file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path, expect: RunConfig | None = None) -> tuple[DAFENet, RunConfig]:
    """Read a model file; with ``expect`` the stored architecture must match it."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFileError(f"cannot read model {path}: {exc.strerror}") from exc
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise ModelFileError(f"{path}: not a DAFE model file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise ModelFileError(f"{path}: unsupported model version {version} (expected {VERSION})")
    (clen,) = r.unpack("<I")
    try:
        run = RunConfig.from_text(r.take(clen).decode())
    except (UnicodeDecodeError, ConfigError) as exc:
        raise ModelFileError(f"{path}: bad embedded config: {exc}") from exc
    if expect is not None and expect.net != run.net:
        raise ModelFileError(f"{path}: architecture in file does not match the requested config")
    (count,) = r.unpack("<I")
    entries = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (offset,) = r.unpack("<Q")
        if name in entries:
            raise ModelFileError(f"{path}: duplicate tensor {name!r}")
        entries[name] = (shape, offset)
    spans = sorted((off, off + 4 * int(np.prod(shape))) for shape, off in entries.values())
    for (a0, a1), (b0, _) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ModelFileError(f"{path}: overlapping tensor payloads")
    if spans and (spans[0][0] < r.pos or spans[-1][1] > len(data)):
        raise ModelFileError(f"{path}: truncated model file (payload out of range)")

    net = DAFENet(run.net)
    params = dict(net.named_parameters())
    for name in entries:
        if name not in params:
            raise ModelFileError(f"{path}: unexpected tensor {name!r}")
    loaded = {}
    for name, p in params.items():
        if name not in entries:
            raise ModelFileError(f"{path}: missing parameter {name!r}")
        shape, off = entries[name]
        if tuple(shape) != p.shape:
            raise ModelFileError(f"{path}: parameter {name!r} has shape {tuple(shape)}, expected {p.shape}")
        size = int(np.prod(shape))
        loaded[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).astype(np.float64).reshape(shape)
    for name, arr in loaded.items():
        params[name].data[...] = arr
    return net, run
