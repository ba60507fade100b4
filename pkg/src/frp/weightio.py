"""Binary container shared by classifier (``FRPC``) and detector (``FRPD``) weights.

Byte layout, all little-endian::

    magic          4 bytes ASCII
    version        u32
    n_meta         u32
    n_meta x:      key (u16 length + UTF-8)   value f64
    n_layers       u32
    n_layers x:    name (u16 length + UTF-8)
                   kind u8 (0 conv, 1 pool, 2 fully-connected)
                   filter_size u32   stride u32   in_channels u32   out_channels u32
                   n_tensors u32
                   n_tensors x: ndim u32, dims u32 * ndim, data f64 * prod(dims)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

FORMAT_VERSION = 1
KIND_CODES = {"conv": 0, "pool": 1, "fc": 2}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


@dataclass
class LayerRecord:
    name: str
    kind: str
    filter_size: int
    stride: int
    in_channels: int
    out_channels: int
    tensors: list = field(default_factory=list)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def encode(magic: bytes, meta: dict, layers: list[LayerRecord]) -> bytes:
    parts = [magic, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(meta))]
    for key in sorted(meta):
        parts.append(_pack_str(key))
        parts.append(struct.pack("<d", float(meta[key])))
    parts.append(struct.pack("<I", len(layers)))
    for rec in layers:
        parts.append(_pack_str(rec.name))
        parts.append(struct.pack("<BIIII", KIND_CODES[rec.kind], rec.filter_size, rec.stride,
                                 rec.in_channels, rec.out_channels))
        parts.append(struct.pack("<I", len(rec.tensors)))
        for t in rec.tensors:
            t = np.asarray(t, dtype="<f8")
            parts.append(struct.pack("<I", t.ndim))
            parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
            parts.append(t.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated weight file: wanted {n} bytes at offset {self.pos}, "
                              f"file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid string at offset {self.pos}") from exc


def decode(data: bytes, magic: bytes) -> tuple[dict, list[LayerRecord]]:
    r = _Reader(data)
    found = r.take(len(magic)) if len(data) >= len(magic) else data
    if found != magic:
        raise FormatError(f"bad magic {found!r}, expected {magic!r} (wrong file type or version)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    (n_meta,) = r.unpack("<I")
    meta = {}
    for _ in range(n_meta):
        key = r.string()
        (meta[key],) = r.unpack("<d")
    (n_layers,) = r.unpack("<I")
    layers = []
    for _ in range(n_layers):
        name = r.string()
        code, fsize, stride, cin, cout = r.unpack("<BIIII")
        if code not in KIND_NAMES:
            raise FormatError(f"unknown layer kind code {code} in layer {name!r}")
        (n_tensors,) = r.unpack("<I")
        tensors = []
        for _ in range(n_tensors):
            (ndim,) = r.unpack("<I")
            shape = r.unpack(f"<{ndim}I")
            count = int(np.prod(shape)) if ndim else 1
            buf = r.take(8 * count)
            tensors.append(np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape))
        layers.append(LayerRecord(name, KIND_NAMES[code], fsize, stride, cin, cout, tensors))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last layer")
    return meta, layers


def write_file(path, magic: bytes, meta: dict, layers: list[LayerRecord]) -> None:
    Path(path).write_bytes(encode(magic, meta, layers))


def read_file(path, magic: bytes):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read weight file {path}: {exc}") from exc
    return decode(data, magic)
