"""Single-file binary model container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"CODANET\\x00"
    8       2     format version (u16), currently 1
    10      2     reserved, zero
    12      4     architecture length L (u32)
    16      L     architecture description, UTF-8 JSON (``CodaNet.config()``)
    16+L    4     tensor count N (u32)
    then N records:
            2     name length (u16)
            ...   name, UTF-8 (e.g. ``layers.0.A``, ``encoding.running_mean``)
            1     dtype code (u8): 1 = float32, 2 = float64
            1     rank R (u8)
            4*R   extents (u32 each)
            ...   raw little-endian element data, C order

Trainable tensors use the names from ``CodaNet.named_parameters()``; the
running statistics of a patch embedding are stored as
``encoding.running_mean`` and ``encoding.running_var``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .dau import DauBank
from .errors import ParseError
from .net import CodaConvLayer, CodaNet, PatchEmbedding, SixChannel, StemBlock

MAGIC = b"CODANET\x00"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def _tensors(net: CodaNet) -> dict:
    out = {name: p.data for name, p in net.named_parameters().items()}
    out.update({f"encoding.{k}": v for k, v in net.encoding.buffers().items()})
    return out


def dumps(net: CodaNet) -> bytes:
    arch = json.dumps(net.config(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HHI", VERSION, 0, len(arch)), arch]
    tensors = _tensors(net)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            arr = arr.astype(np.float64)
            code = 2
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack(f"<BB{arr.ndim}I", code, arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    return b"".join(parts)


def save_model(net: CodaNet, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps(net))
    return path


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise ParseError(f"{self.source}: truncated while reading {what} "
                             f"(need {n} bytes, {len(self.raw) - self.pos} left)", self.pos)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(raw: bytes, source: str = "<bytes>") -> CodaNet:
    r = _Reader(raw, source)
    if r.take(8, "magic") != MAGIC:
        raise ParseError(f"{source}: not a CoDA model file (bad magic)", 0)
    version, _, arch_len = r.unpack("<HHI", "header")
    if version != VERSION:
        raise ParseError(f"{source}: unsupported format version {version}", 8)
    try:
        arch = json.loads(r.take(arch_len, "architecture").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{source}: malformed architecture description ({exc})", 16) from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        code, ndim = r.unpack("<BB", f"header of {name}")
        if code not in _CODE_DTYPES:
            raise ParseError(f"{source}: tensor {name} has unknown dtype code {code}", r.pos - 2)
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(r.take(nbytes, f"data of {name}"), dtype=dtype).reshape(shape)
        tensors[name] = data.astype(dtype.newbyteorder("="))
    if r.pos != len(raw):
        raise ParseError(f"{source}: {len(raw) - r.pos} trailing bytes", r.pos)
    return _build(arch, tensors, source)


def load_model(path) -> CodaNet:
    path = Path(path)
    return loads(path.read_bytes(), str(path))


def _build(arch: dict, tensors: dict, source: str) -> CodaNet:
    def get(name):
        if name not in tensors:
            raise ParseError(f"{source}: missing tensor {name}")
        return tensors[name]

    enc = arch["encoding"]
    if enc["type"] == "six":
        encoding = SixChannel(enc["in_channels"])
    else:
        encoding = PatchEmbedding(enc["in_channels"], enc["channels"], enc["kernel"], enc["momentum"], enc["eps"])
        for key in ("weight", "bias", "gamma", "beta"):
            getattr(encoding, key).data = get(f"encoding.{key}")
        encoding.running_mean = get("encoding.running_mean")
        encoding.running_var = get("encoding.running_var")
    stem = []
    for i, cfg in enumerate(arch["stem"]):
        stem.append(StemBlock(cfg["in_channels"], cfg["out_channels"], cfg["kernel"], cfg["stride"],
                              cfg["padding"], weight=get(f"stem.{i}.weight")))
    layers = []
    for i, cfg in enumerate(arch["layers"]):
        prefix = f"layers.{i}."
        b = tensors.get(prefix + "b")
        bank = DauBank(get(prefix + "A"), get(prefix + "B"), b, cfg["kind"])
        layers.append(CodaConvLayer(cfg["in_channels"], cfg["out_channels"], cfg["kernel"], cfg["stride"],
                                    cfg["padding"], kind=cfg["kind"], bank=bank))
    return CodaNet(encoding, layers, stem=stem, temperature=arch["temperature"],
                   output_bias=np.asarray(arch["output_bias"]))
