"""``ADS1`` checkpoint files: a config header plus a table of named tensors.

Layout (little-endian)::

    magic "ADS1" | u16 version | u32 header_len | header JSON (utf-8)
    u32 tensor_count
    per tensor: u16 name_len | name | u8 dtype_code | u8 trainable | u8 ndim
                | u32 shape[ndim] | payload (C order)

The header records the model config, the variant (``null`` for a bare
backbone) and free-form metadata.  Payloads are written exactly as held in
memory, so a load reproduces every forward output bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from . import tensor as T
from .backbone import DualEncoder
from .config import ConfigError, ModelConfig
from .model import AdsModel

MAGIC = b"ADS1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    """Malformed, mismatched or wrong-version checkpoint."""


def _named(obj) -> list[tuple[str, T.Tensor]]:
    return obj.named_parameters()


def dumps(obj: AdsModel | DualEncoder, meta: dict | None = None) -> bytes:
    if isinstance(obj, AdsModel):
        cfg, variant = obj.cfg, obj.variant
    elif isinstance(obj, DualEncoder):
        cfg, variant = obj.cfg, None
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    header = json.dumps({"config": dataclasses.asdict(cfg), "variant": variant, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    named = _named(obj)
    parts = [MAGIC, struct.pack("<HI", VERSION, len(header)), header, struct.pack("<I", len(named))]
    for name, p in named:
        arr = np.ascontiguousarray(p.data)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BBB", _CODES[dt], int(p.requires_grad), arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(dt, copy=False).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos} (wanted {n} more bytes)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse(blob: bytes) -> tuple[dict, list[tuple[str, np.ndarray, bool]]]:
    """Decode into ``(header, [(name, array, trainable), ...])``."""
    r = _Reader(blob)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}: expected {MAGIC!r}")
    version, hlen = r.unpack("<HI")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header ending at byte {r.pos}: {exc}") from None
    (count,) = r.unpack("<I")
    tensors = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, trainable, ndim = r.unpack("<BBB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name} at byte {r.pos}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).copy()
        tensors.append((name, arr, bool(trainable)))
    if r.pos != len(blob):
        raise CheckpointError(f"trailing bytes after offset {r.pos}")
    return header, tensors


def loads(blob: bytes, expect_config: ModelConfig | None = None) -> AdsModel | DualEncoder:
    header, tensors = parse(blob)
    try:
        cfg = ModelConfig(**header["config"]).validate()
    except (TypeError, KeyError) as exc:
        raise CheckpointError(f"checkpoint config unreadable: {exc}") from None
    if expect_config is not None:
        for f in dataclasses.fields(ModelConfig):
            if f.name in ("seed",):
                continue
            if getattr(cfg, f.name) != getattr(expect_config, f.name):
                raise CheckpointError(f"checkpoint/config mismatch on {f.name}: "
                                      f"{getattr(cfg, f.name)!r} vs {getattr(expect_config, f.name)!r}")
    with T.precision(cfg.dtype):
        backbone = DualEncoder(cfg)
        obj = backbone if header["variant"] is None else AdsModel(backbone, header["variant"], cfg)
    params = dict(_named(obj))
    names = [n for n, _, _ in tensors]
    if set(names) != set(params) or len(names) != len(params):
        missing = sorted(set(params) - set(names))
        extra = sorted(set(names) - set(params))
        raise CheckpointError(f"tensor table does not match model: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, arr, trainable in tensors:
        p = params[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
        p.data = arr.astype(arr.dtype.newbyteorder("="), copy=False)
        p.requires_grad = trainable
        p.grad = None
    return obj


def save(path, obj, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(obj, meta))


def load(path, expect_config: ModelConfig | None = None):
    with open(path, "rb") as fh:
        return loads(fh.read(), expect_config)


def header_of(path) -> dict:
    with open(path, "rb") as fh:
        return parse(fh.read())[0]
