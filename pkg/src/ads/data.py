"""Synthetic cross-modal incongruity task and the ``ADSD`` dataset file format.

Each sample carries a token sequence with one polarity token (positive or
negative set) and one key token naming an image region, and a patch grid split
into contiguous regions, each with its own polarity realized as a Gaussian bump
``+/- bump * e_r``.  The label is 1 (sarcastic) iff the text polarity disagrees
with the polarity of the region the key token selects.  Neither modality alone
carries any information about the label.

Vocabulary layout for ``P = n_polar_tokens`` and ``R = regions``::

    [0, P)            positive polarity tokens
    [P, 2P)           negative polarity tokens
    [2P, 2P + R)      region key tokens
    [2P + R, vocab)   filler tokens
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import GenSpec
from .tensor import make_rng

MAGIC = b"ADSD"
VERSION = 1


class FormatError(ValueError):
    """Malformed dataset file."""


class VersionError(ValueError):
    """Wrong magic bytes or unsupported format version."""


@dataclass(frozen=True)
class Sample:
    tokens: np.ndarray
    patches: np.ndarray
    label: int


@dataclass
class Dataset:
    tokens: np.ndarray         # (N, n) int64
    patches: np.ndarray        # (N, m, patch_dim) float32
    labels: np.ndarray         # (N,) int64
    text_polarity: np.ndarray  # (N,) int8, +1 / -1
    key: np.ndarray            # (N,) int64 region index
    region_polarity: np.ndarray  # (N, R) int8
    spec: GenSpec

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.tokens[i], self.patches[i], int(self.labels[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.tokens[idx], self.patches[idx], self.labels[idx], self.text_polarity[idx],
                       self.key[idx], self.region_polarity[idx], self.spec)


def token_ranges(spec: GenSpec) -> dict[str, range]:
    p, r = spec.n_polar_tokens, spec.regions
    return {
        "positive": range(0, p),
        "negative": range(p, 2 * p),
        "key": range(2 * p, 2 * p + r),
        "filler": range(2 * p + r, spec.vocab_size),
    }


def derive_label(text_polarity, key, region_polarity) -> np.ndarray:
    """Label 1 iff the text polarity differs from the keyed region's polarity."""
    region_polarity = np.asarray(region_polarity)
    keyed = region_polarity[np.arange(len(region_polarity)), np.asarray(key)]
    return (np.asarray(text_polarity) != keyed).astype(np.int64)


def _draw(spec: GenSpec, count: int, rng: np.random.Generator, congruent: bool = False) -> Dataset:
    """Sample ``count`` examples. ``congruent`` draws caption-style pairs: the text
    states the polarity of the keyed region, and only that region carries a bump."""
    spec.validate()
    ranges = token_ranges(spec)
    R, m, n, pd = spec.regions, spec.m, spec.n, spec.patch_dim

    region_pol = rng.choice(np.array([-1, 1], dtype=np.int8), size=(count, R))
    key = rng.integers(0, R, size=count)
    if congruent:
        text_pol = region_pol[np.arange(count), key].astype(np.int8)
    else:
        text_pol = rng.choice(np.array([-1, 1], dtype=np.int8), size=count)

    filler = np.array(ranges["filler"])
    tokens = filler[rng.integers(0, len(filler), size=(count, n))]
    # two distinct positions per sample: polarity token, then key token
    order = np.argsort(rng.random((count, n)), axis=1)
    pol_pos, key_pos = order[:, 0], order[:, 1]
    which = rng.integers(0, spec.n_polar_tokens, size=count)
    pol_tok = np.where(text_pol > 0, ranges["positive"].start + which, ranges["negative"].start + which)
    rows = np.arange(count)
    tokens[rows, pol_pos] = pol_tok
    tokens[rows, key_pos] = ranges["key"].start + key

    per = m // R
    region_of_patch = np.arange(m) // per
    means = np.zeros((count, m, pd))
    means[:, np.arange(m), region_of_patch] = spec.bump * region_pol[:, region_of_patch]
    if congruent:
        means *= (region_of_patch[None, :] == key[:, None])[:, :, None]
    patches = (means + spec.noise * rng.standard_normal((count, m, pd))).astype(np.float32)

    labels = derive_label(text_pol, key, region_pol)
    return Dataset(tokens.astype(np.int64), patches, labels, text_pol.astype(np.int8),
                   key.astype(np.int64), region_pol.astype(np.int8), spec)


def generate(spec: GenSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Draw train/val/test splits from independent streams of ``spec.seed``."""
    spec.validate()
    return tuple(_draw(spec, size, make_rng(spec.seed, "data", split))
                 for split, size in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)))


def generate_pretrain_pairs(spec: GenSpec, count: int, seed: int) -> Dataset:
    """Aligned pairs for backbone pretraining: the text describes one region truthfully."""
    return _draw(spec, count, make_rng(seed, "pretrain-pairs"), congruent=True)


# ---------------------------------------------------------------------------
# ADSD file format
#
#   magic "ADSD" | u16 version | u32 spec_len | spec JSON (utf-8) | u32 count
#   then per sample: u16 tokens[n] | f32 patches[m*patch_dim] | u8 label
#                    | i8 text_polarity | u8 key | i8 region_polarity[R]
# all little-endian.
# ---------------------------------------------------------------------------

def _record_dtype(spec: GenSpec) -> np.dtype:
    return np.dtype([
        ("tokens", "<u2", (spec.n,)),
        ("patches", "<f4", (spec.m * spec.patch_dim,)),
        ("label", "u1"),
        ("text_polarity", "i1"),
        ("key", "u1"),
        ("region_polarity", "i1", (spec.regions,)),
    ])


def dumps(ds: Dataset) -> bytes:
    spec = ds.spec
    if spec.vocab_size > 0xFFFF or spec.regions > 0xFF:
        raise FormatError("vocab_size or regions too large for the ADSD record layout")
    spec_blob = json.dumps(dataclasses.asdict(spec), sort_keys=True).encode("utf-8")
    rec = np.zeros(len(ds), dtype=_record_dtype(spec))
    rec["tokens"] = ds.tokens
    rec["patches"] = ds.patches.reshape(len(ds), -1)
    rec["label"] = ds.labels
    rec["text_polarity"] = ds.text_polarity
    rec["key"] = ds.key
    rec["region_polarity"] = ds.region_polarity
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(spec_blob)))
    buf.write(spec_blob)
    buf.write(struct.pack("<I", len(ds)))
    buf.write(rec.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> Dataset:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise VersionError(f"bad magic {blob[:4]!r}: expected {MAGIC!r}")
    off = 4
    if len(blob) < off + 6:
        raise FormatError(f"truncated header at byte offset {len(blob)}")
    version, spec_len = struct.unpack_from("<HI", blob, off)
    if version != VERSION:
        raise VersionError(f"unsupported ADSD version {version}, expected {VERSION}")
    off += 6
    if len(blob) < off + spec_len:
        raise FormatError(f"truncated spec block at byte offset {len(blob)}")
    try:
        spec = GenSpec(**json.loads(blob[off:off + spec_len].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"malformed spec block at byte offset {off}: {exc}") from exc
    off += spec_len
    if len(blob) < off + 4:
        raise FormatError(f"truncated sample count at byte offset {len(blob)}")
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    dt = _record_dtype(spec)
    need = off + count * dt.itemsize
    if len(blob) != need:
        bad = min(len(blob), need)
        raise FormatError(f"expected {count} records ending at byte {need}, file ends at byte offset {bad}")
    rec = np.frombuffer(blob, dtype=dt, count=count, offset=off)
    labels = rec["label"].astype(np.int64)
    if count and labels.max() > 1:
        raise FormatError(f"label out of range in record at byte offset {off}")
    return Dataset(
        tokens=rec["tokens"].astype(np.int64),
        patches=rec["patches"].reshape(count, spec.m, spec.patch_dim).astype(np.float32),
        labels=labels,
        text_polarity=rec["text_polarity"].astype(np.int8),
        key=rec["key"].astype(np.int64),
        region_polarity=rec["region_polarity"].astype(np.int8),
        spec=spec,
    )


def save_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(dumps(ds))


def load_dataset(path) -> Dataset:
    return loads(Path(path).read_bytes())
