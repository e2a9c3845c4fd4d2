"""Load, validate, persist, normalize and split embedding sets.

File layout (EMBD, little-endian): magic ``EMBD``, version u32 = 1, n u64,
d u32, dtype u8 (0 = float32), 7 reserved zero bytes, then n*d float32
values in row-major order. Embeddings are stored at 32-bit precision and
computed over at 64-bit.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DegenerateRow,
    FormatError,
    InsufficientSamples,
    InvalidInput,
    InvalidSplit,
    PairMismatch,
)

MAGIC = b"EMBD"
VERSION = 1
_HEADER = struct.Struct("<4sIQIB7s")
DTYPE_F32 = 0
DTYPE_F64 = 1  # used only inside internal artifact sections, never for sets

_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8")}


@dataclass(frozen=True)
class EmbeddingSet:
    """One modality's representations, one row per sample.

    ``data`` is float64 in memory; persistence rounds to float32. When
    ``normalized`` is set every row has unit L2 norm to 1e-6.
    """

    data: np.ndarray
    modality: str = "unknown"
    normalized: bool = False

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise InvalidInput("embedding data must be a 2-d matrix")
        if not np.all(np.isfinite(d)):
            raise InvalidInput("embedding data must be finite")
        object.__setattr__(self, "data", d)
        d.setflags(write=False)
        if self.normalized:
            norms = np.linalg.norm(d, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise InvalidInput("normalized flag set but rows are not unit norm")

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def d(self):
        return self.data.shape[1]


@dataclass(frozen=True)
class PairedSet:
    """Two sets whose row i corresponds semantically across modalities."""

    x: EmbeddingSet
    y: EmbeddingSet

    def __post_init__(self):
        if self.x.n != self.y.n:
            raise PairMismatch(f"pair counts differ: {self.x.n} vs {self.y.n}")
        if self.x.d != self.y.d:
            raise PairMismatch(f"dimensions differ: {self.x.d} vs {self.y.d}")

    @property
    def n(self):
        return self.x.n

    @property
    def d(self):
        return self.x.d


@dataclass(frozen=True)
class SplitSpec:
    estimation_fraction: float = 0.5
    seed: int = 0


def _encode_array(arr, dtype_code):
    arr = np.ascontiguousarray(arr)
    n, d = arr.shape
    header = _HEADER.pack(MAGIC, VERSION, n, d, dtype_code, b"\0" * 7)
    return header + arr.astype(_DTYPES[dtype_code], copy=False).tobytes()


def _decode_array(buf, offset=0, allow_f64=False):
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, n, d, dtype_code, reserved = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if reserved != b"\0" * 7:
        raise FormatError("reserved bytes must be zero")
    if dtype_code not in _DTYPES or (dtype_code == DTYPE_F64 and not allow_f64):
        raise FormatError(f"unsupported dtype code {dtype_code}")
    itemsize = _DTYPES[dtype_code].itemsize
    nbytes = n * d * itemsize
    start = offset + _HEADER.size
    if len(buf) - start < nbytes:
        raise FormatError("payload shorter than header promises")
    flat = np.frombuffer(buf, dtype=_DTYPES[dtype_code], count=n * d, offset=start)
    return flat.reshape(n, d), start + nbytes


def save(eset, path):
    """Write an EmbeddingSet in EMBD format (float32 payload)."""
    with open(path, "wb") as fh:
        fh.write(_encode_array(eset.data, DTYPE_F32))


def load(path, modality=None, normalized=None):
    """Read an EMBD file.

    A JSON manifest at ``<path>.json`` supplies modality/normalized when
    present (and its sha256 is verified); explicit arguments win, and
    otherwise the normalized flag is inferred from the row norms.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = _decode_array(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after payload")
    data = arr.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise InvalidInput("file contains non-finite values")

    meta = {}
    sidecar = str(path) + ".json"
    try:
        with open(sidecar, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        pass
    if meta:
        if "sha256" in meta and meta["sha256"] != hashlib.sha256(buf).hexdigest():
            raise FormatError("manifest sha256 does not match file contents")
        if "n" in meta and meta["n"] != data.shape[0]:
            raise FormatError("manifest n does not match file contents")
        if "d" in meta and meta["d"] != data.shape[1]:
            raise FormatError("manifest d does not match file contents")
    if modality is None:
        modality = meta.get("modality", "unknown")
    if normalized is None:
        if "normalized" in meta:
            normalized = bool(meta["normalized"])
        else:
            norms = np.linalg.norm(data, axis=1)
            normalized = bool(np.all(np.abs(norms - 1.0) <= 1e-6))
    return EmbeddingSet(data=data, modality=modality, normalized=normalized)


def manifest(eset, path):
    """JSON-serializable manifest for a set already saved at ``path``."""
    with open(path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    return {
        "path": str(path),
        "modality": eset.modality,
        "n": eset.n,
        "d": eset.d,
        "normalized": eset.normalized,
        "sha256": digest,
    }


def save_manifest(eset, path):
    m = manifest(eset, path)
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(m, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return m


def l2_normalize(eset):
    """Project every row to the unit sphere. Idempotent."""
    norms = np.linalg.norm(eset.data, axis=1)
    bad = np.nonzero(norms < 1e-12)[0]
    if bad.size:
        raise DegenerateRow(int(bad[0]))
    return EmbeddingSet(
        data=eset.data / norms[:, None], modality=eset.modality, normalized=True
    )


def split(pairs, spec):
    """Deterministic shuffled partition into estimation and held-out parts.

    Pairing is preserved inside each part. The estimation side is meant to
    be consumed as two unpaired marginals; use ``unpaired`` for that view.
    """
    n = pairs.n
    if n < 2:
        raise InsufficientSamples("split needs at least 2 pairs")
    n_est = int(round(spec.estimation_fraction * n))
    if n_est < 1 or n_est > n - 1:
        raise InvalidSplit(
            f"fraction {spec.estimation_fraction} leaves an empty part at n={n}"
        )
    perm = np.random.default_rng(spec.seed).permutation(n)
    est_idx = np.sort(perm[:n_est])
    held_idx = np.sort(perm[n_est:])

    def take(idx):
        return PairedSet(
            x=replace(pairs.x, data=pairs.x.data[idx]),
            y=replace(pairs.y, data=pairs.y.data[idx]),
        )

    return take(est_idx), take(held_idx)


def unpaired(pairs):
    """The two marginals of a paired set, pairing deliberately dropped."""
    return pairs.x, pairs.y


def canonical_order(data):
    """Row order that is invariant to the input row order.

    Lexicographic over coordinates; summing statistics in this order makes
    them bitwise independent of how the rows were shuffled on disk.
    """
    return np.lexsort(np.asarray(data).T[::-1])
