"""Vector dataset I/O (fvecs / bvecs / ivecs), synthetic data and splits."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

FLOAT32_ORIGIN = "float32"
UINT8_ORIGIN = "uint8"


@dataclass(frozen=True)
class VectorDataset:
    """Immutable count x dim matrix of real vectors.

    ``ids`` optionally records which reference identities the rows were
    taken from (set by samplers and splits).
    """

    data: np.ndarray
    element_kind: str = FLOAT32_ORIGIN
    ids: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ParameterError(f"dataset must be 2-D, got shape {data.shape}")
        if data.size and not np.all(np.isfinite(data)):
            raise FormatError("dataset contains NaN or Inf values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self):
        return self.count

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, VectorDataset):
            return NotImplemented
        return (self.element_kind == other.element_kind
                and self.data.shape == other.data.shape
                and self.data.dtype == other.data.dtype
                and self.data.tobytes() == other.data.tobytes())


@dataclass(frozen=True)
class GroundTruth:
    """Per-query nearest-neighbor identities, each row ascending in true distance."""

    ids: np.ndarray
    distances: np.ndarray | None = None

    @property
    def query_count(self) -> int:
        return self.ids.shape[0]

    @property
    def k(self) -> int:
        return self.ids.shape[1]


def _read_records(path, elem: np.dtype) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if not raw:
        return np.zeros((0, 0), dtype=elem)
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated record header at byte 0")
    d = struct.unpack_from("<i", raw, 0)[0]
    if d <= 0:
        raise FormatError(f"{path}: invalid dimension {d} at byte 0")
    rec = 4 + d * elem.itemsize
    n, tail = divmod(len(raw), rec)
    if tail == 0:
        heads = np.ndarray((n,), dtype="<i4", buffer=raw, strides=(rec,))
        bad = np.flatnonzero(heads != d)
        if bad.size == 0:
            body = np.ndarray((n, d), dtype=elem.newbyteorder("<"), buffer=raw, offset=4,
                              strides=(rec, elem.itemsize))
            return np.array(body, dtype=elem)
    # slow path: locate the first offending record
    pos = 0
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise FormatError(f"{path}: truncated record header at byte {pos}")
        dd = struct.unpack_from("<i", raw, pos)[0]
        if dd != d:
            raise FormatError(f"{path}: dimension {dd} at byte {pos} differs from {d}")
        if pos + rec > len(raw):
            raise FormatError(f"{path}: truncated record at byte {pos}")
        pos += rec
    raise AssertionError("unreachable")


def read_fvecs(path) -> VectorDataset:
    return VectorDataset(_read_records(path, np.dtype(np.float32)), FLOAT32_ORIGIN)


def read_bvecs(path) -> VectorDataset:
    data = _read_records(path, np.dtype(np.uint8)).astype(np.float32)
    return VectorDataset(data, UINT8_ORIGIN)


def read_ivecs(path) -> np.ndarray:
    """Return the identity rows of an ivecs file as an int32 matrix."""
    return _read_records(path, np.dtype(np.int32))


def _write_records(path, rows: np.ndarray, elem: str) -> None:
    rows = np.asarray(rows)
    n = rows.shape[0] if rows.ndim == 2 else 0
    d = rows.shape[1] if rows.ndim == 2 else 0
    buf = np.empty((n, 4 + d * np.dtype(elem).itemsize), dtype=np.uint8)
    if n:
        buf[:, :4] = np.frombuffer(struct.pack("<i", d), dtype=np.uint8)
        buf[:, 4:] = np.ascontiguousarray(rows, dtype=np.dtype(elem).newbyteorder("<")).view(np.uint8).reshape(n, -1)
    try:
        with open(path, "wb") as f:
            f.write(buf.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def write_fvecs(dataset, path) -> None:
    _write_records(path, np.asarray(dataset, dtype=np.float32), "float32")


def write_bvecs(dataset, path) -> None:
    data = np.asarray(dataset)
    if data.size and (data.min() < 0 or data.max() > 255 or np.any(data != np.round(data))):
        raise ParameterError("bvecs values must be integers in [0, 255]")
    _write_records(path, data.astype(np.uint8), "uint8")


def write_ivecs(ids, path) -> None:
    _write_records(path, np.asarray(ids, dtype=np.int32), "int32")


def gen_synthetic(num_modes: int, per_mode: int, dim: int, spread: float, seed: int) -> VectorDataset:
    """Isotropic Gaussian mixture with mode centers uniform in the unit cube.

    Rows are grouped by mode (mode 0 first).
    """
    if num_modes < 1 or per_mode < 1 or dim < 1 or spread < 0:
        raise ParameterError("num_modes, per_mode, dim must be positive and spread non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(num_modes, dim))
    noise = rng.standard_normal((num_modes, per_mode, dim)) * spread
    data = (centers[:, None, :] + noise).reshape(-1, dim)
    return VectorDataset(data.astype(np.float32))


def split(dataset, sizes, seed: int) -> list[VectorDataset]:
    """Randomly partition rows into disjoint subsets of the given sizes.

    Each returned dataset records the source row identities in ``ids``.
    """
    data = np.asarray(dataset)
    if sum(sizes) > data.shape[0]:
        raise ParameterError(f"split sizes {sizes} exceed dataset count {data.shape[0]}")
    kind = getattr(dataset, "element_kind", FLOAT32_ORIGIN)
    perm = np.random.default_rng(seed).permutation(data.shape[0])
    out, start = [], 0
    for size in sizes:
        idx = np.sort(perm[start:start + size])
        out.append(VectorDataset(data[idx], kind, ids=idx))
        start += size
    return out


def largest_remainder(weights, total: int) -> np.ndarray:
    """Integer apportionment of ``total`` proportional to ``weights``; sums exactly to ``total``."""
    weights = np.asarray(weights, dtype=np.float64)
    s = weights.sum()
    if s <= 0:
        return np.zeros(len(weights), dtype=np.int64)
    exact = weights * (total / s)
    base = np.floor(exact).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        # largest fractional part first, lowest index on ties
        order = np.lexsort((np.arange(len(weights)), -(exact - base)))
        base[order[:short]] += 1
    return base


def stratified_sample(reference, index, size: int, seed: int) -> VectorDataset:
    """Sample ``size`` distinct reference rows, stratified by first-level cluster.

    ``index`` only needs a ``point_clusters()`` method giving the first-level
    cluster of every reference row.
    """
    data = np.asarray(reference)
    if size > data.shape[0]:
        raise ParameterError(f"sample size {size} exceeds reference count {data.shape[0]}")
    labels = np.asarray(index.point_clusters())
    if labels.shape[0] != data.shape[0]:
        raise ParameterError("index was not built over this reference set")
    num_clusters = int(labels.max()) + 1 if labels.size else 0
    counts = np.bincount(labels, minlength=num_clusters)
    quotas = largest_remainder(counts, size)
    rng = np.random.default_rng(seed)
    order = np.argsort(labels, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)])
    picked = []
    for m in range(num_clusters):
        if quotas[m]:
            members = order[starts[m]:starts[m + 1]]
            picked.append(rng.choice(members, size=quotas[m], replace=False))
    ids = np.sort(np.concatenate(picked)) if picked else np.zeros(0, dtype=np.int64)
    kind = getattr(reference, "element_kind", FLOAT32_ORIGIN)
    return VectorDataset(data[ids], kind, ids=ids)
