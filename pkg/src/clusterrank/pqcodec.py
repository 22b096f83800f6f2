"""Product quantization of original-space vectors and asymmetric distances (ADC)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _binio
from .errors import FormatError, ParameterError
from .linalg import nearest
from .quantizer import Codebook, kmeans_fit


@dataclass(frozen=True)
class PqCodec:
    segment_codebooks: tuple  # num_segments Codebooks, each seg_k x (dim / num_segments)

    @property
    def num_segments(self) -> int:
        return len(self.segment_codebooks)

    @property
    def seg_k(self) -> int:
        return self.segment_codebooks[0].k

    @property
    def sub_dim(self) -> int:
        return self.segment_codebooks[0].dim

    @property
    def dim(self) -> int:
        return self.sub_dim * self.num_segments

    def __eq__(self, other):
        if not isinstance(other, PqCodec):
            return NotImplemented
        return all(a == b for a, b in zip(self.segment_codebooks, other.segment_codebooks))

    def to_bytes(self) -> bytes:
        head = b"PQB1" + _binio.i32(self.num_segments, self.seg_k, self.dim)
        return head + b"".join(cb.to_bytes() for cb in self.segment_codebooks)

    @classmethod
    def from_bytes(cls, buf, name="<pq codec>") -> "PqCodec":
        r = _binio.Reader(buf, name)
        r.magic(b"PQB1")
        num_segments, seg_k, dim = r.i32(), r.i32(), r.i32()
        cbs = tuple(Codebook.read(r) for _ in range(num_segments))
        r.done()
        if any(cb.k != seg_k or cb.dim * num_segments != dim for cb in cbs):
            raise FormatError(f"{name}: segment codebooks disagree with header")
        return cls(cbs)

    def save(self, path):
        _binio.write_file(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "PqCodec":
        return cls.from_bytes(_binio.read_file(path), str(path))


@dataclass(frozen=True)
class PqCodeStore:
    codes: np.ndarray  # count x num_segments, uint8

    @property
    def count(self) -> int:
        return self.codes.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PqCodeStore):
            return NotImplemented
        return np.array_equal(self.codes, other.codes)

    def check(self, codec: "PqCodec") -> None:
        """Raise FormatError unless every code is valid for ``codec``."""
        if self.codes.shape[1] != codec.num_segments:
            raise FormatError(f"codes have {self.codes.shape[1]} segments, codec has {codec.num_segments}")
        if self.count and int(self.codes.max()) >= codec.seg_k:
            raise FormatError(f"corrupt code store: byte >= seg_k={codec.seg_k}")

    def to_bytes(self) -> bytes:
        count, segs = self.codes.shape
        return b"PQC1" + _binio.i32(count, segs) + np.ascontiguousarray(self.codes, dtype=np.uint8).tobytes()

    @classmethod
    def from_bytes(cls, buf, name="<pq codes>") -> "PqCodeStore":
        r = _binio.Reader(buf, name)
        r.magic(b"PQC1")
        count, segs = r.i32(), r.i32()
        codes = r.array("u1", count * segs).reshape(count, segs)
        r.done()
        return cls(codes)

    def save(self, path):
        _binio.write_file(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "PqCodeStore":
        return cls.from_bytes(_binio.read_file(path), str(path))


def _segments(x: np.ndarray, num_segments: int):
    w = x.shape[1] // num_segments
    return [x[:, s * w:(s + 1) * w] for s in range(num_segments)]


def pq_fit(data, num_segments: int = 16, seg_k: int = 256, seed=0, max_iters: int = 25) -> PqCodec:
    x = np.asarray(data, dtype=np.float64)
    if num_segments < 1 or x.shape[1] % num_segments:
        raise ParameterError(f"dim {x.shape[1]} not divisible by num_segments={num_segments}")
    if not 1 <= seg_k <= 256:
        raise ParameterError(f"seg_k must be in [1, 256] to fit one byte, got {seg_k}")
    if x.shape[0] < seg_k:
        raise ParameterError(f"need at least seg_k={seg_k} vectors, got {x.shape[0]}")
    seeds = np.random.SeedSequence(seed).spawn(num_segments)
    cbs = tuple(kmeans_fit(sub, seg_k, max_iters, np.random.default_rng(ss))
                for sub, ss in zip(_segments(x, num_segments), seeds))
    return PqCodec(cbs)


def pq_encode(codec: PqCodec, data) -> PqCodeStore:
    x = np.asarray(data, dtype=np.float64)
    if x.size == 0:
        return PqCodeStore(np.zeros((0, codec.num_segments), dtype=np.uint8))
    if x.shape[1] != codec.dim:
        raise ParameterError(f"dimension mismatch: data {x.shape[1]} vs codec {codec.dim}")
    cols = [nearest(sub, cb.centroids)[0] for sub, cb in zip(_segments(x, codec.num_segments), codec.segment_codebooks)]
    return PqCodeStore(np.stack(cols, axis=1).astype(np.uint8))


def pq_decode(codec: PqCodec, codes) -> np.ndarray:
    codes = np.atleast_2d(np.asarray(codes))
    return np.hstack([cb.centroids[codes[:, s]].astype(np.float64)
                      for s, cb in enumerate(codec.segment_codebooks)])


def adc_table(codec: PqCodec, query) -> np.ndarray:
    """num_segments x seg_k table of squared distances from each query segment to each sub-codeword."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (codec.dim,):
        raise ParameterError(f"dimension mismatch: query {q.shape} vs codec dim {codec.dim}")
    w = codec.sub_dim
    table = np.empty((codec.num_segments, codec.seg_k))
    for s, cb in enumerate(codec.segment_codebooks):
        diff = cb.centroids.astype(np.float64) - q[s * w:(s + 1) * w]
        table[s] = (diff * diff).sum(axis=1)
    return table


def adc_distance(table: np.ndarray, code) -> float:
    code = np.asarray(code)
    if code.shape != (table.shape[0],):
        raise ParameterError(f"code width {code.shape} does not match {table.shape[0]} segments")
    if np.any(code >= table.shape[1]):
        raise FormatError(f"corrupt code: byte >= seg_k={table.shape[1]}")
    return float(table[np.arange(table.shape[0]), code].sum())


def adc_distances(table: np.ndarray, codes) -> np.ndarray:
    """Vectorized ADC over a count x num_segments code matrix."""
    codes = np.asarray(codes)
    if codes.shape[0] == 0:
        return np.zeros(0)
    return table[np.arange(table.shape[0]), codes].sum(axis=1)
