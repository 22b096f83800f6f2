"""Two-level inverted index (RVQ or residual OPQ) over PCA-space reference vectors."""
from __future__ import annotations

from functools import cached_property

import numpy as np

from . import _binio
from .errors import FormatError, ParameterError
from .quantizer import (Codebook, OpqResidualCodec, assign_all, kmeans_fit, opq_assign_all,
                        opq_fit, rvq_assign_all, rvq_fit, unpack_codes)

RVQ, OPQ = "rvq", "opq"
_KIND_TAGS = {RVQ: 0, OPQ: 1}
VERSION = 1


class TwoLevelIndex:
    """Inverted lists keyed by (first-level id m, second-level id n).

    Lists are stored CSR-style: ``keys`` holds the sorted flat codes
    ``m * num_second + n`` of the non-empty subclusters, ``ids[offsets[i]:
    offsets[i + 1]]`` the identities of subcluster ``keys[i]``, ascending.
    """

    def __init__(self, kind, first: Codebook, second, keys, offsets, ids):
        if kind not in _KIND_TAGS:
            raise ParameterError(f"unknown index kind {kind!r}")
        self.kind = kind
        self.first = first
        self.second = second
        self.keys = np.asarray(keys, dtype=np.int64)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.ids = np.asarray(ids, dtype=np.uint32)
        for a in (self.keys, self.offsets, self.ids):
            a.setflags(write=False)

    # -- shape -------------------------------------------------------------
    @property
    def dim(self) -> int:
        return self.first.dim

    @property
    def M(self) -> int:
        return self.first.k

    @property
    def N(self) -> int:
        return self.second.k if self.kind == RVQ else self.second.num_codes

    @property
    def count(self) -> int:
        return int(self.ids.shape[0])

    @cached_property
    def _m_ptr(self) -> np.ndarray:
        return np.searchsorted(self.keys, np.arange(self.M + 1, dtype=np.int64) * self.N)

    @cached_property
    def _key_digits(self) -> np.ndarray:
        n = self.keys % self.N
        return unpack_codes(n, self.second.alpha, self.second.beta)

    @cached_property
    def cluster_sizes(self) -> np.ndarray:
        sizes = np.bincount(self.keys // self.N, weights=np.diff(self.offsets), minlength=self.M)
        return sizes.astype(np.int64)

    def subclusters(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        """Non-empty second-level ids of cluster ``m`` and their list lengths."""
        self._check_m(m)
        a, b = self._m_ptr[m], self._m_ptr[m + 1]
        return self.keys[a:b] - m * self.N, self.offsets[a + 1:b + 1] - self.offsets[a:b]

    def sub_sizes(self) -> dict:
        sizes = np.diff(self.offsets)
        return {(int(k // self.N), int(k % self.N)): int(s) for k, s in zip(self.keys, sizes)}

    def list_ids(self, m: int, n: int) -> np.ndarray:
        self._check_m(m)
        key = m * self.N + n
        i = np.searchsorted(self.keys, key)
        if i < self.keys.size and self.keys[i] == key:
            return self.ids[self.offsets[i]:self.offsets[i + 1]]
        return self.ids[:0]

    def lists_of(self, m: int, ns) -> list[np.ndarray]:
        a = self._m_ptr[m]
        pos = a + np.searchsorted(self.keys[a:self._m_ptr[m + 1]], m * self.N + np.asarray(ns, dtype=np.int64))
        return [self.ids[self.offsets[i]:self.offsets[i + 1]] for i in pos]

    def assignments(self) -> tuple[np.ndarray, np.ndarray]:
        """(m, n) of every identity, in identity order."""
        flat = np.empty(self.count, dtype=np.int64)
        flat[self.ids] = np.repeat(self.keys, np.diff(self.offsets))
        return flat // self.N, flat % self.N

    @cached_property
    def labels(self) -> tuple[np.ndarray, np.ndarray]:
        """Cached ``assignments()``."""
        return self.assignments()

    def point_clusters(self) -> np.ndarray:
        return self.labels[0]

    def _check_m(self, m):
        if not 0 <= m < self.M:
            raise ParameterError(f"first-level id {m} outside [0, {self.M})")

    # -- geometry ----------------------------------------------------------
    def second_centroid(self, m: int, n: int) -> np.ndarray:
        self._check_m(m)
        if not 0 <= n < self.N:
            raise ParameterError(f"second-level id {n} outside [0, {self.N})")
        u = self.first.centroids[m].astype(np.float64)
        if self.kind == RVQ:
            return u + self.second.centroids[n]
        return u + self.second.residual_centroid(n)

    def second_distances(self, q, m: int) -> tuple[np.ndarray, np.ndarray]:
        """Non-empty subcluster ids of ``m`` and squared distances from ``q`` to their centroids."""
        ns, _ = self.subclusters(m)
        r = np.asarray(q, dtype=np.float64) - self.first.centroids[m]
        if self.kind == RVQ:
            diff = self.second.centroids[ns].astype(np.float64) - r
            return ns, (diff * diff).sum(axis=1)
        codec = self.second
        rot = codec.rotate(r[None])[0]
        w = codec.sub_dim
        table = np.stack([((cb.centroids.astype(np.float64) - rot[s * w:(s + 1) * w]) ** 2).sum(axis=1)
                          for s, cb in enumerate(codec.sub_codebooks)])
        a, b = self._m_ptr[m], self._m_ptr[m + 1]
        digits = self._key_digits[a:b]
        return ns, table[np.arange(codec.alpha), digits].sum(axis=1)

    def top_s_second_by_distance(self, q, m: int, S: int) -> np.ndarray:
        """Up to ``S`` non-empty subclusters of ``m`` nearest to ``q``, ascending; ties -> lowest id."""
        if S < 0:
            raise ParameterError(f"S must be non-negative, got {S}")
        ns, d = self.second_distances(q, m)
        order = np.argsort(d, kind="stable")[:S]
        return ns[order]

    # -- persistence -------------------------------------------------------
    def to_bytes(self) -> bytes:
        out = [b"LIX1", _binio.i32(VERSION, _KIND_TAGS[self.kind], self.dim, self.M)]
        if self.kind == RVQ:
            out.append(_binio.i32(self.N))
        else:
            out.append(_binio.i32(self.second.alpha, self.second.beta))
        out += [_binio.i64(self.count), self.first.to_bytes(), self.second.to_bytes()]
        if self.kind == RVQ:
            # dense M*N table of 64-bit list offsets
            pos = np.searchsorted(self.keys, np.arange(self.M * self.N + 1, dtype=np.int64))
            out.append(_binio.arr(self.offsets[pos], "i8"))
        else:
            out += [_binio.i64(self.keys.size), _binio.arr(self.keys, "i8"), _binio.arr(self.offsets, "i8")]
        out.append(_binio.arr(self.ids, "u4"))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf, name="<index>") -> "TwoLevelIndex":
        r = _binio.Reader(buf, name)
        r.magic(b"LIX1")
        version = r.i32()
        if version != VERSION:
            raise FormatError(f"{name}: unsupported index version {version}")
        tag = r.i32()
        kinds = {v: k for k, v in _KIND_TAGS.items()}
        if tag not in kinds:
            raise FormatError(f"{name}: unknown index kind tag {tag}")
        kind = kinds[tag]
        dim, M = r.i32(), r.i32()
        desc = (r.i32(),) if kind == RVQ else (r.i32(), r.i32())
        count = r.i64()
        first = Codebook.read(r)
        second = Codebook.read(r) if kind == RVQ else OpqResidualCodec.read(r)
        if kind == RVQ:
            N = desc[0]
            dense = r.array("i8", M * N + 1)
            sizes = np.diff(dense)
            if np.any(sizes < 0) or dense[0] != 0 or dense[-1] != count:
                raise FormatError(f"{name}: corrupt offset table")
            keys = np.flatnonzero(sizes > 0)
            offsets = np.concatenate([dense[keys], [count]])
        else:
            nkeys = r.i64()
            keys = r.array("i8", nkeys)
            offsets = r.array("i8", nkeys + 1)
        ids = r.array("u4", count)
        r.done()
        if first.dim != dim or first.k != M:
            raise FormatError(f"{name}: first codebook disagrees with header")
        index = cls(kind, first, second, keys, offsets, ids)
        _check_structure(index, name)
        return index

    def save(self, path) -> None:
        _binio.write_file(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "TwoLevelIndex":
        return cls.from_bytes(_binio.read_file(path), str(path))


def _check_structure(index: TwoLevelIndex, name: str) -> None:
    if index.offsets.size != index.keys.size + 1 or (index.offsets.size and index.offsets[0] != 0) \
            or (index.offsets.size and index.offsets[-1] != index.count):
        raise FormatError(f"{name}: offsets do not cover the identity array")
    if np.any(np.diff(index.offsets) <= 0) or np.any(np.diff(index.keys) <= 0):
        raise FormatError(f"{name}: lists must be non-empty and keys strictly increasing")
    if index.keys.size and (index.keys[0] < 0 or index.keys[-1] >= index.M * index.N):
        raise FormatError(f"{name}: list key out of range")
    if index.count and np.any(np.bincount(index.ids, minlength=index.count) != 1):
        raise FormatError(f"{name}: identities are not a partition of [0, count)")


def _from_assignments(kind, first, second, m, n) -> TwoLevelIndex:
    N = second.k if kind == RVQ else second.num_codes
    flat = m.astype(np.int64) * N + n.astype(np.int64)
    order = np.argsort(flat, kind="stable")
    keys, counts = np.unique(flat[order], return_counts=True)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return TwoLevelIndex(kind, first, second, keys, offsets, order.astype(np.uint32))


def build_index(reference, M: int, N: int | None = None, kind: str = RVQ, seed=0,
                alpha: int | None = None, beta: int | None = None,
                opq_iters: int = 10, kmeans_iters: int = 25) -> TwoLevelIndex:
    """Train codebooks on ``reference`` and file every row into its (m, n) list.

    RVQ needs ``N``; OPQ needs ``alpha`` and ``beta`` (N = beta ** alpha).
    """
    x = np.asarray(reference, dtype=np.float64)
    if kind == RVQ:
        if N is None:
            raise ParameterError("RVQ index needs N")
        first, second = rvq_fit(x, M, N, seed, kmeans_iters)
        m, n = rvq_assign_all(first, second, x)
    elif kind == OPQ:
        if alpha is None or beta is None:
            raise ParameterError("OPQ index needs alpha and beta")
        ss = np.random.SeedSequence(seed).spawn(2)
        if x.shape[0] < M:
            raise ParameterError(f"need at least M={M} points, got {x.shape[0]}")
        first = kmeans_fit(x, M, kmeans_iters, np.random.default_rng(ss[0]))
        labels = assign_all(first, x)
        second = opq_fit(x - first.centroids[labels], alpha, beta, opq_iters, np.random.default_rng(ss[1]))
        m, n = opq_assign_all(first, second, x)
    else:
        raise ParameterError(f"unknown index kind {kind!r}")
    return _from_assignments(kind, first, second, m, n)


def audit(index: TwoLevelIndex, reference) -> list[str]:
    """Check partition and re-assignment invariants; returns a list of violations."""
    problems = []
    x = np.asarray(reference, dtype=np.float64)
    if x.shape[0] != index.count:
        return [f"reference count {x.shape[0]} != indexed count {index.count}"]
    if np.any(np.bincount(index.ids, minlength=index.count) != 1):
        problems.append("identities are not a partition")
    if index.cluster_sizes.sum() != index.count:
        problems.append("cluster sizes do not sum to the reference count")
    m, n = index.assignments()
    if index.kind == RVQ:
        m2, n2 = rvq_assign_all(index.first, index.second, x)
    else:
        m2, n2 = opq_assign_all(index.first, index.second, x)
    bad = np.flatnonzero((m != m2) | (n != n2))
    if bad.size:
        problems.append(f"{bad.size} points re-assign to a different (m, n), e.g. id {bad[0]}")
    return problems
