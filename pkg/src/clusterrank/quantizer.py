"""Codebook training: k-means, two-level residual VQ and residual OPQ."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _binio
from .errors import ParameterError
from .linalg import nearest, procrustes


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray  # k x dim, float32
    distortion_history: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float32)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ParameterError(f"codebook needs k >= 1 rows, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ParameterError("codebook contains NaN/Inf")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return np.array_equal(self.centroids, other.centroids)

    def to_bytes(self) -> bytes:
        return b"CBK1" + _binio.i32(self.k, self.dim) + _binio.arr(self.centroids, "f4")

    @classmethod
    def read(cls, r: _binio.Reader) -> "Codebook":
        r.magic(b"CBK1")
        k, dim = r.i32(), r.i32()
        return cls(r.array("f4", k * dim).reshape(k, dim))

    @classmethod
    def from_bytes(cls, buf, name="<codebook>") -> "Codebook":
        r = _binio.Reader(buf, name)
        cb = cls.read(r)
        r.done()
        return cb


def _plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = min(int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right")), n - 1)
        else:
            # every point coincides with a chosen seed; pick any unchosen row
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        np.minimum(closest, ((x - x[idx]) ** 2).sum(axis=1), out=closest)
    return x[chosen].copy()


def _fast_labels(x: np.ndarray, c: np.ndarray, chunk: int = 16384) -> np.ndarray:
    # |x|^2 is constant per row, so argmin of |c|^2 - 2 x.c picks the same centroid
    half_sq = 0.5 * (c ** 2).sum(axis=1)
    labels = np.empty(x.shape[0], dtype=np.int64)
    for i in range(0, x.shape[0], chunk):
        d = x[i:i + chunk] @ c.T
        np.subtract(half_sq, d, out=d)
        labels[i:i + chunk] = np.argmin(d, axis=1)
    return labels


def _cluster_sums(x: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    return np.stack([np.bincount(labels, weights=x[:, j], minlength=k) for j in range(x.shape[1])], axis=1)


def lloyd(data, k: int, max_iters: int, seed, init=None):
    """Lloyd iterations from k-means++ (or ``init``) seeds.

    Returns ``(centroids, labels, history)`` where ``history[t]`` is the mean
    squared distortion of the assignment made at step ``t``.
    """
    x = np.asarray(data, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or n < k:
        raise ParameterError(f"k-means needs 1 <= k <= count, got k={k}, count={n}")
    shift = x.mean(axis=0)
    x = x - shift  # centering keeps the expanded-distance form well conditioned
    rng = np.random.default_rng(seed)
    c = _plusplus(x, k, rng) if init is None else np.asarray(init, dtype=np.float64) - shift
    labels = None
    history = []
    for _ in range(max_iters + 1):
        new_labels = _fast_labels(x, c)
        resid = ((x - c[new_labels]) ** 2).sum(axis=1)
        history.append(float(resid.mean()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        if len(history) > max_iters:
            break
        counts = np.bincount(labels, minlength=k)
        sums = _cluster_sums(x, labels, k)
        filled = counts > 0
        c[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            far = ((x - c[labels]) ** 2).sum(axis=1)
            donors = np.argsort(-far, kind="stable")[:empty.size]
            c[empty] = x[donors]
    return c + shift, labels, history


def kmeans_fit(data, k: int, max_iters: int = 25, seed=0, init=None) -> Codebook:
    c, _, history = lloyd(data, k, max_iters, seed, init=init)
    return Codebook(c.astype(np.float32), tuple(history))


def assign(codebook: Codebook, v) -> int:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (codebook.dim,):
        raise ParameterError(f"dimension mismatch: vector {v.shape} vs codebook dim {codebook.dim}")
    d = ((codebook.centroids.astype(np.float64) - v) ** 2).sum(axis=1)
    return int(np.argmin(d))


def assign_all(codebook: Codebook, data) -> np.ndarray:
    x = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if x.shape[1] != codebook.dim:
        raise ParameterError(f"dimension mismatch: data {x.shape[1]} vs codebook dim {codebook.dim}")
    return nearest(x, codebook.centroids)[0]


def distortion(codebook: Codebook, data) -> float:
    x = np.asarray(data, dtype=np.float64)
    labels = assign_all(codebook, x)
    return float(((x - codebook.centroids[labels]) ** 2).sum(axis=1).mean())


# -- residual vector quantization ------------------------------------------

def rvq_fit(data, M: int, N: int, seed=0, max_iters: int = 25) -> tuple[Codebook, Codebook]:
    x = np.asarray(data, dtype=np.float64)
    if x.shape[0] < max(M, N):
        raise ParameterError(f"need at least max(M, N)={max(M, N)} points, got {x.shape[0]}")
    ss = np.random.SeedSequence(seed).spawn(2)
    first = kmeans_fit(x, M, max_iters, np.random.default_rng(ss[0]))
    labels = assign_all(first, x)
    residuals = x - first.centroids[labels]
    second = kmeans_fit(residuals, N, max_iters, np.random.default_rng(ss[1]))
    return first, second


def rvq_assign2(first: Codebook, residual: Codebook, v) -> tuple[int, int]:
    m = assign(first, v)
    n = assign(residual, np.asarray(v, dtype=np.float64) - first.centroids[m])
    return m, n


def rvq_assign_all(first: Codebook, residual: Codebook, data) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(data, dtype=np.float64)
    m = assign_all(first, x)
    n = assign_all(residual, x - first.centroids[m])
    return m, n


# -- optimized product quantization of residuals ----------------------------

def pack_code(sub_ids, beta: int) -> int:
    """Mixed-radix packing; the first subspace is the most significant digit."""
    n = 0
    for j in sub_ids:
        if not 0 <= j < beta:
            raise ParameterError(f"sub-codeword id {j} outside [0, {beta})")
        n = n * beta + int(j)
    return n


def unpack_code(n: int, alpha: int, beta: int) -> tuple[int, ...]:
    if not 0 <= n < beta ** alpha:
        raise ParameterError(f"code {n} outside [0, {beta ** alpha})")
    digits = []
    for _ in range(alpha):
        n, j = divmod(n, beta)
        digits.append(j)
    return tuple(reversed(digits))


def pack_codes(sub_ids: np.ndarray, beta: int) -> np.ndarray:
    sub_ids = np.asarray(sub_ids, dtype=np.int64)
    out = np.zeros(sub_ids.shape[0], dtype=np.int64)
    for s in range(sub_ids.shape[1]):
        out = out * beta + sub_ids[:, s]
    return out


def unpack_codes(codes, alpha: int, beta: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64).copy()
    out = np.empty((codes.shape[0], alpha), dtype=np.int64)
    for s in range(alpha - 1, -1, -1):
        codes, out[:, s] = np.divmod(codes, beta)
    return out


@dataclass(frozen=True)
class OpqResidualCodec:
    """Rotation plus alpha sub-codebooks of beta codewords over the residual space."""

    rotation: np.ndarray  # dim x dim; rotated residual = rotation @ e
    sub_codebooks: tuple  # alpha Codebooks, each beta x (dim / alpha)
    distortion_history: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float32)
        rot.setflags(write=False)
        object.__setattr__(self, "rotation", rot)

    @property
    def dim(self) -> int:
        return self.rotation.shape[0]

    @property
    def alpha(self) -> int:
        return len(self.sub_codebooks)

    @property
    def beta(self) -> int:
        return self.sub_codebooks[0].k

    @property
    def sub_dim(self) -> int:
        return self.dim // self.alpha

    @property
    def num_codes(self) -> int:
        return self.beta ** self.alpha

    def __eq__(self, other):
        if not isinstance(other, OpqResidualCodec):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and all(a == b for a, b in zip(self.sub_codebooks, other.sub_codebooks)))

    def rotate(self, residuals) -> np.ndarray:
        return np.asarray(residuals, dtype=np.float64) @ self.rotation.astype(np.float64).T

    def encode_rotated(self, rotated) -> np.ndarray:
        rotated = np.atleast_2d(rotated)
        w = self.sub_dim
        ids = np.stack([nearest(rotated[:, s * w:(s + 1) * w], cb.centroids)[0]
                        for s, cb in enumerate(self.sub_codebooks)], axis=1)
        return ids

    def decode_rotated(self, sub_ids) -> np.ndarray:
        sub_ids = np.atleast_2d(sub_ids)
        return np.hstack([cb.centroids[sub_ids[:, s]].astype(np.float64)
                          for s, cb in enumerate(self.sub_codebooks)])

    def residual_centroid(self, n: int) -> np.ndarray:
        """Codeword for packed code ``n`` mapped back to the residual space."""
        rotated = self.decode_rotated(np.array([unpack_code(n, self.alpha, self.beta)]))[0]
        return self.rotation.astype(np.float64).T @ rotated

    def to_bytes(self) -> bytes:
        out = [b"OPQ1", _binio.i32(self.dim, self.alpha, self.beta), _binio.arr(self.rotation, "f4")]
        out += [cb.to_bytes() for cb in self.sub_codebooks]
        return b"".join(out)

    @classmethod
    def read(cls, r: _binio.Reader) -> "OpqResidualCodec":
        r.magic(b"OPQ1")
        dim, alpha, beta = r.i32(), r.i32(), r.i32()
        rot = r.array("f4", dim * dim).reshape(dim, dim)
        subs = tuple(Codebook.read(r) for _ in range(alpha))
        if any(cb.k != beta or cb.dim * alpha != dim for cb in subs):
            from .errors import FormatError
            raise FormatError(f"{r.name}: sub-codebook shapes disagree with OPQ header")
        return cls(rot, subs)


def _subspace_kmeans(rotated, alpha, beta, iters, rng, init=None):
    w = rotated.shape[1] // alpha
    subs = []
    for s in range(alpha):
        start = None if init is None else init[s].centroids
        subs.append(kmeans_fit(rotated[:, s * w:(s + 1) * w], beta, iters,
                               np.random.default_rng(rng.integers(2 ** 63)), init=start))
    return tuple(subs)


def opq_fit(residuals, alpha: int, beta: int, iters: int, seed=0, kmeans_iters: int = 10,
            on_iter=None) -> OpqResidualCodec:
    """Non-parametric OPQ: alternate sub-codebook k-means and a Procrustes rotation update.

    ``distortion_history[t]`` is the mean squared quantization error of the
    codec after full iteration ``t`` (rotation and codebooks as they stand).
    ``on_iter(t, codec)`` sees that codec after every iteration.
    """
    e = np.asarray(residuals, dtype=np.float64)
    n, dim = e.shape
    if alpha < 1 or dim % alpha:
        raise ParameterError(f"dimension {dim} not divisible by alpha={alpha}")
    if beta < 1 or n < beta:
        raise ParameterError(f"need at least beta={beta} residuals, got {n}")
    rng = np.random.default_rng(seed)
    rot = np.eye(dim, dtype=np.float32)
    subs = _subspace_kmeans(e, alpha, beta, kmeans_iters, rng)
    history = []
    for _ in range(iters):
        rotated = e @ rot.astype(np.float64).T
        subs = _subspace_kmeans(rotated, alpha, beta, kmeans_iters, rng, init=subs)
        codec = OpqResidualCodec(rot, subs)
        quantized = codec.decode_rotated(codec.encode_rotated(rotated))
        rot = procrustes(e, quantized).astype(np.float32)
        codec = OpqResidualCodec(rot, subs)
        rotated = codec.rotate(e)
        err = rotated - codec.decode_rotated(codec.encode_rotated(rotated))
        history.append(float((err ** 2).sum(axis=1).mean()))
        if on_iter is not None:
            on_iter(len(history) - 1, codec)
    return OpqResidualCodec(rot, subs, tuple(history))


def opq_assign2(first: Codebook, codec: OpqResidualCodec, v) -> tuple[int, int]:
    m = assign(first, v)
    e = np.asarray(v, dtype=np.float64) - first.centroids[m]
    if e.shape != (codec.dim,):
        raise ParameterError(f"dimension mismatch: {e.shape} vs codec dim {codec.dim}")
    sub_ids = codec.encode_rotated(codec.rotate(e[None]))[0]
    return m, pack_code(sub_ids, codec.beta)


def opq_assign_all(first: Codebook, codec: OpqResidualCodec, data) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(data, dtype=np.float64)
    m = assign_all(first, x)
    sub_ids = codec.encode_rotated(codec.rotate(x - first.centroids[m]))
    return m, pack_codes(sub_ids, codec.beta)
