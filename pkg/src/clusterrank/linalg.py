"""Distance kernels, PCA and the orthogonal Procrustes solve."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import _binio
from .errors import ParameterError


def squared_l2(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(diff @ diff)


def pairwise_sq(x, y, chunk: int = 8192) -> np.ndarray:
    """Squared distances between every row of ``x`` and every row of ``y`` (float64).

    Each entry is summed from explicit coordinate differences, so exact ties
    stay exact.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise ParameterError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] <= chunk:
        return cdist(x, y, "sqeuclidean")
    return np.vstack([cdist(x[i:i + chunk], y, "sqeuclidean") for i in range(0, x.shape[0], chunk)])


def nearest(x, centroids, chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """Index of and squared distance to the nearest centroid per row; ties -> lowest id."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.empty(x.shape[0], dtype=np.int64)
    dists = np.empty(x.shape[0], dtype=np.float64)
    for i in range(0, x.shape[0], chunk):
        d = pairwise_sq(x[i:i + chunk], centroids)
        labels[i:i + chunk] = np.argmin(d, axis=1)
        dists[i:i + chunk] = d[np.arange(d.shape[0]), labels[i:i + chunk]]
    return labels, dists


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # out_dim x dim, rows orthonormal
    explained_variance: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    @property
    def out_dim(self) -> int:
        return self.components.shape[0]

    def to_bytes(self) -> bytes:
        return (b"PCA1" + _binio.i32(self.dim, self.out_dim)
                + _binio.arr(self.mean, "f4") + _binio.arr(self.components, "f4"))

    @classmethod
    def from_bytes(cls, buf: bytes, name="<pca>") -> "PcaModel":
        r = _binio.Reader(buf, name)
        r.magic(b"PCA1")
        dim, out_dim = r.i32(), r.i32()
        mean = r.array("f4", dim)
        comps = r.array("f4", dim * out_dim).reshape(out_dim, dim)
        r.done()
        return cls(mean, comps)

    def save(self, path) -> None:
        _binio.write_file(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "PcaModel":
        return cls.from_bytes(_binio.read_file(path), str(path))


def _fix_signs(vecs: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip each row so its first non-negligible entry is positive."""
    vecs = vecs.copy()
    for row in vecs:
        nz = np.flatnonzero(np.abs(row) > tol)
        if nz.size and row[nz[0]] < 0:
            row *= -1
    return vecs


def pca_fit(data, out_dim: int) -> PcaModel:
    x = np.asarray(data, dtype=np.float64)
    n, dim = x.shape
    if out_dim < 1 or out_dim > dim:
        raise ParameterError(f"out_dim must be in [1, {dim}], got {out_dim}")
    if n < out_dim:
        raise ParameterError(f"need at least out_dim={out_dim} rows, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:out_dim]
    comps = _fix_signs(evecs[:, order].T)
    return PcaModel(mean.astype(np.float32), comps.astype(np.float32), np.maximum(evals[order], 0.0))


def pca_transform(model: PcaModel, data) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ParameterError(f"dimension mismatch: data {x.shape[-1]} vs model {model.dim}")
    out = (x - model.mean.astype(np.float64)) @ model.components.astype(np.float64).T
    return out.astype(np.float32)


def pca_inverse(model: PcaModel, coords) -> np.ndarray:
    y = np.asarray(coords, dtype=np.float64)
    return y @ model.components.astype(np.float64) + model.mean.astype(np.float64)


def procrustes(x, y) -> np.ndarray:
    """Orthonormal R minimizing sum_i ||R x_i - y_i||^2 over rows x_i, y_i.

    R = U V^T from the SVD y^T x = U S V^T. All-zero inputs give the identity
    (with a RuntimeWarning).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[0] < 1:
        raise ParameterError(f"procrustes needs equal n x d inputs, got {x.shape} and {y.shape}")
    cross = y.T @ x
    if not np.any(cross):
        warnings.warn("procrustes: degenerate zero cross-covariance, returning identity", RuntimeWarning)
        return np.eye(x.shape[1])
    u, _, vt = np.linalg.svd(cross)
    return u @ vt


def random_orthonormal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))
