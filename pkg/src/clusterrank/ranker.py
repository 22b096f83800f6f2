"""Cluster-probability networks: features, training targets and a small NumPy MLP.

``f`` maps a query feature to first-level cluster probabilities, ``h`` maps
a (centroid, residual) pair to second-level probabilities shared across all
first-level clusters.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _binio
from .errors import FormatError, NumericError, ParameterError

log = logging.getLogger(__name__)

RAW, QCS, RAW_QCS, SECOND = "raw", "qcs", "raw_qcs", "second"
FEATURE_MODES = (RAW, QCS, RAW_QCS)
_MODE_TAGS = {RAW: 0, QCS: 1, RAW_QCS: 2, SECOND: 3}


def nn_weights(K: int, regime: str = "top1", k: int = 1, high: float | None = None) -> np.ndarray:
    """Per-rank ground-truth weights.

    ``top1``: w_1 = 100, the rest 1. ``topk``: w_1..w_k = 10, the rest 1.
    """
    w = np.ones(K)
    if regime == "top1":
        w[0] = 100.0 if high is None else high
    elif regime == "topk":
        w[:k] = 10.0 if high is None else high
    else:
        raise ParameterError(f"unknown weight regime {regime!r}")
    return w


# -- features ----------------------------------------------------------------

def qcs_features(queries, first) -> np.ndarray:
    """Query-centroid similarities (max(D) - d_m) / max(D) for each query row."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    c = first.centroids.astype(np.float64)
    if q.shape[1] != c.shape[1]:
        raise ParameterError(f"dimension mismatch: query {q.shape[1]} vs centroids {c.shape[1]}")
    q_sq = (q ** 2).sum(axis=1)[:, None]
    d = np.sqrt(np.maximum(q_sq - 2.0 * q @ c.T + (c ** 2).sum(axis=1)[None, :], 0.0))
    dmax = d.max(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(dmax > 0, (dmax - d) / dmax, 0.0)
    return a


def qcs_feature(q, first) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    c = first.centroids.astype(np.float64)
    if q.shape != (c.shape[1],):
        raise ParameterError(f"dimension mismatch: query {q.shape} vs centroids {c.shape[1]}")
    d = np.sqrt(((c - q) ** 2).sum(axis=1))
    dmax = d.max()
    if dmax == 0:
        return np.zeros_like(d)
    return (dmax - d) / dmax


def first_features(queries, mode: str, first) -> np.ndarray:
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if mode == RAW:
        return q
    if mode == QCS:
        return qcs_features(q, first)
    if mode == RAW_QCS:
        return np.hstack([q, qcs_features(q, first)])
    raise ParameterError(f"unknown feature mode {mode!r}")


def feature_width(mode: str, dim: int, M: int) -> int:
    return {RAW: dim, QCS: M, RAW_QCS: dim + M, SECOND: 2 * dim}[mode]


def h_feature(q, first, m: int) -> np.ndarray:
    if not 0 <= m < first.k:
        raise ParameterError(f"first-level id {m} outside [0, {first.k})")
    u = first.centroids[m].astype(np.float64)
    return np.concatenate([u, np.asarray(q, dtype=np.float64) - u])


def h_features(queries, first, ms) -> np.ndarray:
    u = first.centroids[np.asarray(ms)].astype(np.float64)
    return np.hstack([u, np.atleast_2d(np.asarray(queries, dtype=np.float64)) - u])


# -- training targets --------------------------------------------------------

def _check_gt(gt_ids, weights):
    gt_ids = np.atleast_2d(np.asarray(gt_ids))
    if gt_ids.shape[1] == 0:
        raise ParameterError("empty ground truth")
    weights = np.asarray(weights, dtype=np.float64)[:gt_ids.shape[1]]
    if weights.shape[0] < gt_ids.shape[1]:
        raise ParameterError("fewer weights than ground-truth neighbors")
    return gt_ids, weights


def first_targets_batch(gt_ids, weights, labels, cluster_sizes) -> np.ndarray:
    """Sum-to-one first-level targets for a batch of queries.

    ``labels[i]`` is the first-level cluster of reference point ``i``.
    y_m = W_m / (W_m + |C_m|) with W_m the weight of the query's NNs in C_m.
    """
    gt_ids, weights = _check_gt(gt_ids, weights)
    labels = np.asarray(labels)
    sizes = np.asarray(cluster_sizes, dtype=np.float64)
    T = gt_ids.shape[0]
    hit = np.zeros((T, sizes.shape[0]))
    np.add.at(hit, (np.repeat(np.arange(T), gt_ids.shape[1]), labels[gt_ids].ravel()),
              np.tile(weights, T))
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.where(hit > 0, hit / (hit + sizes), 0.0)
    return y / y.sum(axis=1, keepdims=True)


def first_targets(q, gt_row, weights, index) -> np.ndarray:
    labels = index.point_clusters()
    return first_targets_batch(np.asarray(gt_row)[None], weights, labels, index.cluster_sizes)[0]


def second_targets(q, gt_row, weights, index, m: int):
    """Second-level targets over all N subclusters of ``m``; ``None`` when no NN lies in C_m."""
    gt_row, weights = _check_gt(np.asarray(gt_row)[None], weights)
    ms, ns = index.assignments()
    g = gt_row[0]
    inside = ms[g] == m
    if not np.any(inside):
        return None
    hit = np.zeros(index.N)
    np.add.at(hit, ns[g[inside]], weights[inside])
    size = np.zeros(index.N)
    sub_n, sub_len = index.subclusters(m)
    size[sub_n] = sub_len
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.where(hit > 0, hit / (hit + size), 0.0)
    return y / y.sum()


def second_training_rows(gt_ids, weights, index, max_rows: int | None = None, seed=0):
    """Training pairs for ``h``: one row per (query, first-level cluster holding >= 1 of its NNs).

    Returns ``(query_rows, clusters, targets)``; all-zero rows never occur
    because only clusters with a ground-truth hit are emitted. When
    ``max_rows`` is set, a seeded uniform subset of the pairs is kept.
    """
    gt_ids, weights = _check_gt(gt_ids, weights)
    ms, ns = index.assignments()
    T, K = gt_ids.shape
    M, N = index.M, index.N
    pair = (np.repeat(np.arange(T, dtype=np.int64), K) * M + ms[gt_ids].ravel())
    keys, inverse = np.unique(pair, return_inverse=True)
    chosen = np.arange(keys.size)
    if max_rows is not None and keys.size > max_rows:
        chosen = np.sort(np.random.default_rng(seed).choice(keys.size, size=max_rows, replace=False))
    row_of = np.full(keys.size, -1, dtype=np.int64)
    row_of[chosen] = np.arange(chosen.size)
    rows = row_of[inverse]
    keep = rows >= 0
    hit = np.zeros((chosen.size, N))
    np.add.at(hit, (rows[keep], ns[gt_ids].ravel()[keep]), np.tile(weights, T)[keep])
    sel = keys[chosen]
    t_idx, m_idx = sel // M, sel % M
    dense = np.zeros(M * N)
    dense[index.keys] = np.diff(index.offsets)
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.where(hit > 0, hit / (hit + dense.reshape(M, N)[m_idx]), 0.0)
    return t_idx, m_idx, y / y.sum(axis=1, keepdims=True)


# -- network -----------------------------------------------------------------

@dataclass
class MlpModel:
    """Rectifier hidden layers, softmax output. Weights are (fan_in, fan_out)."""

    weights: list
    biases: list
    mode: str = RAW

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def astype(self, dtype) -> "MlpModel":
        return MlpModel([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases], self.mode)

    def __eq__(self, other):
        if not isinstance(other, MlpModel):
            return NotImplemented
        return self.mode == other.mode and len(self.weights) == len(other.weights) and all(
            np.array_equal(a, b) for a, b in zip(self.weights + self.biases, other.weights + other.biases))

    def to_bytes(self) -> bytes:
        sizes = self.layer_sizes
        out = [b"MLP1", _binio.i32(len(sizes)), _binio.i32(*sizes), _binio.i32(_MODE_TAGS[self.mode])]
        for w, b in zip(self.weights, self.biases):
            out += [_binio.arr(w, "f4"), _binio.arr(b, "f4")]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf, name="<model>") -> "MlpModel":
        r = _binio.Reader(buf, name)
        r.magic(b"MLP1")
        n = r.i32()
        if not 2 <= n <= 64:
            raise FormatError(f"{name}: implausible layer count {n}")
        sizes = [r.i32() for _ in range(n)]
        tag = r.i32()
        modes = {v: k for k, v in _MODE_TAGS.items()}
        if tag not in modes:
            raise FormatError(f"{name}: unknown feature-mode tag {tag}")
        ws, bs = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            ws.append(r.array("f4", a * b).reshape(a, b))
            bs.append(r.array("f4", b))
        r.done()
        return cls(ws, bs, modes[tag])

    def save(self, path):
        _binio.write_file(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "MlpModel":
        return cls.from_bytes(_binio.read_file(path), str(path))


def init_mlp(layer_sizes, seed=0, mode: str = RAW, dtype=np.float32) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for a, b in zip(layer_sizes[:-1], layer_sizes[1:]):
        lim = np.sqrt(6.0 / (a + b))
        ws.append(rng.uniform(-lim, lim, size=(a, b)).astype(dtype))
        bs.append(np.zeros(b, dtype=dtype))
    return MlpModel(ws, bs, mode)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mlp_logits(model: MlpModel, x) -> np.ndarray:
    h = np.asarray(x, dtype=model.weights[0].dtype)
    if h.shape[-1] != model.weights[0].shape[0]:
        raise ParameterError(f"input width {h.shape[-1]} != model input {model.weights[0].shape[0]}")
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i < last:
            np.maximum(h, 0, out=h)
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite logits in forward pass")
    return h


def mlp_forward(model: MlpModel, x) -> np.ndarray:
    """Probability vector(s) for one input row or a batch."""
    return softmax(mlp_logits(model, x))


def loss_and_grads(model: MlpModel, x, y):
    """Mean cross-entropy -sum y log p over the batch and its parameter gradients."""
    dtype = model.weights[0].dtype
    acts = [np.asarray(x, dtype=dtype)]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = acts[-1] @ w + b
        acts.append(np.maximum(a, 0) if i < last else a)
    z = acts[-1]
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    y = np.asarray(y, dtype=dtype)
    B = x.shape[0]
    loss = float(-(y * logp).sum() / B)
    delta = (np.exp(logp) * y.sum(axis=1, keepdims=True) - y) / B
    gw, gb = [None] * len(model.weights), [None] * len(model.weights)
    for i in range(last, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    return loss, gw, gb


def mlp_train(inputs, targets, hidden=(512, 512), epochs: int = 300, batch: int = 1000,
              lr: float = 0.01, momentum: float = 0.9, halve_every: int = 100, seed=0,
              mode: str = RAW, standardize: bool = True, on_epoch=None):
    """Mini-batch momentum SGD on cross-entropy.

    Inputs are standardized per column during training and the scaling is
    folded into the first layer afterwards, so the returned model takes raw
    features. Returns ``(model, epoch_losses)``; zero epochs returns the
    initialization untouched. ``on_epoch(epoch, loss, model)`` is called
    after every epoch with the model still in standardized-input form.
    """
    x = np.asarray(inputs, dtype=np.float32)
    y = np.asarray(targets, dtype=np.float32)
    if x.shape[0] == 0:
        raise ParameterError("empty training set")
    if x.shape[0] != y.shape[0]:
        raise ParameterError("inputs and targets have different row counts")
    rng = np.random.default_rng(seed)
    sizes = [x.shape[1], *hidden, y.shape[1]]
    model = init_mlp(sizes, rng.integers(2 ** 63), mode)
    if epochs == 0:
        return model, []
    mu = x.mean(axis=0) if standardize else np.zeros(x.shape[1], np.float32)
    sd = x.std(axis=0) if standardize else np.ones(x.shape[1], np.float32)
    sd = np.where(sd > 1e-12, sd, 1.0).astype(np.float32)
    xs = (x - mu) / sd
    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    losses = []
    n = x.shape[0]
    for epoch in range(epochs):
        step = lr * 0.5 ** (epoch // halve_every) if halve_every else lr
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            loss, gw, gb = loss_and_grads(model, xs[idx], y[idx])
            if not np.isfinite(loss):
                raise NumericError(f"loss became non-finite at epoch {epoch}")
            total += loss * idx.size
            for p, v, g in zip(model.weights + model.biases, vel_w + vel_b, gw + gb):
                v *= momentum
                v -= step * g
                p += v
        losses.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch, losses[-1], model)
    w0 = model.weights[0]
    model.biases[0] = (model.biases[0] - (mu / sd) @ w0).astype(np.float32)
    model.weights[0] = (w0 / sd[:, None]).astype(np.float32)
    return model, losses


def dataset_loss(model: MlpModel, x, y) -> float:
    return loss_and_grads(model, np.asarray(x), np.asarray(y))[0]


# -- prediction --------------------------------------------------------------

def predict_first(model: MlpModel, q, mode: str, first) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    feats = first_features(q, mode, first)
    if feats.shape[-1] != model.layer_sizes[0]:
        raise ParameterError(f"{mode} feature width {feats.shape[-1]} != model input {model.layer_sizes[0]}")
    p = mlp_forward(model, feats)
    return p[0] if q.ndim == 1 else p


def predict_second(model: MlpModel, q, first, m) -> np.ndarray:
    """Second-level probabilities; ``m`` may be one id or an array (one row per id)."""
    if model.layer_sizes[0] != 2 * first.dim:
        raise ParameterError(f"second-level model input {model.layer_sizes[0]} != 2 * dim ({2 * first.dim})")
    if np.ndim(m) == 0:
        return mlp_forward(model, h_feature(q, first, int(m)))
    ms = np.asarray(m)
    if ms.size and (ms.min() < 0 or ms.max() >= first.k):
        raise ParameterError("first-level id out of range")
    return mlp_forward(model, h_features(np.broadcast_to(q, (ms.size, first.dim)), first, ms))
