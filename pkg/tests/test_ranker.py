import numpy as np
import pytest
from hypothesis import given, strategies as st

from clusterrank.errors import NumericError, ParameterError
from clusterrank.quantizer import Codebook
from clusterrank.ranker import (MlpModel, dataset_loss, first_targets, first_targets_batch, h_feature, init_mlp,
                                loss_and_grads, mlp_forward, mlp_logits, mlp_train, nn_weights, predict_first,
                                predict_second, qcs_feature, qcs_features, second_targets, second_training_rows,
                                softmax)


def test_weights_regimes():
    assert nn_weights(4).tolist() == [100, 1, 1, 1]
    assert nn_weights(4, "topk", 2).tolist() == [10, 10, 1, 1]


def test_qcs_examples():
    cb = Codebook(np.array([[2, 0], [4, 0], [8, 0]], np.float32))
    assert np.allclose(qcs_feature(np.zeros(2), cb), [0.75, 0.5, 0.0])
    a = qcs_feature(np.array([4.0, 0]), cb)
    assert a[1] == 1 and a.min() == 0
    same = Codebook(np.ones((3, 2), np.float32))
    assert np.array_equal(qcs_feature(np.ones(2), same), np.zeros(3))
    assert np.allclose(qcs_features(np.zeros((1, 2)), cb)[0], [0.75, 0.5, 0.0])


class _ToyIndex:
    """Minimal index stand-in: explicit (m, n) labels per point."""

    def __init__(self, m, n, M, N):
        self.m, self.n, self.M, self.N = np.asarray(m), np.asarray(n), M, N
        self.cluster_sizes = np.bincount(self.m, minlength=M)
        flat = self.m * N + self.n
        self.keys, counts = np.unique(flat, return_counts=True)
        self.offsets = np.concatenate([[0], np.cumsum(counts)])

    def point_clusters(self):
        return self.m

    def assignments(self):
        return self.m, self.n

    def subclusters(self, m):
        sel = self.keys // self.N == m
        return self.keys[sel] % self.N, np.diff(self.offsets)[sel]


def test_first_targets_examples():
    ix = _ToyIndex([0] * 10 + [1] * 10, [0] * 20, 2, 1)
    # cluster 0 holds weight 100, cluster 1 weight 10 (ten NNs of weight 1)
    gt = [0] + list(range(10, 20))
    w = np.array([100.0] + [1.0] * 10)
    y = first_targets(None, gt, w, ix)
    raw = np.array([100 / 110, 10 / 20])
    assert np.allclose(y, raw / raw.sum(), atol=1e-12)
    assert y[0] == pytest.approx(0.645, abs=1e-3)
    one = first_targets(None, [0, 1, 2], np.ones(3), ix)
    assert one.tolist() == [1.0, 0.0]
    with pytest.raises(ParameterError):
        first_targets(None, [], np.ones(3), ix)


def test_empty_cluster_contributes_zero():
    y = first_targets_batch([[0, 1]], np.ones(2), np.array([2, 2]), np.array([0, 0, 2]))
    assert y.tolist() == [[0.0, 0.0, 1.0]]


def test_second_targets_examples():
    # cluster 0 has subclusters 0 (size 2), 1 (size 1), 7 (size 3); cluster 1 holds point 6
    ix = _ToyIndex([0, 0, 0, 0, 0, 0, 1], [0, 0, 1, 7, 7, 7, 0], 2, 8)
    y = second_targets(None, [3, 4], np.ones(2), ix, 0)
    assert y[7] == 1 and y.sum() == 1
    assert second_targets(None, [6], np.ones(1), ix, 0) is None
    w = np.array([5.0, 2.0, 1.0])
    y = second_targets(None, [0, 2, 3], w, ix, 0)
    raw = np.zeros(8)
    raw[0], raw[1], raw[7] = 5 / 7, 2 / 3, 1 / 4
    assert np.allclose(y, raw / raw.sum(), atol=1e-9)


def test_second_training_rows_match_single(small_index):
    rng = np.random.default_rng(0)
    gt = rng.integers(0, small_index.count, size=(20, 15))
    w = nn_weights(15)
    t, m, y = second_training_rows(gt, w, small_index)
    assert np.allclose(y.sum(axis=1), 1)
    for ti, mi, row in zip(t, m, y):
        assert np.allclose(row, second_targets(None, gt[ti], w, small_index, mi))
    t2, m2, y2 = second_training_rows(gt, w, small_index, max_rows=5, seed=1)
    assert len(t2) == 5


def test_h_feature_examples():
    cb = Codebook(np.random.default_rng(1).standard_normal((4, 3)).astype(np.float32))
    u = cb.centroids[2].astype(float)
    assert np.array_equal(h_feature(u, cb, 2), np.concatenate([u, np.zeros(3)]))
    q = np.array([0.3, -1.0, 2.0])
    f = h_feature(q, cb, 1)
    assert np.allclose(f[:3] + f[3:], q)
    assert not np.array_equal(h_feature(q, cb, 0)[:3], h_feature(q, cb, 3)[:3])
    with pytest.raises(ParameterError):
        h_feature(q, cb, 4)


def test_forward_examples():
    zero = MlpModel([np.zeros((3, 4)), np.zeros((4, 5))], [np.zeros(4), np.zeros(5)])
    assert np.allclose(mlp_forward(zero, np.ones(3)), 0.2)
    z = np.random.default_rng(2).standard_normal(6)
    assert np.allclose(softmax(z), softmax(z + 123.0), atol=1e-9)


def test_forward_toy_by_hand():
    w1 = np.array([[1.0, -1.0], [0.5, 2.0]])
    w2 = np.array([[1.0, 0.0], [0.0, 1.0]])
    w3 = np.array([[2.0, -1.0], [0.0, 1.0]])
    b1, b2, b3 = np.array([0.0, 0.5]), np.array([-1.0, 0.0]), np.array([0.1, 0.2])
    model = MlpModel([w1, w2, w3], [b1, b2, b3])
    x = np.array([1.0, 1.0])
    # layer 1: (1.5, 1.5); layer 2: (0.5, 1.5); logits: (1.1, 1.2)
    z = np.array([1.1, 1.2])
    expect = np.exp(z) / np.exp(z).sum()
    assert np.allclose(mlp_forward(model, x), expect, atol=1e-9)


def test_nonfinite_raises():
    m = init_mlp([2, 3, 2], dtype=np.float64)
    m.weights[0][0, 0] = np.inf
    with pytest.raises(NumericError):
        mlp_logits(m, np.ones(2))
    with pytest.raises(ParameterError):
        mlp_forward(init_mlp([2, 3, 2]), np.ones(3))


def _fd_check(seed, sizes=(4, 8, 8, 3), eps=1e-4):
    rng = np.random.default_rng(seed)
    model = init_mlp(list(sizes), seed=seed, dtype=np.float64)
    for b in model.biases:
        b[:] = rng.normal(0, 0.1, b.shape)
    x = rng.standard_normal((5, sizes[0]))
    y = rng.dirichlet(np.ones(sizes[-1]), 5)
    _, gw, gb = loss_and_grads(model, x, y)
    worst = 0.0
    for params, grads in ((model.weights, gw), (model.biases, gb)):
        for p, g in zip(params, grads):
            num = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + eps
                up = loss_and_grads(model, x, y)[0]
                p[idx] = old - eps
                down = loss_and_grads(model, x, y)[0]
                p[idx] = old
                num[idx] = (up - down) / (2 * eps)
            worst = max(worst, np.abs(num - g).max() / max(np.abs(num).max(), np.abs(g).max(), 1e-12))
    return worst


def test_gradient_finite_differences():
    assert _fd_check(0) < 1e-3


@given(st.integers(0, 2 ** 32 - 1), st.lists(st.integers(1, 6), min_size=1, max_size=3))
def test_softmax_rows_sum_to_one(seed, shape):
    z = np.random.default_rng(seed).standard_normal(shape) * 30
    p = softmax(z)
    assert np.all(p >= 0) and np.allclose(p.sum(axis=-1), 1, atol=1e-6)
    assert np.argmax(z, axis=-1).tolist() == np.argmax(p, axis=-1).tolist()


def test_repeated_pair_reaches_entropy_floor():
    y = np.array([[0.7, 0.2, 0.1]])
    x = np.ones((50, 4))
    model, losses = mlp_train(x, np.repeat(y, 50, axis=0), hidden=(8, 8), epochs=300, batch=50, seed=0)
    entropy = -(y * np.log(y)).sum()
    assert losses[-1] <= entropy * 1.1


def test_zero_epochs_is_initialization():
    x, y = np.ones((4, 3)), np.full((4, 2), 0.5)
    model, losses = mlp_train(x, y, hidden=(5, 5), epochs=0, seed=7)
    ref = init_mlp([3, 5, 5, 2], np.random.default_rng(7).integers(2 ** 63))
    assert losses == [] and model == ref


def test_training_deterministic_and_loss_decreasing():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((200, 5))
    lab = (x[:, 0] > 0).astype(int) + (x[:, 1] > 0)
    y = np.eye(3)[lab]
    a, la = mlp_train(x, y, hidden=(16, 16), epochs=30, batch=50, seed=4)
    b, lb = mlp_train(x, y, hidden=(16, 16), epochs=30, batch=50, seed=4)
    assert a == b and la == lb
    assert la[-1] < la[0]
    # standardization is folded into the first layer: the model takes raw features
    assert dataset_loss(a, x, y) < la[0]


def test_small_step_full_batch_monotone():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((64, 4))
    y = rng.dirichlet(np.ones(3), 64)
    _, losses = mlp_train(x, y, hidden=(8, 8), epochs=40, batch=64, lr=1e-3, momentum=0.0, seed=1)
    assert np.all(np.diff(losses) <= 1e-12)


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning", "ignore:invalid value:RuntimeWarning")
def test_nan_loss_reports_epoch():
    x = np.ones((4, 2))
    y = np.full((4, 2), 0.5)
    with pytest.raises(NumericError, match="epoch 0"):
        mlp_train(x, y, hidden=(3,), epochs=2, lr=1e300, batch=2, seed=0, standardize=False)


def test_predict_examples(small_index):
    first = small_index.first
    f = init_mlp([first.M if hasattr(first, "M") else first.k, 8, first.k], mode="qcs")
    p = predict_first(f, np.zeros(first.dim), "qcs", first)
    assert p.shape == (first.k,) and abs(p.sum() - 1) < 1e-6
    with pytest.raises(ParameterError):
        predict_first(init_mlp([3, 4, first.k]), np.zeros(first.dim), "raw", first)
    h = init_mlp([2 * first.dim, 8, small_index.N], mode="second")
    ph = predict_second(h, np.zeros(first.dim), first, 2)
    assert abs(ph.sum() - 1) < 1e-6
    assert predict_second(h, np.zeros(first.dim), first, np.array([0, 2])).shape == (2, small_index.N)
    with pytest.raises(ParameterError):
        predict_second(init_mlp([3, 4, 5]), np.zeros(first.dim), first, 0)


def test_probabilities_overlap_targets_better_than_distance():
    # separable toy: cluster sizes differ a lot, so the NN mass is not where the nearest centroid is
    rng = np.random.default_rng(6)
    from clusterrank.evalbench import build_ground_truth
    from clusterrank.index import build_index
    big = rng.normal(0, 1.0, size=(1500, 2))
    small = rng.normal([2.2, 0], 0.05, size=(60, 2))
    x = np.vstack([big, small])
    ix = build_index(x, 12, 2, "rvq", seed=0)
    train = rng.choice(len(x), 600, replace=False)
    gt = build_ground_truth(x, x[train], 20, exclude=train)
    w = nn_weights(20)
    y = first_targets_batch(gt.ids, w, ix.point_clusters(), ix.cluster_sizes)
    model, _ = mlp_train(x[train], y, hidden=(32, 32), epochs=150, batch=100, seed=0, mode="raw")
    R = 2
    target_top = np.argsort(-y, axis=1)[:, :R]
    prob_top = np.argsort(-predict_first(model, x[train], "raw", ix.first), axis=1)[:, :R]
    d = ((x[train][:, None, :] - ix.first.centroids[None].astype(float)) ** 2).sum(-1)
    dist_top = np.argsort(d, axis=1)[:, :R]

    def overlap(a):
        return np.mean([len(set(r) & set(t)) for r, t in zip(a, target_top)])

    assert overlap(prob_top) > overlap(dist_top)


def test_model_roundtrip(tmp_path):
    m = init_mlp([3, 4, 2], seed=1, mode="raw_qcs")
    m.save(tmp_path / "m.mlp")
    assert MlpModel.load(tmp_path / "m.mlp") == m
    assert (tmp_path / "m.mlp").read_bytes()[:4] == b"MLP1"
