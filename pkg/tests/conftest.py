import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from clusterrank.dataio import gen_synthetic
from clusterrank.index import build_index
from clusterrank.pqcodec import pq_encode, pq_fit

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_data():
    # 12 modes x 100 points in 16-d
    return gen_synthetic(12, 100, 16, 0.08, seed=3).data.astype(np.float64)


@pytest.fixture(scope="session")
def small_index(small_data):
    return build_index(small_data, 8, 8, "rvq", seed=1)


@pytest.fixture(scope="session")
def small_opq(small_data):
    return build_index(small_data, 6, kind="opq", seed=2, alpha=2, beta=4, opq_iters=3)


@pytest.fixture(scope="session")
def small_pq(small_data):
    codec = pq_fit(small_data, 4, 16, seed=5)
    return codec, pq_encode(codec, small_data)


@pytest.fixture(scope="session")
def small_models(small_data, small_index):
    """Tiny f (every feature mode) and h networks trained on the small index."""
    from clusterrank.evalbench import build_ground_truth
    from clusterrank.ranker import (FEATURE_MODES, first_features, first_targets_batch, h_features, mlp_train,
                                    nn_weights, second_training_rows)
    from clusterrank.search import Models
    rng = np.random.default_rng(0)
    train = np.sort(rng.choice(len(small_data), 400, replace=False))
    gt = build_ground_truth(small_data, small_data[train], 20, exclude=train)
    w = nn_weights(20)
    y = first_targets_batch(gt.ids, w, small_index.point_clusters(), small_index.cluster_sizes)
    models = Models()
    for mode in FEATURE_MODES:
        feats = first_features(small_data[train], mode, small_index.first)
        models.f[mode], _ = mlp_train(feats, y, hidden=(16, 16), epochs=20, batch=100, seed=1, mode=mode)
    t, m, ys = second_training_rows(gt.ids, w, small_index)
    models.h, _ = mlp_train(h_features(small_data[train][t], small_index.first, m), ys, hidden=(16, 16),
                            epochs=20, batch=100, seed=2, mode="second")
    return models


@pytest.fixture(scope="session")
def small_queries(small_data):
    rng = np.random.default_rng(11)
    return small_data[rng.choice(len(small_data), 40, replace=False)] + rng.normal(0, 0.03, (40, small_data.shape[1]))


_verdicts = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_verdicts] = []


@pytest.fixture
def verdict(request, capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[_verdicts].append((number, line))
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_verdicts, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
