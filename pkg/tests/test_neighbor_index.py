import time

import numpy as np
import pytest

from src.core.errors import DimensionMismatch, TooFewRows
from src.core.inducing import InducingSet, KernelParams, save_inducing_set
from src.core.neighbor_index import IndexKind, append_index, build_index, load_index, query_knn, search


def _inducing(rng, M=200, d=4):
    return InducingSet(0, rng.normal(size=(M, d)), KernelParams(1.0, np.ones(d)))


def test_exact_matches_brute_force(rng):
    ind = _inducing(rng)
    idx = build_index(ind)
    for _ in range(10):
        z = rng.normal(size=4)
        ids, d2 = search(idx, z, 7)
        brute = np.argsort(((ind.Z - z) ** 2).sum(axis=1), kind="stable")[:7]
        assert ids.tolist() == brute.tolist()
        assert np.all(np.diff(d2) >= 0)


def test_exact_results_do_not_depend_on_row_order(rng):
    ind = _inducing(rng, M=60, d=3)
    perm = rng.permutation(60)
    shuffled = InducingSet(0, ind.Z[perm], ind.params)
    idx, idx_shuffled = build_index(ind), build_index(shuffled)
    for _ in range(10):
        z = rng.normal(size=3)
        ids, d2 = search(idx, z, 8)
        ids_shuffled, d2_shuffled = search(idx_shuffled, z, 8)
        assert perm[ids_shuffled].tolist() == ids.tolist()
        assert np.array_equal(d2_shuffled, d2)


def test_ties_broken_by_id():
    Z = np.array([[1.0], [-1.0], [1.0], [3.0]])
    idx = build_index(InducingSet(0, Z, KernelParams(1.0, np.ones(1))))
    assert [i for i, _ in query_knn(idx, np.zeros(1), 3)] == [0, 1, 2]
    assert query_knn(idx, np.zeros(1), 1)[0][1] == pytest.approx(1.0)


def test_query_on_inducing_row_returns_itself(rng):
    ind = _inducing(rng)
    for kind in IndexKind:
        idx = build_index(ind, kind)
        ids, d2 = search(idx, ind.Z[17], 1)
        assert ids[0] == 17 and d2[0] == 0.0


def test_ivf_recall_against_exact(rng):
    ind = _inducing(rng, M=900, d=2)
    exact, ivf = build_index(ind), build_index(ind, "ivf", n_probe=8)
    assert ivf.n_lists == 30
    hits = 0
    for _ in range(30):
        z = rng.normal(size=2)
        hits += len(set(search(exact, z, 20)[0]) & set(search(ivf, z, 20)[0]))
    assert hits / (30 * 20) >= 0.95


def test_ivf_widens_probe_for_large_k(rng):
    ind = _inducing(rng, M=50, d=2)
    idx = build_index(ind, "ivf", n_probe=1)
    ids, _ = search(idx, rng.normal(size=2), 50)
    assert sorted(ids.tolist()) == list(range(50))


def test_search_errors(rng):
    idx = build_index(_inducing(rng, M=10))
    with pytest.raises(TooFewRows):
        search(idx, np.zeros(4), 11)
    with pytest.raises(DimensionMismatch):
        search(idx, np.zeros(3), 1)
    with pytest.raises(TooFewRows):
        build_index(_inducing(rng, M=10), "ivf", n_lists=11)


def test_index_section_persists(tmp_path, rng):
    ind = _inducing(rng, M=100)
    path = save_inducing_set(ind, tmp_path / "i.gapaind")
    assert load_index(path, ind) is None
    ivf = build_index(ind, "ivf", seed=4)
    append_index(path, ivf)
    loaded = load_index(path, ind)
    assert loaded.kind is IndexKind.COARSE_IVF and loaded.n_lists == ivf.n_lists
    z = rng.normal(size=4)
    assert np.array_equal(search(loaded, z, 5)[0], search(ivf, z, 5)[0])


def _manifold_sampler(rng, d=32):
    """Rows on a 2-D manifold embedded in d dimensions, like cached activations."""
    A = rng.normal(size=(2, d))
    return lambda m: np.tanh(rng.uniform(-2, 2, (m, 2)) @ A)


def _query_seconds(idx, queries, K, repeats=5):
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        for z in queries:
            search(idx, z, K)
        best = min(best, time.perf_counter() - start)
    return best / len(queries)


@pytest.mark.slow
def test_query_cost_scaling_and_recall():
    rng = np.random.default_rng(21)
    sample = _manifold_sampler(rng)
    queries = sample(200)
    seconds, recall = {}, []
    for M in (10_000, 20_000):
        ind = InducingSet(0, sample(M), KernelParams(1.0, np.ones(32)))
        exact, ivf = build_index(ind), build_index(ind, "ivf", max_iters=10)
        seconds[M] = (_query_seconds(exact, queries, 50), _query_seconds(ivf, queries, 50))
        for z in queries[:50]:
            recall.append(len(set(search(exact, z, 50)[0]) & set(search(ivf, z, 50)[0])) / 50)
    exact_growth = seconds[20_000][0] / seconds[10_000][0]
    ivf_growth = seconds[20_000][1] / seconds[10_000][1]
    assert ivf_growth < 1.6
    assert exact_growth >= 1.8
    assert np.mean(recall) >= 0.95
