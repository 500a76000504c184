import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cctransfer import kmeans
from cctransfer.kmeans import Codebook, KMeansConfig
from cctransfer.rng import Rng


def brute_assign(X, centers):
    out = []
    for x in X:
        best, best_d = 0, math.inf
        for c, m in enumerate(centers):
            d = float(np.sum((x - m) ** 2))
            if d < best_d:
                best, best_d = c, d
        out.append(best)
    return np.array(out)


def brute_inertia(X, centers):
    return sum(min(float(np.sum((x - m) ** 2)) for m in centers) for x in X)


def cb_of(centers):
    return Codebook(np.asarray(centers, dtype=float), 0.0, 0, True, ())


def test_rng_reference_vectors():
    r = Rng.from_state([1, 2, 3, 4])
    assert [r.next_u64() for _ in range(4)] == [11520, 0, 1509978240, 1215971899390074240]
    from cctransfer.rng import splitmix64
    assert splitmix64(0)[1] == 0xE220A8397B1DCDAF


def test_rng_streams_deterministic():
    assert [Rng(5).next_u64() for _ in range(3)] == [Rng(5).next_u64() for _ in range(3)]
    assert Rng.substream(5, 0).next_u64() != Rng.substream(5, 1).next_u64()


def test_config_validation():
    for bad in (dict(k=0), dict(max_iters=0), dict(tol=-1.0)):
        with pytest.raises(ValueError):
            KMeansConfig(**bad)


def test_init_single_point():
    cb = kmeans.kmeanspp_init(np.array([[5.0, 5.0]]), KMeansConfig(k=1), Rng(0))
    assert cb.centers.tolist() == [[5.0, 5.0]]


def test_init_duplicates_fallback():
    X = np.array([[1.0, 1.0], [1.0, 1.0]])
    a = kmeans.kmeanspp_init(X, KMeansConfig(k=2), Rng(3))
    b = kmeans.kmeanspp_init(X, KMeansConfig(k=2), Rng(3))
    assert a.centers.tolist() == b.centers.tolist() == [[1.0, 1.0], [1.0, 1.0]]


def test_init_too_many_clusters():
    with pytest.raises(ValueError):
        kmeans.kmeanspp_init(np.zeros((2, 1)), KMeansConfig(k=3), Rng(0))


@pytest.mark.parametrize("seed", range(25))
def test_init_separated_pairs(seed, rng):
    # two groups of 5 points, spread 1, separation 100
    X = np.vstack([rng.normal(0, 1, (5, 2)), rng.normal(0, 1, (5, 2)) + [100.0, 0.0]])
    cb = kmeans.kmeanspp_init(X, KMeansConfig(k=2), Rng(seed))
    sides = sorted(int(c[0] > 50) for c in cb.centers)
    assert sides == [0, 1]


def test_fit_two_points():
    cb = kmeans.lloyd_fit(np.array([[0.0, 0.0], [2.0, 0.0]]), KMeansConfig(k=1), Rng(0))
    assert cb.centers.tolist() == [[1.0, 0.0]]
    assert cb.inertia == 2.0


def exhaustive_best_2partition(X):
    best = math.inf
    n = len(X)
    for mask in range(1, 2 ** n - 1):
        groups = [X[[i for i in range(n) if (mask >> i) & 1 == g]] for g in (0, 1)]
        best = min(best, sum(float(np.sum((g - g.mean(axis=0)) ** 2)) for g in groups))
    return best


@pytest.mark.parametrize("seed", range(10))
def test_fit_global_optimum_1d(seed):
    X = np.array([[0.0], [1.0], [10.0], [11.0]])
    cb = kmeans.lloyd_fit(X, KMeansConfig(k=2, seed=seed), Rng(seed))
    assert sorted(cb.centers[:, 0].tolist()) == [0.5, 10.5]
    assert cb.inertia == 1.0 == exhaustive_best_2partition(X)


def test_k_equals_n(rng):
    X = rng.normal(size=(7, 3))
    cb = kmeans.lloyd_fit(X, KMeansConfig(k=7), Rng(1))
    assert cb.inertia == 0.0
    assert sorted(map(tuple, cb.centers)) == sorted(map(tuple, X))


@given(st.integers(0, 10_000), st.integers(5, 60), st.integers(1, 6), st.integers(1, 5))
def test_fit_properties(seed, n, d, k):
    X = np.random.default_rng(seed).normal(size=(n, d))
    cb = kmeans.lloyd_fit(X, KMeansConfig(k=k, max_iters=50, tol=0.0), Rng(seed))
    hist = cb.inertia_history
    assert all(b <= a for a, b in zip(hist, hist[1:]))
    assert cb.inertia >= 0
    assert math.isclose(cb.inertia, brute_inertia(X, cb.centers), rel_tol=1e-12, abs_tol=1e-12)
    np.testing.assert_array_equal(kmeans.assign(X, cb).labels, brute_assign(X, cb.centers))


def test_assign_examples():
    cb = cb_of([[0, 0], [10, 10]])
    assert kmeans.assign(np.array([[1.0, 1.0]]), cb).labels.tolist() == [0]
    cb = cb_of([[-1, 0], [1, 0]])
    lv = kmeans.assign(np.array([[0.0, 5.0]]), cb)
    assert lv.labels.tolist() == [0] and lv.n_classes == 2


def test_assign_dim_mismatch():
    with pytest.raises(ValueError):
        kmeans.assign(np.zeros((3, 2)), cb_of([[0, 0, 0]]))


@given(st.integers(0, 10_000))
def test_assign_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(200, 8))
    centers = r.normal(size=(5, 8))
    np.testing.assert_array_equal(kmeans.assign(X, cb_of(centers)).labels, brute_assign(X, centers))


def test_assign_ties_on_integer_grid():
    X = np.array([[x, y] for x in range(-3, 4) for y in range(-3, 4)], dtype=float)
    centers = [[0, 0], [2, 0], [0, 2], [2, 2]]
    np.testing.assert_array_equal(kmeans.assign(X, cb_of(centers)).labels, brute_assign(X, np.array(centers)))


def test_threads_bit_identical(rng):
    X = rng.normal(size=(3000, 6))
    cfg = KMeansConfig(k=12, seed=4)
    a = kmeans.lloyd_fit(X, cfg, Rng(4), threads=1)
    b = kmeans.lloyd_fit(X, cfg, Rng(4), threads=8)
    assert a.centers.tobytes() == b.centers.tobytes()
    assert a.inertia == b.inertia and a.inertia_history == b.inertia_history
    assert kmeans.assign(X, a, threads=1).labels.tobytes() == kmeans.assign(X, a, threads=8).labels.tobytes()


@given(st.integers(0, 10_000))
def test_permutation_invariance_with_explicit_init(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(40, 3))
    init = X[:4].copy()
    cfg = KMeansConfig(k=4, max_iters=30, tol=0.0)
    a = kmeans.lloyd_fit(X, cfg, init_centers=init)
    b = kmeans.lloyd_fit(X[r.permutation(40)], cfg, init_centers=init)
    assert a.centers.tobytes() == b.centers.tobytes()


def test_nearest_to_center(rng):
    X = rng.normal(size=(50, 4))
    cb = cb_of(X[[3, 10]])
    hits = kmeans.nearest_to_center(X, cb, 0, 1)
    assert hits[0][0] == 3 and hits[0][1] == 0.0
    full = kmeans.nearest_to_center(X, cb, 1, 50)
    assert [d for _, d in full] == sorted(d for _, d in full)
    d = [(float(np.sum((x - X[10]) ** 2)), i) for i, x in enumerate(X)]
    assert [i for i, _ in kmeans.nearest_to_center(X, cb, 1, 11)] == [i for _, i in sorted(d)[:11]]
    with pytest.raises(ValueError):
        kmeans.nearest_to_center(X, cb, 2, 1)


def test_nearest_ties_by_id():
    X = np.array([[1.0], [-1.0], [1.0], [0.0]])
    hits = kmeans.nearest_to_center(X, cb_of([[0.0]]), 0, 4)
    assert [i for i, _ in hits] == [3, 0, 1, 2]


def test_empty_cluster_repair():
    X = np.array([[0.0], [1.0], [2.0], [100.0]])
    init = np.array([[0.5], [1000.0], [-1000.0]])
    cb = kmeans.lloyd_fit(X, KMeansConfig(k=3, tol=0.0), init_centers=init)
    assert np.all(np.isfinite(cb.centers))
    assert len(set(kmeans.assign(X, cb).labels.tolist())) == 3


def test_codebook_roundtrip(tmp_path, rng):
    X = rng.normal(size=(30, 3))
    cb = kmeans.lloyd_fit(X, KMeansConfig(k=3), Rng(0))
    kmeans.write_codebook(cb, tmp_path / "c.cbk")
    back = kmeans.read_codebook(tmp_path / "c.cbk")
    assert back.centers.tobytes() == cb.centers.tobytes() and back.inertia == cb.inertia


def test_l2_normalize():
    out = kmeans.l2_normalize(np.array([[3.0, 4.0], [0.0, 0.0]]))
    np.testing.assert_allclose(out, [[0.6, 0.8], [0.0, 0.0]])


def test_n_init_keeps_best(rng):
    X = np.vstack([rng.normal(c, 0.1, (20, 2)) for c in ([0, 0], [5, 0], [0, 5], [5, 5])])
    # restarts share one stream, so the first restart is the single run
    single = kmeans.lloyd_fit(X, KMeansConfig(k=4, seed=0), Rng(0)).inertia
    multi = kmeans.lloyd_fit(X, KMeansConfig(k=4, seed=0, n_init=5), Rng(0)).inertia
    assert multi <= single


def test_exhaustive_oracle_small(rng):
    for _ in range(5):
        X = rng.normal(size=(7, 2))
        best = exhaustive_best_2partition(X)
        fits = min(kmeans.lloyd_fit(X, KMeansConfig(k=2, seed=s), Rng(s)).inertia for s in range(20))
        assert fits == pytest.approx(best, rel=1e-12)
