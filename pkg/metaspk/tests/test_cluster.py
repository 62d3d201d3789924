import itertools
import math

import numpy as np
from scipy.linalg import block_diag

from metaspk.cluster import (ahc_cluster, binarize_affinity, canonical_labels,
                             cosine_affinity, eigh_symmetric, laplacian,
                             kmeans, n_components, nme_sc,
                             nme_search, spectral_cluster)
from metaspk.exceptions import DegenerateInputError, ParameterError
from metaspk.utils import raises


def gaussian_clusters(k, seed, per_cluster=20, sigma=0.1, dim=16):
    """ ``k`` clusters whose centers lie 1.0 apart """
    rng = np.random.default_rng(seed)
    Q = np.linalg.qr(rng.normal(size=(dim, k)))[0]
    centers = Q.T / np.sqrt(2.0)
    labels = np.repeat(np.arange(k), per_cluster)
    X = centers[labels] + sigma * rng.normal(size=(len(labels), dim))
    order = rng.permutation(len(labels))
    return X[order], labels[order]


def same_partition(a, b):
    return np.array_equal(canonical_labels(a), canonical_labels(b))


def union_find_components(B):
    n = B.shape[0]
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for i in range(n):
        for j in range(n):
            if B[i, j]:
                parent[find(i)] = find(j)
    return len(set(find(i) for i in range(n)))


def test_cosine_affinity():
    rng = np.random.default_rng(0)
    A = cosine_affinity(rng.normal(size=(12, 5)))
    assert np.array_equal(A, A.T)
    assert np.allclose(np.diag(A), 1.0)
    assert A.min() >= -1.0 and A.max() <= 1.0


def test_cosine_affinity_zero_row():
    E = np.ones((4, 3))
    E[2] = 0.0
    try:
        cosine_affinity(E)
    except DegenerateInputError as e:
        assert e.row == 2
    else:
        assert False


def test_binarize_affinity():
    rng = np.random.default_rng(1)
    A = cosine_affinity(rng.normal(size=(10, 4)))
    for p in [1, 3, 9]:
        B = binarize_affinity(A, p)
        assert np.array_equal(B, B.T)
        assert np.allclose(np.diag(B), 1.0)
        assert set(np.unique(B)) <= set([0.0, 0.5, 1.0])
        off = B - np.eye(10)
        # every row kept p neighbors before symmetrizing
        assert ((off > 0).sum(axis=1) >= p).all()
    assert raises(ParameterError, lambda: binarize_affinity(A, 0))
    assert raises(ParameterError, lambda: binarize_affinity(A, 10))


def test_laplacian_psd_and_components():
    rng = np.random.default_rng(2)
    for trial in range(20):
        n = int(rng.integers(3, 15))
        B = (rng.random((n, n)) < 0.15).astype(float)
        B = np.maximum(B, B.T)
        np.fill_diagonal(B, 1.0)
        L = laplacian(B)
        w = eigh_symmetric(L)[0]
        assert w[0] >= -1e-8
        zeros = int(np.sum(np.abs(w) < 1e-9))
        assert zeros == union_find_components(B) == n_components(B)


def test_jacobi_matches_lapack():
    rng = np.random.default_rng(3)
    for n in [1, 2, 5, 12]:
        M = rng.normal(size=(n, n))
        M = M + M.T
        w1, V1 = eigh_symmetric(M, 'lapack')
        w2, V2 = eigh_symmetric(M, 'jacobi')
        assert np.allclose(w1, w2, atol=1e-9)
        assert np.allclose(V2.T @ V2, np.eye(n), atol=1e-9)
        assert np.allclose(M @ V2, V2 * w2, atol=1e-8)


def test_eigh_symmetric_errors():
    assert raises(ParameterError, lambda: eigh_symmetric(np.zeros((2, 3))))
    assert raises(ParameterError,
                  lambda: eigh_symmetric(np.array([[0.0, 1.0], [0.0, 0.0]])))
    assert raises(ParameterError,
                  lambda: eigh_symmetric(np.eye(2), method='qr'))


def test_nme_block_diagonal():
    A = block_diag(np.ones((3, 3)), np.ones((3, 3)), np.ones((3, 3)))
    result = nme_search(A, p_grid=[2])
    assert result.k_est == 3
    assert result.best_p == 2
    assert abs(result.g_p[2] - 1.0) < 1e-12
    labels, _ = nme_sc(A, p_grid=[2])
    assert same_partition(labels, np.repeat(np.arange(3), 3))


def test_nme_rejects_fragmenting_p():
    # two blocks of four; the nearest neighbour alone splits each in half
    block = np.array([[1.0, 0.9, 0.5, 0.5],
                      [0.9, 1.0, 0.5, 0.5],
                      [0.5, 0.5, 1.0, 0.9],
                      [0.5, 0.5, 0.9, 1.0]])
    A = block_diag(block, block)
    result = nme_search(A, p_grid=[1, 2, 3])
    assert result.k_per_p[1] == 4
    assert result.ratio[1] == math.inf
    assert result.best_p != 1
    assert result.k_est == 2
    assert result.k_per_p[3] == 2
    assert abs(result.g_p[3] - 1.0) < 1e-12
    labels, _ = nme_sc(A, p_grid=[1, 2, 3])
    assert same_partition(labels, [0] * 4 + [1] * 4)


def test_nme_disconnected_graph_counts_components():
    A = block_diag(np.ones((3, 3)), np.ones((3, 3)), np.ones((3, 3)))
    result = nme_search(A, p_grid=[1, 2])
    assert result.k_per_p[1] == 3
    assert result.k_per_p[2] == 3
    assert result.k_est == 3


def test_nme_degenerate_inputs():
    A = np.ones((2, 2))
    result = nme_search(A, p_grid=[1])
    assert result.k_est == 1
    labels, result = nme_sc(np.ones((1, 1)))
    assert labels.tolist() == [0]
    assert result.k_est == 1
    assert raises(ParameterError, lambda: nme_search(np.eye(4), p_grid=[4]))
    assert raises(ParameterError, lambda: nme_search(np.eye(4), p_grid=[]))


def test_nme_search_result_fields():
    X, _ = gaussian_clusters(3, 0)
    result = nme_search(cosine_affinity(X))
    grid = list(range(1, 16))
    assert sorted(result.g_p) == grid
    assert all(0.0 <= g <= 1.0 for g in result.g_p.values())
    best = min(result.ratio.values())
    assert result.ratio[result.best_p] == best
    assert result.k_est == result.k_per_p[result.best_p]


def test_nme_estimates_gaussian_cluster_count():
    for k in range(2, 9):
        for seed in range(50):
            X, truth = gaussian_clusters(k, seed)
            labels, result = nme_sc(cosine_affinity(X), seed=seed)
            assert result.k_est == k, (k, seed, result.best_p)
            # adjusted Rand index 1.0
            assert same_partition(labels, truth)


def test_kmeans():
    X, truth = gaussian_clusters(3, 4)
    labels, inertia = kmeans(X, 3, np.random.default_rng(0))
    assert same_partition(labels, truth)
    centroids = np.array([X[labels == j].mean(axis=0) for j in range(3)])
    assert abs(inertia - np.sum((X - centroids[labels]) ** 2)) < 1e-9
    again = kmeans(X, 3, np.random.default_rng(0))[0]
    assert np.array_equal(labels, again)


def test_kmeans_duplicate_points():
    X = np.array([[0.0, 0.0]] * 4 + [[1.0, 1.0]] * 4)
    labels, inertia = kmeans(X, 3, np.random.default_rng(1))
    assert set(labels.tolist()) <= {0, 1, 2}
    assert inertia == 0.0
    assert len(set(labels[:4].tolist())) == 1
    assert len(set(labels[4:].tolist())) == 1


def test_spectral_cluster():
    A = block_diag(np.ones((4, 4)), np.ones((3, 3)))
    assert same_partition(spectral_cluster(A, 2), [0] * 4 + [1] * 3)
    assert spectral_cluster(A, 1).tolist() == [0] * 7
    assert raises(ParameterError, lambda: spectral_cluster(A, 8))
    X, truth = gaussian_clusters(4, 5)
    B = binarize_affinity(cosine_affinity(X), 10)
    a = spectral_cluster(B, 4, seed=3)
    assert np.array_equal(a, spectral_cluster(B, 4, seed=3))
    assert same_partition(a, truth)


def test_oracle_k_overrides_estimate():
    X, truth = gaussian_clusters(3, 1)
    labels, result = nme_sc(cosine_affinity(X), oracle_k=2)
    assert result.k_est == 3
    assert len(set(labels.tolist())) == 2


def test_clustering_permutation_invariant():
    X, _ = gaussian_clusters(4, 2)
    A = cosine_affinity(X)
    perm = np.random.default_rng(0).permutation(len(X))
    labels = nme_sc(A)[0]
    permuted = nme_sc(A[np.ix_(perm, perm)])[0]
    assert same_partition(labels[perm], permuted)
    S = A * 4.0 - 2.0
    assert same_partition(ahc_cluster(S)[perm],
                          ahc_cluster(S[np.ix_(perm, perm)]))


def brute_average_linkage(S, threshold=None, target_k=None):
    clusters = [[i] for i in range(len(S))]
    while len(clusters) > 1:
        if target_k is not None and len(clusters) <= target_k:
            break
        best, pair = -np.inf, None
        for a, b in itertools.combinations(range(len(clusters)), 2):
            sim = np.mean([S[i, j] for i in clusters[a] for j in clusters[b]])
            if sim > best:
                best, pair = sim, (a, b)
        if target_k is None and best < threshold:
            break
        a, b = pair
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
    labels = np.zeros(len(S), dtype=int)
    for c, members in enumerate(clusters):
        labels[members] = c
    return labels


def test_ahc_matches_brute_force_linkage():
    rng = np.random.default_rng(4)
    for trial in range(30):
        S = rng.normal(size=(6, 6))
        S = S + S.T
        for threshold in [-1.0, 0.0, 0.5, 1.5]:
            assert same_partition(ahc_cluster(S, threshold),
                                  brute_average_linkage(S, threshold))
        for k in range(1, 7):
            assert same_partition(ahc_cluster(S, target_k=k),
                                  brute_average_linkage(S, target_k=k))


def test_ahc_edges():
    S = np.array([[0.0, 2.0, 1.0], [2.0, 0.0, 1.5], [1.0, 1.5, 0.0]])
    assert ahc_cluster(S, threshold=10.0).tolist() == [0, 1, 2]
    assert ahc_cluster(S, target_k=1).tolist() == [0, 0, 0]
    assert ahc_cluster(np.zeros((1, 1))).tolist() == [0]
    assert raises(ParameterError, lambda: ahc_cluster(S, target_k=4))
    assert raises(ParameterError, lambda: ahc_cluster(np.zeros((2, 3))))
