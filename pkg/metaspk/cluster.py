""" Speaker clustering: NME-SC spectral clustering and AHC

NME-SC binarizes the affinity matrix by keeping the ``p`` strongest
neighbors of every row, then picks ``p`` by minimizing ``p / g_p`` where
``g_p`` is the largest gap in the Laplacian spectrum divided by its largest
eigenvalue.  The position of that gap is the estimated speaker count.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.cluster.hierarchy import cut_tree, fcluster, linkage
from scipy.cluster.vq import vq
from scipy.spatial.distance import squareform
from scipy.sparse.csgraph import connected_components
from toolz import valmap

from .exceptions import DegenerateInputError, ParameterError

__all__ = ('NmeResult', 'cosine_affinity', 'binarize_affinity', 'laplacian',
           'eigh_symmetric', 'n_components', 'nme_search', 'kmeans',
           'spectral_cluster',
           'nme_sc', 'ahc_cluster', 'canonical_labels')

logger = logging.getLogger(__name__)


def cosine_affinity(embeddings):
    """ Pairwise cosine similarities, exactly symmetric

    >>> cosine_affinity(np.array([[1.0, 0.0], [0.0, 2.0]]))
    array([[1., 0.],
           [0., 1.]])
    """
    E = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    norms = np.linalg.norm(E, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DegenerateInputError('embedding %d has zero norm' % zero[0],
                                   row=int(zero[0]))
    X = E / norms[:, None]
    A = X @ X.T
    A = np.clip((A + A.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(A, 1.0)
    return A


def binarize_affinity(A, p):
    """ Keep the ``p`` largest off-diagonal entries of each row as ones

    Ties go to the lower column index.  The diagonal is one and the result
    is symmetrized as ``(B + B.T) / 2``.

    >>> A = np.array([[1.0, 0.9, 0.1], [0.9, 1.0, 0.2], [0.1, 0.2, 1.0]])
    >>> binarize_affinity(A, 1)
    array([[1. , 1. , 0. ],
           [1. , 1. , 0.5],
           [0. , 0.5, 1. ]])
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    if not 1 <= p <= n - 1:
        raise ParameterError('p must lie in [1, %d], got %r' % (n - 1, p))
    masked = A.copy()
    np.fill_diagonal(masked, -np.inf)
    order = np.argsort(-masked, axis=1, kind='stable')[:, :p]
    B = np.zeros_like(A)
    np.put_along_axis(B, order, 1.0, axis=1)
    np.fill_diagonal(B, 1.0)
    return (B + B.T) / 2.0


def laplacian(B):
    """ Unnormalized graph Laplacian ``D - B`` """
    B = np.asarray(B, dtype=np.float64)
    return np.diag(B.sum(axis=1)) - B


def _jacobi(M, tol, max_sweeps):
    A = M.copy()
    n = A.shape[0]
    V = np.eye(n)
    scale = max(np.linalg.norm(M), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(A ** 2) - np.sum(np.diag(A) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta)
                                                     + math.hypot(theta, 1.0))
                c = 1.0 / math.hypot(t, 1.0)
                s = t * c
                cp, cq = A[:, p].copy(), A[:, q].copy()
                A[:, p], A[:, q] = c * cp - s * cq, s * cp + c * cq
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :], A[q, :] = c * rp - s * rq, s * rp + c * rq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
    w = np.diag(A).copy()
    order = np.argsort(w, kind='stable')
    return w[order], V[:, order]


def eigh_symmetric(M, method='lapack', tol=1e-12, max_sweeps=100):
    """ Eigenvalues (ascending) and orthonormal eigenvectors of ``M``

    ``method='jacobi'`` runs cyclic Jacobi rotations until the off-diagonal
    Frobenius norm falls below ``tol * |M|``.

    >>> w, V = eigh_symmetric(np.array([[2.0, 1.0], [1.0, 2.0]]))
    >>> np.round(w, 12).tolist()
    [1.0, 3.0]
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ParameterError('expected a square matrix, got shape %s'
                             % (M.shape,))
    if not np.allclose(M, M.T, rtol=0.0, atol=1e-8):
        raise ParameterError('matrix is not symmetric')
    M = (M + M.T) / 2.0
    if method == 'lapack':
        return linalg.eigh(M)
    if method == 'jacobi':
        return _jacobi(M, tol, max_sweeps)
    raise ParameterError('unknown eigensolver %r' % (method,))


def n_components(B):
    """ Number of connected components of the graph with adjacency ``B`` """
    return connected_components(np.asarray(B) != 0, directed=False)[0]


@dataclass(frozen=True)
class NmeResult:
    """ Outcome of the NME search

    ``g_p``, ``ratio`` and ``k_per_p`` are keyed by the candidate ``p``.
    """
    best_p: int
    k_est: int
    g_p: dict = field(default_factory=dict)
    ratio: dict = field(default_factory=dict)
    k_per_p: dict = field(default_factory=dict)


def _default_grid(n):
    return list(range(1, min(int(math.ceil(n / 4.0)), n - 1) + 1))


def nme_search(A, p_grid=None, max_speakers=8, method='lapack'):
    """ Estimate the number of clusters by normalized maximum eigengap

    For each ``p`` the binarized Laplacian spectrum gives gaps
    ``e_i = l_(i+1) - l_i`` for ``i`` up to ``max_speakers`` (and ``n - 1``);
    ``g_p = max(e) / l_max`` and the count is the position of that gap.  The
    ``p`` with the smallest ``p / g_p`` wins, ties going to the smaller ``p``.

    A graph split into ``c`` connected components has exactly ``c`` zero
    eigenvalues, so it counts ``c`` clusters and ``g_p`` is the gap above
    them; more than ``max_speakers`` components give ``g_p = 0``.
    Components only merge as ``p`` grows.  A ``p`` whose component count
    differs from that of the next two grid values is fragmenting clusters
    rather than separating them, and its ratio is infinite.
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    if n == 1:
        return NmeResult(0, 1)
    grid = _default_grid(n) if p_grid is None else sorted(set(p_grid))
    if not grid:
        raise ParameterError('empty p grid')
    if grid[0] < 1 or grid[-1] > n - 1:
        raise ParameterError('p grid must lie in [1, %d]' % (n - 1))
    top = max(1, min(max_speakers, n - 1))
    graphs = dict((p, binarize_affinity(A, p)) for p in grid)
    parts = valmap(n_components, graphs)
    g, ratio, ks = {}, {}, {}
    for j, p in enumerate(grid):
        lam = eigh_symmetric(laplacian(graphs[p]), method=method)[0]
        c = parts[p]
        if c > top or lam[-1] <= 1e-12:
            g[p], ks[p] = 0.0, c
        else:
            i = c - 1 if c > 1 else int(np.argmax(np.diff(lam)[:top]))
            g[p] = float(min(max((lam[i + 1] - lam[i]) / lam[-1], 0.0),
                             1.0))
            ks[p] = i + 1
        stable = all(parts[q] == c for q in grid[j + 1:j + 3])
        ratio[p] = p / g[p] if g[p] > 0 and stable else math.inf
    best = min(grid, key=lambda p: (ratio[p], p))
    logger.debug('NME search: p=%d k=%d (%d candidates)', best, ks[best],
                 len(grid))
    return NmeResult(best, ks[best], g, ratio, ks)


def canonical_labels(labels):
    """ Relabel clusters in order of first appearance

    >>> canonical_labels([2, 2, 0, 1]).tolist()
    [0, 0, 1, 2]
    """
    labels = np.asarray(labels)
    mapping = {}
    for l in labels.tolist():
        mapping.setdefault(l, len(mapping))
    return np.array([mapping[l] for l in labels.tolist()], dtype=np.intp)


def kmeans(X, k, rng, iters=100, tol=1e-9):
    """ Lloyd's k-means from a k-means++ start

    Stops after ``iters`` updates or once the relative change in inertia
    falls below ``tol``.  An empty cluster keeps its previous centroid.
    Returns ``(labels, inertia)``.
    """
    X = np.asarray(X, dtype=np.float64)
    centroids = _kpp_init(X, k, rng)
    prev = math.inf
    for _ in range(iters):
        labels, dist = vq(X, centroids, check_finite=False)
        inertia = float(np.sum(dist ** 2))
        if prev < math.inf and prev - inertia <= tol * max(prev, 1e-300):
            break
        prev = inertia
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, X)
        full = counts > 0
        centroids[full] = sums[full] / counts[full, None]
    return labels, inertia


def _kpp_init(X, k, rng):
    centroids = [X[rng.integers(len(X))]]
    for _ in range(1, k):
        d2 = np.min(((X[:, None, :] - np.array(centroids)) ** 2).sum(-1),
                    axis=1)
        total = d2.sum()
        if total <= 0:
            i = rng.integers(len(X))
        else:
            i = rng.choice(len(X), p=d2 / total)
        centroids.append(X[i])
    return np.array(centroids, dtype=np.float64)


def spectral_cluster(A, k, seed=0, n_init=10, iters=100, method='lapack'):
    """ k-means on the ``k`` smallest Laplacian eigenvectors of ``A``

    k-means++ seeding is restarted ``n_init`` times from a seeded generator
    and the run with the lowest inertia is kept; see ``kmeans``.
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    if not 1 <= k <= n:
        raise ParameterError('k must lie in [1, %d], got %r' % (n, k))
    if k == 1:
        return np.zeros(n, dtype=np.intp)
    U = eigh_symmetric(laplacian(A), method=method)[1][:, :k]
    rng = np.random.default_rng(seed)
    best, best_inertia = None, math.inf
    for _ in range(n_init):
        labels, inertia = kmeans(U, k, rng, iters=iters)
        if inertia < best_inertia - 1e-12:
            best, best_inertia = labels, inertia
    return canonical_labels(best)


def nme_sc(A, oracle_k=None, p_grid=None, max_speakers=8, seed=0):
    """ Full NME-SC: search ``p``, binarize, cluster

    Returns ``(labels, NmeResult)``; ``oracle_k`` overrides the estimated
    speaker count.
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    result = nme_search(A, p_grid, max_speakers)
    k = oracle_k or result.k_est
    if n == 1 or k == 1:
        return np.zeros(n, dtype=np.intp), result
    B = binarize_affinity(A, result.best_p)
    return spectral_cluster(B, min(k, n), seed=seed), result


def ahc_cluster(scores, threshold=0.0, target_k=None):
    """ Average-linkage agglomerative clustering of a similarity matrix

    Clusters merge while their average similarity is at least ``threshold``,
    or until ``target_k`` clusters remain when it is given.

    >>> S = np.array([[0.0, 5.0, -3.0], [5.0, 0.0, -2.0], [-3.0, -2.0, 0.0]])
    >>> ahc_cluster(S).tolist()
    [0, 0, 1]
    >>> ahc_cluster(S, target_k=1).tolist()
    [0, 0, 0]
    """
    S = np.asarray(scores, dtype=np.float64)
    n = S.shape[0]
    if S.ndim != 2 or S.shape[1] != n:
        raise ParameterError('expected a square score matrix')
    if target_k is not None and not 1 <= target_k <= n:
        raise ParameterError('target_k must lie in [1, %d], got %r'
                             % (n, target_k))
    if n == 1:
        return np.zeros(1, dtype=np.intp)
    S = (S + S.T) / 2.0
    off = S[~np.eye(n, dtype=bool)]
    top = off.max()
    D = top - S
    np.fill_diagonal(D, 0.0)
    Z = linkage(squareform(D, checks=False), method='average')
    if target_k is not None:
        labels = cut_tree(Z, n_clusters=target_k).ravel()
    elif threshold > top:
        labels = np.arange(n)
    else:
        labels = fcluster(Z, t=top - threshold, criterion='distance')
    return canonical_labels(labels)
