""" Speaker verification back end: LDA, PLDA, trial scoring, EER and minDCF

Embeddings are centered and projected by LDA, length-normalized, and scored
with a two-covariance PLDA model: a speaker variable ``y ~ N(mu, B)`` and
per-utterance noise ``N(0, W)``.  The log-likelihood ratio of a trial is a
quadratic form evaluated in closed form.
"""
import logging
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy import linalg
from toolz import concat, partition_all

from .exceptions import (DegenerateDataError, DegenerateInputError,
                         DimensionError, EvaluationError, ParameterError,
                         ParseError)
from .utils import atomic_write

__all__ = ('LdaModel', 'PldaModel', 'Backend', 'TrialRecord', 'EerResult',
           'fit_lda', 'length_normalize', 'class_statistics',
           'plda_log_likelihood', 'plda_em_step', 'fit_plda', 'score_pair',
           'plda_score_matrix', 'cosine_score_matrix', 'train_backend',
           'save_backend', 'load_backend', 'read_trials', 'write_scores',
           'read_scores', 'score_trials', 'evaluate_trials', 'detection_rates')

logger = logging.getLogger(__name__)

COV_FLOOR = 1e-6
LDA_REG = 1e-6


@dataclass(frozen=True, eq=False)
class LdaModel:
    """ ``project(x) = projection @ (x - mean)`` """
    mean: np.ndarray
    projection: np.ndarray

    def project(self, X):
        X = np.asarray(X, dtype=np.float64)
        return (X - self.mean) @ self.projection.T


def _as_labels(labels):
    classes, index = np.unique(np.asarray(labels), return_inverse=True)
    return classes, index.ravel()


def fit_lda(embeddings, labels, out_dim=200):
    """ Fisher LDA solved as ``Sb v = l (Sw + r I) v``

    ``r`` is ``1e-6`` times the mean within-class variance.  The rows of the
    projection are the ``out_dim`` leading generalized eigenvectors.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    classes, y = _as_labels(labels)
    n, dim = X.shape
    if out_dim >= len(classes):
        raise ParameterError('LDA to %d dimensions needs more than %d '
                             'classes, got %d'
                             % (out_dim, out_dim, len(classes)))
    if out_dim > dim:
        raise ParameterError('cannot project %d dimensions up to %d'
                             % (dim, out_dim))
    if np.bincount(y).max() < 2:
        raise DegenerateDataError('LDA needs a class with at least two '
                                  'samples')
    mean = X.mean(axis=0)
    Sw = np.zeros((dim, dim))
    Sb = np.zeros((dim, dim))
    for c in range(len(classes)):
        Xc = X[y == c]
        mc = Xc.mean(axis=0)
        Dc = Xc - mc
        Sw += Dc.T @ Dc
        Sb += len(Xc) * np.outer(mc - mean, mc - mean)
    reg = LDA_REG * np.trace(Sw) / dim
    if reg <= 0:
        raise DegenerateDataError('within-class scatter is zero')
    w, V = linalg.eigh(Sb, Sw + reg * np.eye(dim))
    order = np.argsort(w)[::-1][:out_dim]
    return LdaModel(mean, V[:, order].T)


def length_normalize(X):
    """ Scale every row to unit Euclidean norm

    >>> length_normalize(np.array([[3.0, 4.0]])).tolist()
    [[0.6, 0.8]]
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DegenerateInputError('row %d has zero norm' % zero[0],
                                   row=int(zero[0]))
    return X / norms[:, None]


@dataclass(frozen=True, eq=False)
class PldaModel:
    """ Two-covariance PLDA; ``log_likelihoods`` records the EM trace """
    mu: np.ndarray
    between_cov: np.ndarray
    within_cov: np.ndarray
    log_likelihoods: tuple = ()

    @property
    def dim(self):
        return len(self.mu)


def _floor_cov(C, floor=COV_FLOOR):
    C = (C + C.T) / 2.0
    w, V = linalg.eigh(C)
    return (V * np.maximum(w, floor)) @ V.T


def class_statistics(embeddings, labels):
    """ ``(n, mean, scatter)`` per class, scatter taken about the mean """
    X = np.asarray(embeddings, dtype=np.float64)
    classes, y = _as_labels(labels)
    stats = []
    for c in range(len(classes)):
        Xc = X[y == c]
        m = Xc.mean(axis=0)
        stats.append((len(Xc), m, (Xc - m).T @ (Xc - m)))
    return stats


def plda_log_likelihood(model, stats):
    """ Marginal log-likelihood of the data summarized by ``stats`` """
    mu, B, W = model.mu, model.between_cov, model.within_cov
    dim = len(mu)
    W_inv = linalg.inv(W)
    logdet_W = np.linalg.slogdet(W)[1]
    total = 0.0
    for n, m, S in stats:
        C = B + W / n
        d = m - mu
        total += -0.5 * (dim * np.log(2 * np.pi) + np.linalg.slogdet(C)[1]
                         + d @ linalg.solve(C, d, assume_a='pos'))
        total += -0.5 * ((n - 1) * (dim * np.log(2 * np.pi) + logdet_W)
                         + dim * np.log(n) + np.sum(W_inv * S))
    return float(total)


def plda_em_step(model, stats, floor=COV_FLOOR):
    """ One EM update of the two-covariance model """
    mu, B, W = model.mu, model.between_cov, model.within_cov
    B_inv = linalg.inv(B)
    W_inv = linalg.inv(W)
    means, covs = [], []
    for n, m, S in stats:
        C = linalg.inv(B_inv + n * W_inv)
        means.append(C @ (B_inv @ mu + n * (W_inv @ m)))
        covs.append(C)
    K = len(stats)
    N = sum(n for n, _, _ in stats)
    new_mu = np.mean(means, axis=0)
    new_B = sum(C + np.outer(y - new_mu, y - new_mu)
                for y, C in zip(means, covs)) / K
    new_W = sum(S + n * np.outer(m - y, m - y) + n * C
                for (n, m, S), y, C in zip(stats, means, covs)) / N
    return PldaModel(new_mu, _floor_cov(new_B, floor),
                     _floor_cov(new_W, floor), model.log_likelihoods)


def fit_plda(embeddings, labels, iters=10, floor=COV_FLOOR):
    """ Fit a two-covariance PLDA model by EM

    The returned model carries the log-likelihood before the first and after
    every iteration.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    stats = class_statistics(X, labels)
    if len(stats) < 2 or sum(1 for n, _, _ in stats if n >= 2) < 1:
        raise ParameterError('PLDA needs at least two classes and a class '
                             'with two samples')
    if np.allclose(X, X[0]):
        raise DegenerateDataError('all embeddings are identical')
    N = len(X)
    means = np.array([m for _, m, _ in stats])
    W = sum(S for _, _, S in stats) / N
    B = np.cov(means.T, bias=True).reshape(X.shape[1], X.shape[1])
    model = PldaModel(X.mean(axis=0), _floor_cov(B, floor),
                      _floor_cov(W, floor))
    trace = [plda_log_likelihood(model, stats)]
    for i in range(iters):
        model = plda_em_step(model, stats, floor)
        trace.append(plda_log_likelihood(model, stats))
        logger.debug('PLDA iteration %d: log-likelihood %.6f', i + 1,
                     trace[-1])
    return PldaModel(model.mu, model.between_cov, model.within_cov,
                     tuple(trace))


def _llr_terms(model):
    B, W = model.between_cov, model.within_cov
    T = B + W
    T_inv = linalg.inv(T)
    A = linalg.inv(T - B @ T_inv @ B)
    G = -T_inv @ B @ A
    Q = T_inv - A
    P = -(G + G.T) / 2.0
    const = 0.5 * (np.linalg.slogdet(T)[1]
                   - np.linalg.slogdet(T - B @ T_inv @ B)[1])
    return (Q + Q.T) / 2.0, P, const


def plda_score_matrix(model, E1, E2):
    """ PLDA log-likelihood ratios of every row of ``E1`` against ``E2`` """
    X1 = np.atleast_2d(np.asarray(E1, dtype=np.float64))
    X2 = np.atleast_2d(np.asarray(E2, dtype=np.float64))
    if X1.shape[1] != model.dim or X2.shape[1] != model.dim:
        raise DimensionError('embeddings of dimension %d and %d, PLDA model '
                             'has %d' % (X1.shape[1], X2.shape[1], model.dim))
    Q, P, const = _llr_terms(model)
    X1 = X1 - model.mu
    X2 = X2 - model.mu
    q1 = 0.5 * np.einsum('ij,jk,ik->i', X1, Q, X1)
    q2 = 0.5 * np.einsum('ij,jk,ik->i', X2, Q, X2)
    return q1[:, None] + q2[None, :] + X1 @ P @ X2.T + const


def cosine_score_matrix(E1, E2):
    return length_normalize(E1) @ length_normalize(E2).T


def score_pair(model, e1, e2):
    """ PLDA log-likelihood ratio, or cosine similarity for ``'cosine'`` """
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise DimensionError('embeddings of shape %s and %s'
                             % (e1.shape, e2.shape))
    if isinstance(model, str):
        if model != 'cosine':
            raise ParameterError('unknown scoring backend %r' % model)
        return float(cosine_score_matrix(e1, e2)[0, 0])
    return float(plda_score_matrix(model, e1, e2)[0, 0])


@dataclass(frozen=True, eq=False)
class Backend:
    """ LDA projection, length normalization and PLDA scoring """
    lda: LdaModel
    plda: PldaModel

    def transform(self, X):
        return length_normalize(self.lda.project(X))

    def score_matrix(self, E1, E2):
        return plda_score_matrix(self.plda, self.transform(E1),
                                 self.transform(E2))


def train_backend(embeddings, labels, lda_dim=200, iters=10):
    """ Fit LDA and PLDA on training embeddings

    ``lda_dim`` is lowered to ``classes - 1`` (and the embedding dimension)
    when the data cannot support it.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    n_classes = len(np.unique(np.asarray(labels)))
    dim = min(lda_dim, n_classes - 1, X.shape[1])
    if dim < lda_dim:
        logger.warning('LDA dimension lowered from %d to %d (%d classes, %d '
                       'input dimensions)', lda_dim, dim, n_classes,
                       X.shape[1])
    lda = fit_lda(X, labels, dim)
    plda = fit_plda(length_normalize(lda.project(X)), labels, iters)
    return Backend(lda, plda)


def save_backend(path, backend):
    with atomic_write(path) as f:
        np.savez(f, lda_mean=backend.lda.mean,
                 lda_projection=backend.lda.projection,
                 plda_mu=backend.plda.mu,
                 plda_between=backend.plda.between_cov,
                 plda_within=backend.plda.within_cov)


def load_backend(path):
    try:
        with np.load(path) as z:
            return Backend(LdaModel(z['lda_mean'], z['lda_projection']),
                           PldaModel(z['plda_mu'], z['plda_between'],
                                     z['plda_within']))
    except KeyError as e:
        raise ParseError('backend file lacks %s' % e, path=path)
    except ValueError as e:
        raise ParseError('not a backend file (%s)' % e, path=path)


@dataclass(frozen=True)
class TrialRecord:
    enroll_utt: str
    test_utt: str
    is_target: bool
    score: float = None


_TRIAL_KINDS = {'target': True, 'nontarget': False}


def _parse_trial(fields, lineno, path, with_score):
    if len(fields) != (4 if with_score else 3):
        raise ParseError('expected %d fields, got %d'
                         % (4 if with_score else 3, len(fields)),
                         lineno=lineno, path=path)
    if fields[2] not in _TRIAL_KINDS:
        raise ParseError('trial kind must be target or nontarget, got %r'
                         % fields[2], lineno=lineno, path=path)
    score = None
    if with_score:
        try:
            score = float(fields[3])
        except ValueError:
            raise ParseError('bad score %r' % fields[3], lineno=lineno,
                             path=path)
    return TrialRecord(fields[0], fields[1], _TRIAL_KINDS[fields[2]], score)


def _read(path, with_score):
    trials = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            fields = line.split()
            if fields and not fields[0].startswith('#'):
                trials.append(_parse_trial(fields, lineno, path, with_score))
    return trials


def read_trials(path):
    """ Trial list lines ``enroll_utt test_utt target|nontarget`` """
    return _read(path, False)


def read_scores(path):
    return _read(path, True)


def write_scores(path, trials):
    with atomic_write(path, 'w') as f:
        for t in trials:
            f.write('%s %s %s %.6f\n' % (t.enroll_utt, t.test_utt,
                                         'target' if t.is_target
                                         else 'nontarget', t.score))


def _score_chunk(backend, embeddings, trials):
    out = []
    for t in trials:
        e1, e2 = embeddings[t.enroll_utt], embeddings[t.test_utt]
        if isinstance(backend, str):
            s = score_pair(backend, e1, e2)
        else:
            s = float(backend.score_matrix(e1, e2)[0, 0])
        out.append(TrialRecord(t.enroll_utt, t.test_utt, t.is_target, s))
    return out


def score_trials(trials, embeddings, backend='cosine', map=map,
                 chunksize=256):
    """ Score every trial with ``backend`` (a ``Backend`` or ``'cosine'``)

    Chunks of trials are handed to ``map``, which may be parallel.
    """
    trials = list(trials)
    for t in trials:
        for utt in (t.enroll_utt, t.test_utt):
            if utt not in embeddings:
                raise EvaluationError('no embedding for utterance %r' % utt)
    chunks = list(partition_all(chunksize, trials))
    return list(concat(map(partial(_score_chunk, backend, embeddings),
                           chunks)))


@dataclass(frozen=True)
class EerResult:
    eer: float
    min_dcf: float
    min_dcf_norm: float
    eer_threshold: float = None
    p_target: float = 0.01


def detection_rates(scores, is_target):
    """ Thresholds with false rejection and false acceptance rates

    Thresholds are the distinct scores in ascending order followed by
    ``+inf``; a trial is accepted when its score is ``>=`` the threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_target = np.asarray(is_target, dtype=bool)
    tgt = np.sort(scores[is_target])
    non = np.sort(scores[~is_target])
    if not len(tgt) or not len(non):
        raise EvaluationError('need at least one target and one non-target '
                              'trial, got %d and %d' % (len(tgt), len(non)))
    thresholds = np.append(np.unique(scores), np.inf)
    frr = np.searchsorted(tgt, thresholds, side='left') / float(len(tgt))
    far = 1.0 - np.searchsorted(non, thresholds, side='left') / float(len(non))
    return thresholds, frr, far


def evaluate_trials(trials, p_target=0.01, c_miss=1.0, c_fa=1.0):
    """ Equal error rate and minimum detection cost of scored trials

    The EER is read where the FRR and FAR curves cross, interpolating
    linearly between neighboring thresholds.

    >>> r = evaluate_trials([TrialRecord('a', 'b', True, 2.0),
    ...                      TrialRecord('a', 'c', False, 1.0)])
    >>> r.eer, r.min_dcf
    (0.0, 0.0)
    """
    trials = list(trials)
    if any(t.score is None for t in trials):
        raise EvaluationError('every trial needs a score')
    thresholds, frr, far = detection_rates([t.score for t in trials],
                                           [t.is_target for t in trials])
    diff = frr - far
    i = int(np.argmax(diff >= 0))
    if i == 0:
        eer, threshold = float(frr[0]), float(thresholds[0])
    else:
        alpha = diff[i - 1] / (diff[i - 1] - diff[i])
        eer = float(frr[i - 1] + alpha * (frr[i] - frr[i - 1]))
        threshold = float(thresholds[i - 1]
                          + alpha * (thresholds[i] - thresholds[i - 1])) \
            if np.isfinite(thresholds[i]) else float(thresholds[i - 1])
    dcf = p_target * c_miss * frr + (1 - p_target) * c_fa * far
    min_dcf = float(dcf.min())
    norm = min(p_target * c_miss, (1 - p_target) * c_fa)
    return EerResult(eer, min_dcf, min_dcf / norm, threshold, p_target)
