""" Diarization: oracle speech regions, uniform segmentation, clustering, DER

Times are handled internally as integer milliseconds so boundaries compare
exactly; public functions take and return seconds.
"""
import logging
from dataclasses import dataclass
from operator import add

import numpy as np
from scipy.optimize import linear_sum_assignment
from toolz import groupby
from toolz.sandbox.parallel import fold

from .cluster import ahc_cluster, cosine_affinity, nme_sc
from .exceptions import ParameterError, ParseError, UndefinedDerError
from .nets import default_tap, embed_batch, receptive_field
from .utils import atomic_write, seconds_to_ms
from .verify import cosine_score_matrix

__all__ = ('RttmSegment', 'DerBreakdown', 'DiarizeConfig', 'UNASSIGNED',
           'read_rttm', 'write_rttm', 'group_sessions', 'speech_regions',
           'uniform_segment', 'segment_embeddings', 'project_labels',
           'diarize_session', 'max_overlap_assignment', 'optimal_speaker_map',
           'der_score', 'aggregate_der', 'write_der_report',
           'tune_ahc_threshold', 'DevSession')

logger = logging.getLogger(__name__)

UNASSIGNED = '<unassigned>'


@dataclass(frozen=True)
class RttmSegment:
    session_id: str
    onset: float
    duration: float
    speaker: str

    def __post_init__(self):
        if self.duration <= 0 or self.onset < 0:
            raise ParameterError('segment needs onset >= 0 and duration > 0, '
                                 'got %r, %r' % (self.onset, self.duration))

    @property
    def offset(self):
        return self.onset + self.duration


def read_rttm(path):
    """ SPEAKER records of an RTTM file """
    segments = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            fields = line.split()
            if not fields or fields[0].startswith('#'):
                continue
            if len(fields) != 10:
                raise ParseError('RTTM lines have 10 fields, got %d'
                                 % len(fields), lineno=lineno, path=path)
            if fields[0] != 'SPEAKER':
                raise ParseError('unsupported record type %r' % fields[0],
                                 lineno=lineno, path=path)
            try:
                onset = round(float(fields[3]), 3)
                duration = round(float(fields[4]), 3)
                segments.append(RttmSegment(fields[1], onset, duration,
                                            fields[7]))
            except ValueError as e:
                raise ParseError(str(e), lineno=lineno, path=path)
    return segments


def write_rttm(path, segments):
    with atomic_write(path, 'w') as f:
        for s in segments:
            f.write('SPEAKER %s 1 %.3f %.3f <NA> <NA> %s <NA> <NA>\n'
                    % (s.session_id, s.onset, s.duration, s.speaker))


def group_sessions(segments):
    """ ``{session_id: segments}`` keeping file order within a session """
    return groupby(lambda s: s.session_id, segments)


def _ms_turns(segments):
    return [(seconds_to_ms(s.onset), seconds_to_ms(s.offset))
            for s in segments]


def _union(intervals):
    merged = []
    for a, b in sorted(intervals):
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return [(a, b) for a, b in merged if b > a]


def speech_regions(reference):
    """ Oracle speech: the union of all reference turns, sorted

    >>> speech_regions([RttmSegment('s', 0.0, 1.0, 'a'),
    ...                 RttmSegment('s', 0.5, 1.0, 'b'),
    ...                 RttmSegment('s', 2.0, 0.5, 'a')])
    [(0.0, 1.5), (2.0, 2.5)]
    """
    return [(a / 1000.0, b / 1000.0) for a, b in _union(_ms_turns(reference))]


def uniform_segment(regions, width=1.5, step=0.75, min_tail=0.5):
    """ Fixed-width overlapping windows inside every speech region

    A region no longer than ``width`` is one window.  Otherwise windows
    start every ``step``; a leftover tail of at least ``min_tail`` gets its
    own shorter window and a shorter one stretches the last window.

    >>> uniform_segment([(0.0, 3.0)])
    [(0.0, 1.5), (0.75, 2.25), (1.5, 3.0)]
    >>> uniform_segment([(0.0, 1.0)])
    [(0.0, 1.0)]
    """
    W, S, tail = (seconds_to_ms(width), seconds_to_ms(step),
                  seconds_to_ms(min_tail))
    if W <= 0 or S <= 0:
        raise ParameterError('window width and step must be positive')
    out = []
    for onset, offset in regions:
        a, b = seconds_to_ms(onset), seconds_to_ms(offset)
        if b - a <= W:
            if b > a:
                out.append((a, b))
            continue
        windows = []
        s = a
        while s + W <= b:
            windows.append((s, s + W))
            s += S
        if windows[-1][1] < b:
            if b - s >= tail:
                windows.append((s, b))
            else:
                windows[-1] = (windows[-1][0], b)
        out.extend(windows)
    return [(a / 1000.0, b / 1000.0) for a, b in out]


def _segment_frames(features, onset, offset, min_frames):
    frames = features.span(onset, offset).frames
    if len(frames) < min_frames:
        short = min_frames - len(frames)
        frames = np.pad(frames, ((short // 2, short - short // 2), (0, 0)),
                        mode='edge')
    return frames


def segment_embeddings(features, weights, segments, tap=None):
    """ One embedding per segment, edge-padding segments shorter than the
    receptive field; equal-length segments are encoded as one batch """
    rf = receptive_field(weights.spec)
    frames = [_segment_frames(features, a, b, rf) for a, b in segments]
    out = [None] * len(frames)
    for length, idx in groupby(lambda i: len(frames[i]),
                               range(len(frames))).items():
        E = embed_batch(weights, np.stack([frames[i] for i in idx]), tap)
        for i, e in zip(idx, E):
            out[i] = e
    return np.array(out)


def project_labels(session_id, segments, labels):
    """ Turn labeled overlapping windows into a single-speaker timeline

    The overlap of consecutive windows is split at its midpoint and adjacent
    pieces with the same label are merged.
    """
    pieces = [[seconds_to_ms(a), seconds_to_ms(b), int(l)]
              for (a, b), l in zip(segments, labels)]
    for prev, nxt in zip(pieces, pieces[1:]):
        if nxt[0] < prev[1]:
            cut = (nxt[0] + prev[1]) // 2
            prev[1], nxt[0] = cut, cut
    merged = []
    for a, b, l in pieces:
        if b <= a:
            continue
        if merged and merged[-1][2] == l and merged[-1][1] == a:
            merged[-1][1] = b
        else:
            merged.append([a, b, l])
    return [RttmSegment(session_id, a / 1000.0, (b - a) / 1000.0, 'spk%d' % l)
            for a, b, l in merged]


@dataclass(frozen=True)
class DiarizeConfig:
    """ Segmentation and clustering settings

    ``clusterer`` is ``nme_sc`` or ``ahc``; ``ahc_scoring`` picks cosine or
    PLDA similarities for AHC.  ``tap`` empty means the network default.
    """
    width: float = 1.5
    step: float = 0.75
    min_tail: float = 0.5
    clusterer: str = 'nme_sc'
    tap: str = ''
    oracle_k: bool = False
    max_speakers: int = 8
    ahc_threshold: float = 0.0
    ahc_scoring: str = 'plda'
    seed: int = 0

    def __post_init__(self):
        if self.clusterer not in ('nme_sc', 'ahc'):
            raise ParameterError('unknown clusterer %r' % self.clusterer)
        if self.ahc_scoring not in ('plda', 'cosine'):
            raise ParameterError('unknown AHC scoring %r' % self.ahc_scoring)


def _cluster(E, cfg, oracle_k, backend):
    if cfg.clusterer == 'nme_sc':
        labels, result = nme_sc(cosine_affinity(E), oracle_k=oracle_k,
                                max_speakers=cfg.max_speakers, seed=cfg.seed)
        return labels, result.best_p
    if cfg.ahc_scoring == 'plda':
        if backend is None:
            raise ParameterError('AHC on PLDA scores needs a trained backend')
        S = backend.score_matrix(E, E)
    else:
        S = cosine_score_matrix(E, E)
    return ahc_cluster(S, threshold=cfg.ahc_threshold, target_k=oracle_k), None


def diarize_session(features, weights, reference, cfg=DiarizeConfig(),
                    oracle_k=None, backend=None, session_id=None):
    """ Speaker-labeled hypothesis for one session

    Speech regions come from ``reference``; ``oracle_k`` fixes the number
    of speakers.
    """
    if session_id is None:
        session_id = reference[0].session_id if reference else ''
    segments = uniform_segment(speech_regions(reference), cfg.width,
                               cfg.step, cfg.min_tail)
    if not segments:
        return []
    if len(segments) == 1:
        labels, best_p = np.zeros(1, dtype=np.intp), None
    else:
        E = segment_embeddings(features, weights, segments,
                               cfg.tap or default_tap(weights.spec))
        labels, best_p = _cluster(E, cfg, oracle_k, backend)
    logger.info('session %s: %d segments, %d speakers%s', session_id,
                len(segments), len(set(labels.tolist())),
                '' if best_p is None else ' (p=%d)' % best_p)
    return project_labels(session_id, segments, labels)


def max_overlap_assignment(overlap):
    """ One-to-one row/column pairs maximizing the summed overlap

    >>> max_overlap_assignment(np.array([[5, 1], [2, 4]]))
    ([(0, 0), (1, 1)], 9)
    """
    overlap = np.asarray(overlap)
    if overlap.size == 0:
        return [], 0
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols)]
    return pairs, overlap[rows, cols].sum().item()


def _timeline(ref, hyp):
    ref_turns = groupby(lambda s: s.speaker, ref)
    hyp_turns = groupby(lambda s: s.speaker, hyp)
    bounds = sorted(set(t for turns in (_ms_turns(ref), _ms_turns(hyp))
                        for pair in turns for t in pair))
    bounds = np.array(bounds, dtype=np.int64)

    def activity(turns):
        names = sorted(turns)
        active = np.zeros((len(names), max(len(bounds) - 1, 0)), dtype=bool)
        for i, name in enumerate(names):
            for a, b in _ms_turns(turns[name]):
                lo, hi = np.searchsorted(bounds, [a, b])
                active[i, lo:hi] = True
        return names, active

    return np.diff(bounds), activity(ref_turns), activity(hyp_turns)


def _map_from(overlap, ref_names, hyp_names):
    pairs, _ = max_overlap_assignment(overlap)
    mapping = dict((h, UNASSIGNED) for h in hyp_names)
    for r, h in pairs:
        if overlap[r, h] > 0:
            mapping[hyp_names[h]] = ref_names[r]
    return mapping


def optimal_speaker_map(ref, hyp):
    """ ``{hypothesis label: reference label}`` maximizing overlapped time

    Labels left without a partner map to ``UNASSIGNED``.
    """
    dur, (ref_names, R), (hyp_names, H) = _timeline(ref, hyp)
    overlap = (R * dur) @ H.T.astype(np.int64)
    return _map_from(overlap, ref_names, hyp_names)


@dataclass(frozen=True)
class DerBreakdown:
    """ Error components in seconds """
    missed: float = 0.0
    false_alarm: float = 0.0
    speaker_error: float = 0.0
    scored_total: float = 0.0

    @property
    def der(self):
        if self.scored_total <= 0:
            raise UndefinedDerError('no scored reference speech')
        return (self.missed + self.false_alarm
                + self.speaker_error) / self.scored_total

    def __add__(self, other):
        return DerBreakdown(self.missed + other.missed,
                            self.false_alarm + other.false_alarm,
                            self.speaker_error + other.speaker_error,
                            self.scored_total + other.scored_total)


def der_score(ref, hyp, exclude_overlap=True, collar=0.0):
    """ Diarization error of one session

    The timeline is cut at every boundary.  With ``exclude_overlap`` the
    stretches where two or more reference speakers talk are not scored.
    Only ``collar=0`` is supported; boundaries are scored exactly.
    Hypothesis labels are mapped to reference speakers by maximal overlap
    inside the scored stretches.

    >>> ref = [RttmSegment('s', 0.0, 6.0, 'A'),
    ...        RttmSegment('s', 6.0, 4.0, 'B')]
    >>> der_score(ref, [RttmSegment('s', 0.0, 10.0, 'x')]).der
    0.4
    """
    if collar != 0:
        raise ParameterError('collar scoring is not supported, got collar=%r'
                             % (collar,))
    dur, (ref_names, R), (hyp_names, H) = _timeline(ref, hyp)
    n_ref = R.sum(axis=0)
    n_hyp = H.sum(axis=0)
    scored = n_ref <= 1 if exclude_overlap else np.ones_like(n_ref, bool)
    d = dur * scored
    overlap = (R * d) @ H.T.astype(np.int64)
    mapping = _map_from(overlap, ref_names, hyp_names)
    index = dict((name, i) for i, name in enumerate(ref_names))
    correct = np.zeros_like(n_ref)
    for j, h in enumerate(hyp_names):
        r = mapping[h]
        if r != UNASSIGNED:
            correct += R[index[r]] & H[j]
    total = int(np.sum(d * n_ref))
    if total <= 0:
        raise UndefinedDerError('no scored reference speech in session')
    missed = int(np.sum(d * np.maximum(n_ref - n_hyp, 0)))
    fa = int(np.sum(d * np.maximum(n_hyp - n_ref, 0)))
    confusion = int(np.sum(d * (np.minimum(n_ref, n_hyp) - correct)))
    return DerBreakdown(missed / 1000.0, fa / 1000.0, confusion / 1000.0,
                        total / 1000.0)


def aggregate_der(breakdowns, map=map):
    """ Sum error components over sessions before taking the ratio """
    breakdowns = list(breakdowns)
    if not breakdowns:
        return DerBreakdown()
    return fold(add, breakdowns, DerBreakdown(), map=map)


def write_der_report(path, rows):
    """ Tab-separated ``session missed fa spkerr total der`` lines

    ``rows`` holds ``(session_id, DerBreakdown)`` pairs; an ``ALL`` line with
    the aggregate closes the report.  ``path`` may be an open text file.
    """
    rows = list(rows)
    lines = ['session\tmissed\tfa\tspkerr\ttotal\tder']
    for name, b in rows + [('ALL', aggregate_der(b for _, b in rows))]:
        lines.append('%s\t%.3f\t%.3f\t%.3f\t%.3f\t%.2f%%'
                     % (name, b.missed, b.false_alarm, b.speaker_error,
                        b.scored_total, 100.0 * b.der))
    text = '\n'.join(lines) + '\n'
    if hasattr(path, 'write'):
        path.write(text)
    else:
        with atomic_write(path, 'w') as f:
            f.write(text)


@dataclass(frozen=True, eq=False)
class DevSession:
    """ A session prepared for threshold tuning: windows and their scores """
    reference: list
    segments: list
    scores: np.ndarray


def _der_at(session, threshold):
    labels = ahc_cluster(session.scores, threshold=threshold)
    sid = session.reference[0].session_id
    return der_score(session.reference,
                     project_labels(sid, session.segments, labels))


def _best_threshold(sessions, thresholds):
    return min(thresholds, key=lambda t: (
        aggregate_der(_der_at(s, t) for s in sessions).der, t))


def tune_ahc_threshold(sessions, thresholds, folds=2):
    """ Pick the AHC stopping threshold minimizing aggregate DER

    Sessions are dealt round-robin into ``folds``; each fold is scored with
    the threshold chosen on the others.  Returns ``(best, per_fold, cv)``:
    the threshold chosen on all sessions, the per-fold choices and the
    cross-validated ``DerBreakdown``.
    """
    sessions = list(sessions)
    thresholds = list(thresholds)
    if not sessions or not thresholds:
        raise ParameterError('need sessions and candidate thresholds')
    best = _best_threshold(sessions, thresholds)
    folds = min(folds, len(sessions))
    if folds < 2:
        return best, [best], aggregate_der(_der_at(s, best) for s in sessions)
    per_fold, held_out = [], []
    for k in range(folds):
        train = [s for i, s in enumerate(sessions) if i % folds != k]
        test = [s for i, s in enumerate(sessions) if i % folds == k]
        t = _best_threshold(train, thresholds)
        per_fold.append(t)
        held_out.extend(_der_at(s, t) for s in test)
        logger.info('fold %d: threshold %.3f', k, t)
    return best, per_fold, aggregate_der(held_out)
