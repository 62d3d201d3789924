""" Synthetic speech-like corpus for end-to-end checks

A synthetic speaker owns two of ``N_BANDS`` log-spaced frequency bands and
"talks" in syllable-length bursts of band-passed noise separated by short
pauses over a faint noise floor.  Speakers differ in their bands and in the
loudness balance between the two.  Sliding mean normalization removes
stationary spectra, so identity lives in the burst structure of the bands.

The generated tree::

    wav/<utt>.wav            training and held-out utterances
    sessions/<sid>.wav       two-speaker sessions
    train.list, heldout.list, sessions.list   manifests (id, speaker, path)
    trials.txt               enroll test target|nontarget (held-out speakers)
    reference.rttm           turns of every session
    synthetic.cfg            run configuration for this corpus
"""
import itertools
import logging
import os
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .diarize import RttmSegment, write_rttm
from .episodes import write_manifest
from .exceptions import ParameterError
from .features import Waveform, write_wav
from .utils import atomic_write

__all__ = ('SyntheticSpeaker', 'N_BANDS', 'SYNTHETIC_CONFIG', 'band_edges',
           'make_speakers', 'speak', 'make_session', 'generate_corpus')

logger = logging.getLogger(__name__)

N_BANDS = 10
SAMPLE_RATE = 16000

# Run configuration for the synthetic corpus: a narrow protonet encoder
# trained on 4-way 2-shot episodes over 1.5 s crops.
SYNTHETIC_CONFIG = """\
model.tdnn = 64:1:5, 64:2:5, 64:3:7, 64:1:1, 128:1:1
model.fc_dims = 128, 64
train.mode = protonet
train.way = 4
train.shot = 2
train.n_query = 1
train.episodes = 500
train.lr0 = 0.001
train.decay_interval = 50
train.segment_frames = 150
train.log_interval = 50
verify.lda_dim = 7
"""


def band_edges(n_bands=N_BANDS, low=200.0, high=7000.0):
    """ ``n_bands`` adjacent log-spaced ``(lo, hi)`` bands with small guards

    >>> [tuple(round(x) for x in b) for b in band_edges(2, 100.0, 400.0)]
    [(104, 192), (208, 384)]
    """
    edges = np.geomspace(low, high, n_bands + 1)
    return [(a * 1.04, b * 0.96) for a, b in zip(edges[:-1], edges[1:])]


@dataclass(frozen=True)
class SyntheticSpeaker:
    name: str
    bands: tuple
    gains: tuple
    rate: float

    def disjoint(self, other):
        return not set(self.bands) & set(other.bands)


def make_speakers(n, seed=0, prefix='spk'):
    """ ``n`` speakers with distinct band pairs """
    pairs = list(itertools.combinations(range(N_BANDS), 2))
    if n > len(pairs):
        raise ParameterError('at most %d distinct speakers, asked for %d'
                             % (len(pairs), n))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pairs), size=n, replace=False)
    return [SyntheticSpeaker('%s%02d' % (prefix, i), pairs[c],
                             (1.0, float(rng.uniform(0.3, 0.8))),
                             float(rng.uniform(3.0, 6.0)))
            for i, c in enumerate(chosen)]


def _band_noise(band, n, rng, sample_rate):
    lo, hi = band_edges()[band]
    sos = signal.butter(4, [lo, hi], btype='bandpass', fs=sample_rate,
                        output='sos')
    x = signal.sosfilt(sos, rng.standard_normal(n))
    return x / max(np.sqrt(np.mean(x ** 2)), 1e-12)


def _envelope(n, rate, rng, sample_rate):
    """ On/off syllable gating smoothed over 20 ms, ``rate`` bursts a second
    """
    env = np.zeros(n)
    t = int(rng.uniform(0.0, 0.1) * sample_rate)
    while t < n:
        on = int(rng.uniform(0.6, 1.2) / rate * sample_rate)
        off = int(rng.uniform(0.2, 0.5) / rate * sample_rate)
        env[t:t + on] = 1.0
        t += on + off
    ramp = np.hanning(int(0.02 * sample_rate))
    return np.convolve(env, ramp / ramp.sum(), mode='same')


def speak(speaker, duration, rng, sample_rate=SAMPLE_RATE, floor=0.01):
    """ ``duration`` seconds of ``speaker`` as a Waveform """
    n = int(round(duration * sample_rate))
    x = sum(g * _band_noise(b, n, rng, sample_rate)
            for b, g in zip(speaker.bands, speaker.gains))
    x = x * _envelope(n, speaker.rate, rng, sample_rate)
    x = x + floor * rng.standard_normal(n)
    return Waveform(0.3 * x / max(np.abs(x).max(), 1e-12), sample_rate)


def make_session(session_id, a, b, rng, duration=60.0, turn=5.0,
                 sample_rate=SAMPLE_RATE):
    """ Alternating ``turn``-second turns of speakers ``a`` and ``b``

    Returns ``(Waveform, reference segments)``.
    """
    pieces, reference = [], []
    onset = 0.0
    for i in range(int(np.ceil(duration / turn))):
        length = min(turn, duration - onset)
        who = (a, b)[i % 2]
        pieces.append(speak(who, length, rng, sample_rate).samples)
        reference.append(RttmSegment(session_id, round(onset, 3),
                                     round(length, 3), who.name))
        onset += length
    return Waveform(np.concatenate(pieces), sample_rate), reference


def _utterances(speakers, n_utts, rng, out_dir, min_dur, max_dur):
    rows = []
    for spk in speakers:
        for i in range(n_utts):
            utt = '%s-%03d' % (spk.name, i)
            path = os.path.join(out_dir, 'wav', utt + '.wav')
            write_wav(path, speak(spk, rng.uniform(min_dur, max_dur), rng))
            rows.append((utt, spk.name, path))
    return rows


def _trials(rows, rng, n_enroll=2):
    by_speaker = {}
    for utt, spk, _ in rows:
        by_speaker.setdefault(spk, []).append(utt)
    trials = []
    for spk, utts in sorted(by_speaker.items()):
        for enroll in utts[:n_enroll]:
            for test in utts[n_enroll:]:
                trials.append((enroll, test, 'target'))
            others = [u for s, us in by_speaker.items() if s != spk
                      for u in us[n_enroll:]]
            for test in rng.choice(others, size=min(len(others),
                                                     len(utts) - n_enroll),
                                   replace=False):
                trials.append((enroll, str(test), 'nontarget'))
    return trials


def generate_corpus(out_dir, n_train=16, n_heldout=8, n_utts=12,
                    n_sessions=4, session_duration=60.0, turn=5.0,
                    min_dur=2.0, max_dur=4.0, seed=0):
    """ Write the synthetic corpus under ``out_dir`` and return its paths """
    rng = np.random.default_rng(seed)
    speakers = make_speakers(n_train + n_heldout, seed=seed)
    train, heldout = speakers[:n_train], speakers[n_train:]
    for sub in ('wav', 'sessions'):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    paths = dict((name, os.path.join(out_dir, name)) for name in
                 ('train.list', 'heldout.list', 'sessions.list', 'trials.txt',
                  'reference.rttm', 'synthetic.cfg'))
    train_rows = _utterances(train, n_utts, rng, out_dir, min_dur, max_dur)
    heldout_rows = _utterances(heldout, n_utts, rng, out_dir, min_dur,
                               max_dur)
    write_manifest(paths['train.list'], train_rows)
    write_manifest(paths['heldout.list'], heldout_rows)

    with atomic_write(paths['trials.txt'], 'w') as f:
        for row in _trials(heldout_rows, rng):
            f.write('%s %s %s\n' % row)

    pairs = [(a, b) for a, b in itertools.combinations(heldout, 2)
             if a.disjoint(b)]
    if not pairs:
        raise ParameterError('no held-out speakers with disjoint bands')
    session_rows, reference = [], []
    for i in range(n_sessions):
        a, b = pairs[int(rng.integers(len(pairs)))]
        sid = 'session%02d' % i
        wave, ref = make_session(sid, a, b, rng, session_duration, turn)
        path = os.path.join(out_dir, 'sessions', sid + '.wav')
        write_wav(path, wave)
        session_rows.append((sid, 'session', path))
        reference.extend(ref)
    write_manifest(paths['sessions.list'], session_rows)
    write_rttm(paths['reference.rttm'], reference)
    with atomic_write(paths['synthetic.cfg'], 'w') as f:
        f.write(SYNTHETIC_CONFIG)
    logger.info('synthetic corpus: %d train and %d held-out speakers, %d '
                'sessions in %s', n_train, n_heldout, n_sessions, out_dir)
    return paths
