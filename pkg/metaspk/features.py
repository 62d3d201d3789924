""" Audio ingestion and MFCC front end

The front end follows the usual x-vector recipe: 25 ms Hamming frames every
10 ms, a 30-band mel filterbank, log compression, an orthonormal DCT-II and
cepstral mean normalization over a sliding three second window.
"""
import math
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft
from scipy.io import wavfile

from .exceptions import (EmptyInputError, FormatError, ParameterError,
                         UnsupportedFormatError)
from .utils import atomic_write

__all__ = ('Waveform', 'FeatureMatrix', 'MfccConfig', 'read_wav', 'write_wav',
           'hz_to_mel', 'mel_to_hz', 'mel_filterbank', 'frame_signal',
           'filterbank_energies', 'compute_mfcc', 'sliding_cmn', 'num_frames')

PCM16_SCALE = 32768.0


@dataclass(frozen=True, eq=False)
class Waveform:
    """ Mono audio with amplitudes in [-1, 1] """
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ParameterError('sample_rate must be positive, got %r'
                                 % (self.sample_rate,))
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise UnsupportedFormatError('waveform must be mono, got shape %s'
                                         % (samples.shape,))
        object.__setattr__(self, 'samples', samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / float(self.sample_rate)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """ ``T x F`` frames with their timing

    Frame ``i`` covers ``[start_time + i * frame_shift,
    start_time + i * frame_shift + frame_width)``.
    """
    frames: np.ndarray
    frame_shift: float = 0.010
    frame_width: float = 0.025
    start_time: float = 0.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ParameterError('frames must be a T x F matrix, got shape %s'
                                 % (frames.shape,))
        object.__setattr__(self, 'frames', frames)

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]

    @property
    def end_time(self):
        return (self.start_time + (self.n_frames - 1) * self.frame_shift
                + self.frame_width)

    def frame_range(self, onset, offset):
        """ Indices ``[first, last)`` of the frames lying inside a time span

        At least one frame is always returned when the span overlaps the
        matrix at all.

        >>> f = FeatureMatrix(np.zeros((300, 2)))
        >>> f.frame_range(0.0, 1.5)
        (0, 148)
        """
        first = int(math.ceil((onset - self.start_time) / self.frame_shift
                              - 1e-6))
        last = int(math.floor((offset - self.start_time - self.frame_width)
                              / self.frame_shift + 1e-6))
        first = min(max(first, 0), self.n_frames - 1)
        last = min(max(last, first), self.n_frames - 1)
        return first, last + 1

    def span(self, onset, offset):
        """ The sub-matrix of frames inside ``[onset, offset]`` """
        first, stop = self.frame_range(onset, offset)
        return replace(self, frames=self.frames[first:stop],
                       start_time=self.start_time + first * self.frame_shift)


@dataclass(frozen=True)
class MfccConfig:
    """ Front-end settings

    ``high_freq <= 0`` means the Nyquist frequency and ``fft_size == 0``
    picks the smallest power of two holding one frame.
    """
    num_ceps: int = 30
    num_filters: int = 30
    frame_width: float = 0.025
    frame_shift: float = 0.010
    preemphasis: float = 0.97
    low_freq: float = 20.0
    high_freq: float = 0.0
    log_floor: float = 1e-10
    fft_size: int = 0
    cmn_window: float = 3.0


def read_wav(path):
    """ Read a 16-bit mono PCM WAV file """
    try:
        sample_rate, data = wavfile.read(path)
    except ValueError as e:
        raise FormatError('%s: malformed WAV file (%s)' % (path, e))
    if data.dtype != np.int16:
        raise UnsupportedFormatError('%s: only 16-bit PCM is supported, got %s'
                                     % (path, data.dtype))
    if data.ndim != 1:
        raise UnsupportedFormatError('%s: only mono audio is supported, got '
                                     '%d channels' % (path, data.shape[1]))
    return Waveform(data.astype(np.float64) / PCM16_SCALE, int(sample_rate))


def write_wav(path, waveform):
    """ Write a waveform as 16-bit mono PCM """
    pcm = np.clip(np.round(waveform.samples * PCM16_SCALE), -32768, 32767)
    with atomic_write(path) as f:
        wavfile.write(f, waveform.sample_rate, pcm.astype(np.int16))


def hz_to_mel(hz):
    """ HTK mel scale

    >>> round(float(hz_to_mel(1000.0)), 1)
    1000.0
    """
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def _fft_size(cfg, frame_len):
    if cfg.fft_size:
        if cfg.fft_size < frame_len:
            raise ParameterError('fft_size %d is shorter than a frame (%d)'
                                 % (cfg.fft_size, frame_len))
        return cfg.fft_size
    return 1 << (frame_len - 1).bit_length()


def mel_filterbank(num_filters, fft_size, sample_rate, low_freq=20.0,
                   high_freq=0.0):
    """ Triangular filters evenly spaced on the mel scale

    Returns a ``num_filters x (fft_size // 2 + 1)`` weight matrix applied to
    a one-sided spectrum.

    >>> fb = mel_filterbank(30, 512, 16000)
    >>> fb.shape
    (30, 257)
    >>> bool((fb >= 0).all() and (fb <= 1).all())
    True
    """
    nyquist = sample_rate / 2.0
    if high_freq <= 0:
        high_freq = nyquist + high_freq
    if not 0 <= low_freq < high_freq <= nyquist:
        raise ParameterError('invalid filterbank range [%r, %r] Hz'
                             % (low_freq, high_freq))
    edges = mel_to_hz(np.linspace(hz_to_mel(low_freq), hz_to_mel(high_freq),
                                  num_filters + 2))
    freqs = np.arange(fft_size // 2 + 1) * (sample_rate / float(fft_size))
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - left) / (center - left)
    falling = (right - freqs) / (right - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def num_frames(n_samples, frame_len, frame_step):
    """ Number of complete frames in a signal

    >>> num_frames(16000, 400, 160)
    98
    """
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // frame_step + 1


def frame_signal(samples, frame_len, frame_step):
    """ ``T x frame_len`` view of overlapping frames, no padding """
    samples = np.asarray(samples, dtype=np.float64)
    count = num_frames(len(samples), frame_len, frame_step)
    if count == 0:
        raise EmptyInputError('audio has %d samples, shorter than one frame '
                              'of %d' % (len(samples), frame_len))
    return sliding_window_view(samples, frame_len)[::frame_step][:count]


def _frame_geometry(w, cfg):
    frame_len = int(round(cfg.frame_width * w.sample_rate))
    frame_step = int(round(cfg.frame_shift * w.sample_rate))
    if frame_len < 1 or frame_step < 1:
        raise ParameterError('frame width and shift must span at least one '
                             'sample')
    return frame_len, frame_step


def filterbank_energies(w, cfg=MfccConfig()):
    """ Mel filterbank outputs of the magnitude spectrum, before the log

    Each frame is pre-emphasized, Hamming-windowed and transformed with a
    zero-padded real DFT.
    """
    frame_len, frame_step = _frame_geometry(w, cfg)
    frames = frame_signal(w.samples, frame_len, frame_step)
    previous = np.concatenate([frames[:, :1], frames[:, :-1]], axis=1)
    emphasized = frames - cfg.preemphasis * previous
    windowed = emphasized * np.hamming(frame_len)
    n_fft = _fft_size(cfg, frame_len)
    magnitude = np.abs(fft.rfft(windowed, n=n_fft, axis=1))
    fbank = mel_filterbank(cfg.num_filters, n_fft, w.sample_rate,
                           cfg.low_freq, cfg.high_freq)
    return magnitude @ fbank.T


def compute_mfcc(w, cfg=MfccConfig()):
    """ Mel-frequency cepstral coefficients of a waveform

    >>> w = Waveform(np.zeros(16000), 16000)
    >>> compute_mfcc(w).frames.shape
    (98, 30)
    """
    if cfg.num_ceps > cfg.num_filters:
        raise ParameterError('num_ceps (%d) exceeds num_filters (%d)'
                             % (cfg.num_ceps, cfg.num_filters))
    energies = filterbank_energies(w, cfg)
    log_energies = np.log(np.maximum(energies, cfg.log_floor))
    ceps = fft.dct(log_energies, type=2, axis=1, norm='ortho')
    return FeatureMatrix(ceps[:, :cfg.num_ceps], frame_shift=cfg.frame_shift,
                         frame_width=cfg.frame_width)


def sliding_cmn(f, window_s=3.0):
    """ Subtract the mean of a centered sliding window from every frame

    The window holds ``round(window_s / frame_shift)`` frames and is
    truncated at the edges of the utterance.

    >>> f = FeatureMatrix(np.array([[1.0], [2.0], [3.0]]))
    >>> sliding_cmn(f).frames.ravel().tolist()
    [-1.0, 0.0, 1.0]
    """
    frames = f.frames
    n = frames.shape[0]
    if n == 0:
        raise EmptyInputError('cannot normalize an empty feature matrix')
    half = int(round(window_s / f.frame_shift)) // 2
    csum = np.vstack([np.zeros((1, frames.shape[1])),
                      np.cumsum(frames, axis=0)])
    index = np.arange(n)
    lo = np.maximum(index - half, 0)
    hi = np.minimum(index + half + 1, n)
    means = (csum[hi] - csum[lo]) / (hi - lo)[:, None]
    return replace(f, frames=frames - means)
