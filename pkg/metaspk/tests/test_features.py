import os

import numpy as np
from scipy.io import wavfile

from metaspk.exceptions import (EmptyInputError, FormatError, ParameterError,
                                UnsupportedFormatError)
from metaspk.features import (FeatureMatrix, MfccConfig, Waveform,
                              compute_mfcc, filterbank_energies, frame_signal,
                              hz_to_mel, mel_filterbank, mel_to_hz,
                              num_frames, read_wav, sliding_cmn, write_wav)
from metaspk.utils import raises


def test_read_wav_zeros(tmpdir):
    path = str(tmpdir.join('zeros.wav'))
    wavfile.write(path, 16000, np.zeros(1600, dtype=np.int16))
    w = read_wav(path)
    assert w.sample_rate == 16000
    assert len(w) == 1600
    assert not w.samples.any()


def test_read_wav_scaling(tmpdir):
    path = str(tmpdir.join('edge.wav'))
    wavfile.write(path, 8000, np.array([-32768, 0, 16384, 32767],
                                       dtype=np.int16))
    w = read_wav(path)
    assert w.sample_rate == 8000
    assert w.samples[0] == -1.0
    assert w.samples[2] == 0.5
    assert w.samples.max() < 1.0


def test_read_wav_unsupported(tmpdir):
    stereo = str(tmpdir.join('stereo.wav'))
    wavfile.write(stereo, 16000, np.zeros((100, 2), dtype=np.int16))
    assert raises(UnsupportedFormatError, lambda: read_wav(stereo))

    floats = str(tmpdir.join('float.wav'))
    wavfile.write(floats, 16000, np.zeros(100, dtype=np.float32))
    assert raises(UnsupportedFormatError, lambda: read_wav(floats))


def test_read_wav_malformed(tmpdir):
    path = str(tmpdir.join('junk.wav'))
    with open(path, 'wb') as f:
        f.write(b'RIFF\x00\x00not a wave file at all')
    assert raises(FormatError, lambda: read_wav(path))


def test_write_wav_roundtrip(tmpdir):
    path = str(tmpdir.join('out.wav'))
    samples = np.array([0.0, 0.25, -0.5, 0.999])
    write_wav(path, Waveform(samples, 16000))
    w = read_wav(path)
    assert np.allclose(w.samples, samples, atol=1.0 / 32768)
    assert os.listdir(str(tmpdir)) == ['out.wav']


def test_waveform_validation():
    assert raises(ParameterError, lambda: Waveform(np.zeros(3), 0))
    assert raises(UnsupportedFormatError,
                  lambda: Waveform(np.zeros((3, 2)), 16000))
    assert Waveform(np.zeros(8000), 16000).duration == 0.5


def test_mel_scale_inverse():
    hz = np.array([0.0, 20.0, 1000.0, 8000.0])
    assert np.allclose(mel_to_hz(hz_to_mel(hz)), hz)


def test_mel_filterbank_peaks():
    fb = mel_filterbank(10, 512, 16000)
    peaks = fb.argmax(axis=1)
    assert (np.diff(peaks) > 0).all()
    assert raises(ParameterError, lambda: mel_filterbank(10, 512, 16000,
                                                         low_freq=9000.0))


def test_num_frames_formula():
    for n in [400, 401, 559, 560, 16000, 12345]:
        assert num_frames(n, 400, 160) == (n - 400) // 160 + 1
        assert len(frame_signal(np.zeros(n), 400, 160)) == num_frames(
            n, 400, 160)


def test_frame_signal_too_short():
    assert raises(EmptyInputError, lambda: frame_signal(np.zeros(10), 400,
                                                        160))
    w = Waveform(np.zeros(300), 16000)
    assert raises(EmptyInputError, lambda: compute_mfcc(w))


def test_mfcc_shape():
    f = compute_mfcc(Waveform(np.zeros(16000), 16000))
    assert f.frames.shape == (98, 30)
    assert f.frame_shift == 0.010
    assert f.frame_width == 0.025


def test_mfcc_constant_input():
    f = compute_mfcc(Waveform(np.zeros(8000), 16000))
    assert np.isfinite(f.frames).all()
    assert (f.frames == f.frames[0]).all()


def test_mfcc_deterministic():
    rng = np.random.default_rng(0)
    w = Waveform(rng.uniform(-0.5, 0.5, 4000), 16000)
    a, b = compute_mfcc(w), compute_mfcc(w)
    assert np.array_equal(a.frames, b.frames)


def test_mfcc_rejects_too_many_ceps():
    w = Waveform(np.zeros(1000), 16000)
    cfg = MfccConfig(num_ceps=40, num_filters=30)
    assert raises(ParameterError, lambda: compute_mfcc(w, cfg))


def reference_energies(samples, sr, cfg):
    """ Frame by frame with an explicit DFT sum and explicit triangles """
    frame_len = int(round(cfg.frame_width * sr))
    step = int(round(cfg.frame_shift * sr))
    n_fft = 1
    while n_fft < frame_len:
        n_fft *= 2
    count = (len(samples) - frame_len) // step + 1
    n = np.arange(frame_len)
    hamming = 0.54 - 0.46 * np.cos(2 * np.pi * n / (frame_len - 1))
    k = np.arange(n_fft // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(k, n) / n_fft)

    def mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def imel(m):
        return 700.0 * (10 ** (m / 2595.0) - 1.0)

    points = imel(np.linspace(mel(cfg.low_freq), mel(sr / 2.0),
                              cfg.num_filters + 2))
    weights = np.zeros((cfg.num_filters, len(k)))
    for m in range(cfg.num_filters):
        lo, mid, hi = points[m], points[m + 1], points[m + 2]
        for j in k:
            f = j * sr / float(n_fft)
            if lo < f <= mid:
                weights[m, j] = (f - lo) / (mid - lo)
            elif mid < f < hi:
                weights[m, j] = (hi - f) / (hi - mid)
    out = np.zeros((count, cfg.num_filters))
    for t in range(count):
        x = samples[t * step:t * step + frame_len].copy()
        y = np.empty_like(x)
        y[0] = x[0] - cfg.preemphasis * x[0]
        y[1:] = x[1:] - cfg.preemphasis * x[:-1]
        spectrum = np.abs(basis @ (y * hamming))
        out[t] = weights @ spectrum
    return out


def test_filterbank_energies_match_direct_dft():
    sr = 16000
    t = np.arange(sr // 10) / float(sr)
    tone = 0.5 * np.sin(2 * np.pi * 1000.0 * t)
    cfg = MfccConfig()
    got = filterbank_energies(Waveform(tone, sr), cfg)
    expected = reference_energies(tone, sr, cfg)
    rel = np.abs(got - expected).max() / np.abs(expected).max()
    assert rel < 1e-6


def test_sliding_cmn_constant():
    f = FeatureMatrix(np.full((500, 4), 3.5))
    assert np.allclose(sliding_cmn(f).frames, 0.0)


def test_sliding_cmn_short_input_is_global_mean():
    rng = np.random.default_rng(1)
    frames = rng.normal(size=(120, 5))
    out = sliding_cmn(FeatureMatrix(frames)).frames
    assert np.allclose(out, frames - frames.mean(axis=0))


def test_sliding_cmn_naive_oracle():
    rng = np.random.default_rng(2)
    frames = rng.normal(size=(1000, 6))
    out = sliding_cmn(FeatureMatrix(frames), 3.0).frames
    for t in [0, 10, 149, 150, 500, 851, 999]:
        lo, hi = max(t - 150, 0), min(t + 150, 999)
        total = np.zeros(6)
        count = 0
        for i in range(lo, hi + 1):
            total += frames[i]
            count += 1
        expected = frames[t] - total / count
        assert np.abs(out[t] - expected).max() <= 1e-10 * max(
            1.0, np.abs(expected).max())
    assert out.shape == frames.shape


def test_sliding_cmn_empty():
    assert raises(EmptyInputError,
                  lambda: sliding_cmn(FeatureMatrix(np.zeros((0, 3)))))


def test_feature_matrix_span():
    f = FeatureMatrix(np.arange(600.0).reshape(300, 2))
    part = f.span(0.75, 2.25)
    first, stop = f.frame_range(0.75, 2.25)
    assert (first, stop) == (75, 223)
    assert part.n_frames == 148
    assert abs(part.start_time - 0.75) < 1e-12
    assert part.frames[0, 0] == 150.0
    tiny = f.span(2.99, 3.0)
    assert tiny.n_frames == 1
