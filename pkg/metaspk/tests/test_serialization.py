import pickle

import numpy as np

import metaspk.curried
from metaspk.cli import _extract
from metaspk.config import RunConfig
from metaspk.features import MfccConfig, Waveform, compute_mfcc
from metaspk.nets import EncoderSpec, build_network


def test_curried_functions():
    f = metaspk.curried.uniform_segment(width=1.0, step=0.5)
    g = pickle.loads(pickle.dumps(f))
    assert f([(0.0, 2.0)]) == g([(0.0, 2.0)])


def test_curried_globals():
    der = pickle.loads(pickle.dumps(metaspk.curried.der_score))
    assert der.func is metaspk.curried.der_score.func


def test_worker_functions():
    f = _extract(MfccConfig(), '/tmp')
    g = pickle.loads(pickle.dumps(f))
    assert g.args == f.args
    assert g.func is f.func


def test_configs():
    cfg = RunConfig()
    assert pickle.loads(pickle.dumps(cfg)) == cfg


def test_weights():
    spec = EncoderSpec(input_dim=4, tdnn=((6, 1, 3),), fc_dims=(5,))
    weights = build_network(spec, seed=0)
    other = pickle.loads(pickle.dumps(weights))
    assert other.spec == spec
    x = Waveform(np.random.default_rng(1).uniform(-.5, .5, 4000), 16000)
    f = compute_mfcc(x)
    assert f.frames.shape == pickle.loads(pickle.dumps(f)).frames.shape
    for name in weights.params:
        assert np.array_equal(weights.params[name], other.params[name])
