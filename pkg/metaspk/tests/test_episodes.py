import os

import numpy as np
from scipy.special import log_softmax

from metaspk import autograd as ag
from metaspk.archive import write_features
from metaspk.episodes import (Episode, LabeledUtteranceStore, TrainConfig,
                              Utterance, classification_step,
                              episode_batch, evaluate_episodes, lr_schedule,
                              proto_episode_loss, read_manifest,
                              relation_episode_loss, sample_episode,
                              smoothed_losses, train, way_shot_sweep,
                              write_manifest)
from metaspk.exceptions import (BatchError, EpisodeError, NumericError,
                                ParameterError, ParseError, SamplingError,
                                SpecError, TrainingAborted)
from metaspk.features import FeatureMatrix
from metaspk.nets import (EncoderSpec, build_network, embed_batch,
                          load_weights, with_params)
from metaspk.utils import raises


TDNN = ((8, 1, 3), (8, 2, 2), (12, 1, 1))


def spec_for(head):
    return EncoderSpec(input_dim=4, tdnn=TDNN, head=head, fc_dims=(6, 5),
                       n_speakers=6, comparison_dims=(7,))


def make_store(n_speakers=6, n_utts=5, seed=0, min_utterances=2, spread=0.3):
    rng = np.random.default_rng(seed)
    utts = []
    for s in range(n_speakers):
        centroid = rng.normal(size=4) * 2.0
        for i in range(n_utts):
            n = int(rng.integers(20, 31))
            frames = centroid + spread * rng.normal(size=(n, 4))
            utts.append(Utterance('s%d-%d' % (s, i), 's%d' % s,
                                  FeatureMatrix(frames)))
    return LabeledUtteranceStore(utts, min_utterances=min_utterances)


def randomized(weights, seed):
    """ Non-trivial batch-norm parameters and running statistics """
    rng = np.random.default_rng(seed)
    params = dict((k, rng.uniform(0.5, 1.5, v.shape))
                  for k, v in weights.params.items() if k.endswith('gamma'))
    params.update((k, rng.normal(scale=0.1, size=v.shape))
                  for k, v in weights.params.items() if k.endswith('beta'))
    buffers = dict((k, rng.normal(scale=0.1, size=v.shape)
                    if k.endswith('mean') else rng.uniform(0.5, 2.0, v.shape))
                   for k, v in weights.buffers.items())
    return with_params(weights, params, buffers)


def test_manifest_roundtrip(tmpdir):
    path = str(tmpdir.join('m.list'))
    rows = [('u1', 'spkA', '/x/u1.feat'), ('u2', 'spkB', '/x/u2.feat')]
    write_manifest(path, rows)
    assert read_manifest(path) == rows


def test_manifest_parse_error(tmpdir):
    path = str(tmpdir.join('m.list'))
    with open(path, 'w') as f:
        f.write('# comment\nu1 spkA a.feat\nu2 spkB\n')
    try:
        read_manifest(path)
    except ParseError as e:
        assert e.lineno == 3
    else:
        assert False


def test_store_from_manifest(tmpdir):
    rows = []
    for i in range(5):
        path = str(tmpdir.join('u%d.feat' % i))
        write_features(path, FeatureMatrix(np.full((10, 2), float(i))))
        rows.append(('u%d' % i, 'ab'[i % 2], path))
    manifest = str(tmpdir.join('m.list'))
    write_manifest(manifest, rows)
    store = LabeledUtteranceStore.from_manifest(manifest, min_utterances=2)
    assert store.speakers == ['a', 'b']
    assert len(store) == 5
    assert [u.utt_id for u in store.index['a']] == ['u0', 'u2', 'u4']
    assert store.label_of('b') == 1
    assert store.eligible(3) == ['a']


def test_sample_episode():
    store = make_store(n_speakers=6, n_utts=5)
    rng = np.random.default_rng(0)
    for _ in range(20):
        ep = sample_episode(store, 4, 2, 2, rng)
        ep.validate()
        assert (ep.way, ep.shot, ep.n_query) == (4, 2, 2)
        assert len(set(ep.classes)) == 4
        for c, sup, qry in zip(ep.classes, ep.supports, ep.queries):
            ids = [u.utt_id for u in sup + qry]
            assert len(set(ids)) == 4
            assert all(u.speaker == c for u in sup + qry)


def test_sample_episode_uniform_over_speakers():
    store = make_store(n_speakers=50, n_utts=2)
    rng = np.random.default_rng(11)
    counts = dict((s, 0) for s in store.speakers)
    for _ in range(10000):
        for c in sample_episode(store, 10, 1, 1, rng).classes:
            counts[c] += 1
    # binomial(10000, 0.2) per speaker
    mean, sigma = 2000.0, np.sqrt(10000 * 0.2 * 0.8)
    assert sum(counts.values()) == 100000
    assert all(abs(n - mean) < 4 * sigma for n in counts.values()), counts


def test_sample_episode_deficit():
    store = make_store(n_speakers=3, n_utts=5)
    rng = np.random.default_rng(0)
    try:
        sample_episode(store, 5, 2, 1, rng)
    except SamplingError as e:
        assert 'short by 2' in str(e)
    else:
        assert False
    assert raises(SamplingError, lambda: sample_episode(store, 2, 5, 1, rng))
    assert raises(ParameterError, lambda: sample_episode(store, 0, 1, 1, rng))


def test_sample_episode_reproducible():
    store = make_store()
    a = sample_episode(store, 3, 2, 1, np.random.default_rng(5))
    b = sample_episode(store, 3, 2, 1, np.random.default_rng(5))
    assert a.classes == b.classes
    assert [u.utt_id for s in a.supports for u in s] == \
        [u.utt_id for s in b.supports for u in s]


def test_episode_batch_order_and_crop():
    f = lambda v, n: FeatureMatrix(np.full((n, 2), float(v)))
    u = lambda v, n: Utterance(str(v), 'x', f(v, n))
    ep = Episode(('a', 'b'), ((u(1, 20), u(2, 25)), (u(3, 30), u(4, 22))),
                 ((u(5, 40),), (u(6, 21),)))
    batch = episode_batch(ep)
    assert batch.shape == (6, 20, 2)
    assert batch[:, 0, 0].tolist() == [1, 2, 3, 4, 5, 6]
    assert episode_batch(ep, segment_frames=10,
                         rng=np.random.default_rng(0)).shape == (6, 10, 2)


def test_episode_validation():
    u = Utterance('u', 'a', FeatureMatrix(np.zeros((10, 2))))
    assert raises(EpisodeError,
                  lambda: Episode(('a', 'b'), ((u,), (u, u)),
                                  ((u,), (u,))).validate())
    assert raises(EpisodeError,
                  lambda: Episode(('a',), ((u,),), ((),)).validate())


def proto_oracle(E, way, shot, n_query):
    sup = E[:way * shot].reshape(way, shot, -1)
    qry = E[way * shot:]
    protos = sup.mean(axis=1)
    d = ((qry[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    logp = log_softmax(-d, axis=1)
    targets = np.repeat(np.arange(way), n_query)
    return -logp[np.arange(len(targets)), targets].mean()


def comparison_oracle(weights, pairs):
    p, b = weights.params, weights.buffers
    a = pairs @ p['cmp1.weight'].T + p['cmp1.bias']
    a = (a - b['cmp1.bn.running_mean']) / np.sqrt(
        b['cmp1.bn.running_var'] + 1e-5)
    h = np.maximum(a * p['cmp1.bn.gamma'] + p['cmp1.bn.beta'], 0.0)
    return (h @ p['cmp2.weight'].T + p['cmp2.bias'])[:, 0]


def relation_oracle(weights, E, way, shot, n_query):
    sup = E[:way * shot].reshape(way, shot, -1)
    qry = E[way * shot:]
    classes = sup.sum(axis=1)
    n_q = len(qry)
    scores = np.zeros((n_q, way))
    for j in range(n_q):
        for c in range(way):
            pair = np.concatenate([classes[c], qry[j]])[None]
            scores[j, c] = comparison_oracle(weights, pair)[0]
    logp = log_softmax(scores, axis=1)
    targets = np.repeat(np.arange(way), n_query)
    return -logp[np.arange(n_q), targets].mean()


def test_proto_loss_matches_dense_oracle():
    store = make_store()
    rng = np.random.default_rng(1)
    for trial in range(100):
        weights = randomized(build_network(spec_for('protonet'), seed=trial),
                             trial)
        way, shot, n_query = [(3, 2, 1), (4, 1, 2), (2, 3, 2)][trial % 3]
        ep = sample_episode(store, way, shot, n_query, rng)
        out = proto_episode_loss(ep, weights)
        E = embed_batch(weights, episode_batch(ep), tap='final')
        assert abs(out.loss - proto_oracle(E, way, shot, n_query)) < 1e-10
        assert out.posteriors.shape == (way * n_query, way)
        assert np.allclose(out.posteriors.sum(axis=1), 1.0)


def test_relation_loss_matches_dense_oracle():
    store = make_store()
    rng = np.random.default_rng(2)
    for trial in range(100):
        weights = randomized(build_network(spec_for('relation_encoder'),
                                           seed=trial), trial)
        way, shot, n_query = [(3, 2, 1), (4, 1, 2), (2, 3, 2)][trial % 3]
        ep = sample_episode(store, way, shot, n_query, rng)
        out = relation_episode_loss(ep, weights)
        E = embed_batch(weights, episode_batch(ep), tap='final')
        expected = relation_oracle(weights, E, way, shot, n_query)
        assert abs(out.loss - expected) < 1e-10


def numeric_check(loss_fn, weights, names, rng, h=1e-5, zero_tol=1e-9):
    """ Central differences on a sample of entries of each of ``names``

    Returns ``{name: relative error}``.  A parameter whose sampled analytic
    and numeric gradients both vanish maps to ``0.0``.
    """
    analytic = loss_fn(weights, True).grads
    errors = {}
    for name in names:
        value = weights.params[name]
        a, n = [], []
        for _ in range(4):
            i = tuple(int(rng.integers(0, s)) for s in value.shape)
            up, down = value.copy(), value.copy()
            up[i] += h
            down[i] -= h
            f_up = loss_fn(with_params(weights, {name: up}), False).loss
            f_down = loss_fn(with_params(weights, {name: down}), False).loss
            n.append((f_up - f_down) / (2 * h))
            a.append(analytic[name][i])
        a, n = np.array(a), np.array(n)
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        errors[name] = 0.0 if scale < zero_tol else \
            float(np.linalg.norm(a - n) / scale)
    return errors


def test_episode_loss_gradients():
    store = make_store()
    rng = np.random.default_rng(3)
    names = ['tdnn1.weight', 'tdnn2.bias', 'tdnn3.bn.gamma', 'fc1.weight',
             'fc2.bn.beta', 'fc2.weight']
    for head, loss in [('protonet', proto_episode_loss),
                       ('relation_encoder', relation_episode_loss)]:
        extra = ['cmp1.weight', 'cmp2.weight', 'cmp1.bn.gamma'] \
            if head == 'relation_encoder' else []
        for trial in range(3):
            weights = randomized(build_network(spec_for(head), seed=trial),
                                 trial)
            ep = sample_episode(store, 3, 2, 1, rng)
            for training in (False, True):
                def fn(w, grads):
                    return loss(ep, w, training=training, with_grads=grads,
                                seed=7)
                errors = numeric_check(fn, weights, names + extra, rng)
                for name, err in errors.items():
                    assert err < 1e-4, (head, training, name, err)


def test_training_step_returns_buffers():
    store = make_store()
    weights = build_network(spec_for('protonet'), seed=0)
    ep = sample_episode(store, 3, 2, 1, np.random.default_rng(0))
    out = proto_episode_loss(ep, weights, training=True, with_grads=True)
    assert set(out.grads) == set(weights.params)
    assert set(out.buffers) == set(weights.buffers)
    assert proto_episode_loss(ep, weights).buffers == {}


def test_loss_head_checks():
    store = make_store()
    ep = sample_episode(store, 2, 1, 1, np.random.default_rng(0))
    proto = build_network(spec_for('protonet'))
    xvec = build_network(spec_for('xvector'))
    assert raises(SpecError, lambda: relation_episode_loss(ep, proto))
    assert raises(SpecError, lambda: proto_episode_loss(ep, xvec))
    relation = build_network(spec_for('relation_encoder'))
    stripped = dict((k, v) for k, v in relation.params.items()
                    if not k.startswith('cmp'))
    broken = type(relation)(relation.spec, stripped, relation.buffers)
    assert raises(SpecError, lambda: relation_episode_loss(ep, broken))


def test_classification_step():
    weights = build_network(spec_for('xvector'), seed=0)
    rng = np.random.default_rng(0)
    batch = [(rng.normal(size=(20, 4)), i % 6) for i in range(8)]
    out = classification_step(batch, weights, with_grads=True)
    assert np.isfinite(out.loss)
    assert set(out.grads) == set(weights.params)
    assert out.posteriors.shape == (8, 6)
    uneven = batch[:2] + [(rng.normal(size=(21, 4)), 0)]
    assert raises(BatchError, lambda: classification_step(uneven, weights))
    assert raises(BatchError, lambda: classification_step([], weights))
    proto = build_network(spec_for('protonet'))
    assert raises(SpecError, lambda: classification_step(batch, proto))


def test_lr_schedule_meta():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 1e-4
    assert lr_schedule(9, cfg) == 1e-4
    assert abs(lr_schedule(25, cfg) - 1e-4 * 0.81) < 1e-18
    assert lr_schedule(10 ** 6, cfg) == cfg.lr_floor
    assert raises(ParameterError, lambda: lr_schedule(-1, cfg))


def test_lr_schedule_baseline():
    cfg = TrainConfig(mode='xvector_baseline', episodes=101,
                      warmup_fraction=0.1)
    assert lr_schedule(0, cfg) == cfg.lr0
    assert abs(lr_schedule(10, cfg) - cfg.lr_peak) < 1e-15
    assert abs(lr_schedule(100, cfg) - cfg.lr_final) < 1e-15
    rates = [lr_schedule(s, cfg) for s in range(101)]
    assert rates.index(max(rates)) == 10


def test_train_config_validation():
    assert raises(ParameterError, lambda: TrainConfig(mode='maml'))
    assert raises(ParameterError, lambda: TrainConfig(way=1))
    assert raises(ParameterError, lambda: TrainConfig(lr0=0))


def small_cfg(**kwargs):
    base = dict(way=3, shot=2, n_query=1, episodes=30, lr0=3e-3,
                decay_interval=10, segment_frames=20, log_interval=10,
                checkpoint_interval=10, min_utterances=2)
    base.update(kwargs)
    return TrainConfig(**base)


def test_train_protonet_learns(tmpdir):
    store = make_store(n_speakers=6, n_utts=6)
    ckpt = str(tmpdir.join('ckpt.bin'))
    log = str(tmpdir.join('loss.log'))
    result = train(store, small_cfg(episodes=60), spec_for('protonet'),
                   checkpoint_path=ckpt, log_path=log)
    assert len(result.log) == 60
    losses = result.losses
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    assert os.path.exists(ckpt)
    assert load_weights(ckpt).spec == spec_for('protonet')
    with open(log) as f:
        lines = f.read().splitlines()
    assert len(lines) == 60
    assert lines[0].split('\t')[0] == '0'
    acc = evaluate_episodes(store, result.weights, 3, 2, 1, 20,
                            np.random.default_rng(9), segment_frames=20)
    assert acc > 0.8


def test_train_protonet_separates_gaussian_classes():
    store = make_store(n_speakers=8, n_utts=8, seed=5)
    cfg = small_cfg(way=4, shot=2, n_query=2, episodes=500,
                    decay_interval=50, log_interval=100)
    result = train(store, cfg, spec_for('protonet'))
    accuracies = [acc for _, _, _, acc in result.log]
    assert np.mean(accuracies[-100:]) >= 0.95


def test_train_reproducible():
    store = make_store()
    cfg = small_cfg(mode='relation', episodes=5)
    a = train(store, cfg, spec_for('relation_encoder'))
    b = train(store, cfg, spec_for('relation_encoder'))
    assert a.losses == b.losses
    for k in a.weights.params:
        assert np.array_equal(a.weights.params[k], b.weights.params[k])


def test_train_mode_head_mismatch():
    store = make_store()
    assert raises(SpecError, lambda: train(store, small_cfg(mode='relation'),
                                           spec_for('protonet')))


def test_train_xvector_baseline():
    store = make_store()
    cfg = small_cfg(mode='xvector_baseline', episodes=4, minibatch=4,
                    grad_accum=2)
    result = train(store, cfg, spec_for('xvector'))
    assert len(result.losses) == 4
    assert all(np.isfinite(result.losses))
    too_few = EncoderSpec(input_dim=4, tdnn=TDNN, head='xvector',
                          fc_dims=(6, 5), n_speakers=3)
    assert raises(SpecError, lambda: train(store, cfg, too_few))


def test_retrain_from_pretrained_keeps_trunk():
    store = make_store()
    source = train(store, small_cfg(mode='xvector_baseline', episodes=2,
                                    minibatch=4, grad_accum=1),
                   spec_for('xvector')).weights
    result = train(store, small_cfg(episodes=1, lr0=1e-12, lr_floor=0.0),
                   spec_for('protonet'), pretrained=source)
    assert np.allclose(result.weights.params['tdnn1.weight'],
                       source.params['tdnn1.weight'], atol=1e-9)


def test_train_aborts_with_checkpoint(tmpdir, monkeypatch):
    store = make_store()
    ckpt = str(tmpdir.join('ckpt.bin'))
    real = ag.adam_step
    calls = []

    def failing(params, grads, state, lr):
        calls.append(1)
        if len(calls) == 3:
            raise NumericError('non-finite gradient', node='fc1.weight')
        return real(params, grads, state, lr)

    monkeypatch.setattr(ag, 'adam_step', failing)
    try:
        train(store, small_cfg(episodes=10), spec_for('protonet'),
              checkpoint_path=ckpt)
    except TrainingAborted as e:
        assert e.step == 2
        assert e.checkpoint == ckpt
        assert e.weights is not None
    else:
        assert False
    assert os.path.exists(ckpt)


def test_smoothed_losses():
    assert smoothed_losses([]) == []
    assert smoothed_losses([1.0, 3.0], window=5) == [2.0]
    assert smoothed_losses(range(5), window=2) == [0.5, 1.5, 2.5, 3.5]


def test_way_shot_sweep():
    store = make_store(n_speakers=6, n_utts=5, seed=1)
    held_out = make_store(n_speakers=4, n_utts=5, seed=2)
    results = way_shot_sweep(store, held_out, small_cfg(episodes=3),
                             spec_for('protonet'), ways=[2, 3], shots=[1, 2],
                             n_eval=4)
    assert sorted(results) == [(2, 1), (2, 2), (3, 1), (3, 2)]
    assert all(0.0 <= v <= 1.0 for v in results.values())
