""" Episodic meta-learning: task sampling, losses and the training loop

An episode draws ``way`` speakers without replacement and, for each, ``shot``
support and ``n_query`` query utterances.  Utterances of one episode are
cropped to a common length and encoded as a single batch, supports first
(class-major) and queries after them (class-major).
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from toolz import groupby, sliding_window

from . import autograd as ag
from .archive import read_features
from .exceptions import (BatchError, EpisodeError, NumericError,
                         ParameterError, ParseError, SamplingError, SpecError,
                         TrainingAborted)
from .features import FeatureMatrix
from .nets import (build_comparison, build_encoder, build_network,
                   init_from_pretrained, save_weights, with_params)
from .utils import atomic_write

__all__ = ('Utterance', 'LabeledUtteranceStore', 'Episode', 'TrainConfig',
           'StepResult', 'TrainResult', 'MODES', 'read_manifest',
           'write_manifest', 'sample_episode', 'episode_batch',
           'proto_episode_loss', 'relation_episode_loss',
           'classification_step', 'lr_schedule', 'train', 'evaluate_episodes',
           'smoothed_losses', 'way_shot_sweep', 'write_loss_log')

logger = logging.getLogger(__name__)

MODES = {'protonet': 'protonet',
         'relation': 'relation_encoder',
         'xvector_baseline': 'xvector'}


def read_manifest(path):
    """ ``(utt_id, speaker_id, feature_path)`` rows of a dataset manifest """
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            fields = line.split()
            if not fields or fields[0].startswith('#'):
                continue
            if len(fields) != 3:
                raise ParseError('expected "utt_id speaker_id feature_path", '
                                 'got %d fields' % len(fields),
                                 lineno=lineno, path=path)
            rows.append(tuple(fields))
    return rows


def write_manifest(path, rows):
    with atomic_write(path, 'w') as f:
        for row in rows:
            f.write('%s %s %s\n' % tuple(row))


@dataclass(frozen=True, eq=False)
class Utterance:
    utt_id: str
    speaker: str
    features: FeatureMatrix


class LabeledUtteranceStore(object):
    """ Labeled utterances indexed by speaker

    Speakers with fewer than ``min_utterances`` utterances are dropped.

    >>> f = FeatureMatrix(np.zeros((40, 3)))
    >>> store = LabeledUtteranceStore(
    ...     [Utterance('u%d' % i, 'ab'[i % 2], f) for i in range(5)],
    ...     min_utterances=3)
    >>> store.speakers
    ['a']
    """

    def __init__(self, utterances, min_utterances=8):
        by_speaker = groupby(lambda u: u.speaker, utterances)
        self.index = dict((spk, utts) for spk, utts in by_speaker.items()
                          if len(utts) >= min_utterances)
        self.speakers = sorted(self.index)
        self.min_utterances = min_utterances
        dropped = len(by_speaker) - len(self.index)
        if dropped:
            logger.info('dropped %d speakers with fewer than %d utterances',
                        dropped, min_utterances)

    @classmethod
    def from_manifest(cls, path, min_utterances=8, loader=read_features,
                      map=map):
        rows = read_manifest(path)
        feats = list(map(loader, [r[2] for r in rows]))
        return cls([Utterance(u, s, f) for (u, s, _), f in zip(rows, feats)],
                   min_utterances=min_utterances)

    def __len__(self):
        return sum(len(v) for v in self.index.values())

    def utterances(self):
        return [u for spk in self.speakers for u in self.index[spk]]

    def label_of(self, speaker):
        return self.speakers.index(speaker)

    def eligible(self, per_class):
        return [s for s in self.speakers if len(self.index[s]) >= per_class]


@dataclass(frozen=True, eq=False)
class Episode:
    """ ``classes[c]`` owns ``supports[c]`` and ``queries[c]`` """
    classes: tuple
    supports: tuple
    queries: tuple

    @property
    def way(self):
        return len(self.classes)

    @property
    def shot(self):
        return len(self.supports[0]) if self.supports else 0

    @property
    def n_query(self):
        return len(self.queries[0]) if self.queries else 0

    def validate(self):
        if self.way < 1 or len(self.supports) != self.way \
                or len(self.queries) != self.way:
            raise EpisodeError('episode needs supports and queries for each '
                               'of its %d classes' % self.way)
        for c, sup, qry in zip(self.classes, self.supports, self.queries):
            if not sup:
                raise EpisodeError('class %r has no supports' % (c,))
            if len(sup) != self.shot or len(qry) != self.n_query:
                raise EpisodeError('class %r has %d supports and %d queries, '
                                   'expected %d and %d' % (c, len(sup),
                                                           len(qry), self.shot,
                                                           self.n_query))
        if self.n_query < 1:
            raise EpisodeError('episode has no queries')


def sample_episode(store, way, shot, n_query, rng):
    """ Draw one episode uniformly from the eligible speakers """
    if way < 1 or shot < 1 or n_query < 1:
        raise ParameterError('way, shot and n_query must be >= 1')
    eligible = store.eligible(shot + n_query)
    if len(eligible) < way:
        raise SamplingError('episode needs %d speakers with at least %d '
                            'utterances, only %d available (short by %d)'
                            % (way, shot + n_query, len(eligible),
                               way - len(eligible)))
    picked = rng.choice(len(eligible), size=way, replace=False)
    classes, supports, queries = [], [], []
    for i in picked:
        spk = eligible[i]
        utts = store.index[spk]
        chosen = rng.choice(len(utts), size=shot + n_query, replace=False)
        classes.append(spk)
        supports.append(tuple(utts[j] for j in chosen[:shot]))
        queries.append(tuple(utts[j] for j in chosen[shot:]))
    return Episode(tuple(classes), tuple(supports), tuple(queries))


def _crop(frames, length, rng):
    if rng is None or frames.shape[0] == length:
        return frames[:length]
    start = rng.integers(0, frames.shape[0] - length + 1)
    return frames[start:start + length]


def _stack(utterances, segment_frames, rng):
    lengths = [u.features.n_frames for u in utterances]
    length = min(lengths)
    if segment_frames:
        length = min(length, segment_frames)
    return np.stack([_crop(u.features.frames, length, rng)
                     for u in utterances])


def episode_batch(episode, segment_frames=None, rng=None):
    """ ``B x T x F`` batch of an episode: supports then queries

    Every utterance is cropped to ``min(segment_frames, shortest)`` frames,
    at a random offset when ``rng`` is given.
    """
    episode.validate()
    ordered = ([u for sup in episode.supports for u in sup]
               + [u for qry in episode.queries for u in qry])
    return _stack(ordered, segment_frames, rng)


@dataclass(frozen=True, eq=False)
class StepResult:
    """ Loss of one step, with gradients when they were requested """
    loss: float
    accuracy: float
    posteriors: np.ndarray = None
    grads: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)


def _episode_graph(spec, way, shot, n_query, relation):
    g = ag.Graph()
    x = g.input('features')
    emb = build_encoder(g, spec, x)['final']
    dim = spec.embedding_dim
    n_sup = way * shot
    sup = ag.gather(emb, np.arange(n_sup), name='supports')
    qry = ag.gather(emb, np.arange(n_sup, n_sup + way * n_query),
                    name='queries')
    grouped = ag.sum_(ag.reshape(sup, (way, shot, dim)), axis=1)
    if relation:
        n_q = way * n_query
        pairs = ag.concat(ag.gather(grouped, np.tile(np.arange(way), n_q)),
                          ag.gather(qry, np.repeat(np.arange(n_q), way)),
                          name='pairs')
        scores = build_comparison(g, spec, pairs)
        logits = ag.reshape(scores, (n_q, way), name='logits')
    else:
        protos = ag.scale(grouped, 1.0 / shot, name='prototypes')
        logits = ag.neg(ag.sq_euclidean(qry, protos), name='logits')
    targets = np.repeat(np.arange(way), n_query)
    loss = ag.softmax_xent(logits, targets, name='loss')
    return g, logits, loss


def _run(g, logits, loss, weights, batch, targets, training, with_grads,
         seed):
    values = ag.forward(g, dict(weights.bindings(), features=batch),
                        training=training, seed=seed)
    z = values[logits.name]
    posteriors = np.exp(z - z.max(axis=1, keepdims=True))
    posteriors /= posteriors.sum(axis=1, keepdims=True)
    accuracy = float(np.mean(np.argmax(z, axis=1) == targets))
    grads, buffers = {}, {}
    if with_grads:
        grads = dict((k, v) for k, v in ag.backward(g, loss).items()
                     if k in weights.params)
    if training:
        buffers = g.updated_buffers()
    return StepResult(float(values[loss.name]), accuracy, posteriors, grads,
                      buffers)


def _episode_loss(episode, weights, relation, segment_frames, rng, training,
                  with_grads, seed, graph):
    episode.validate()
    if graph is None:
        graph = _episode_graph(weights.spec, episode.way, episode.shot,
                               episode.n_query, relation)
    g, logits, loss = graph
    batch = episode_batch(episode, segment_frames, rng)
    targets = np.repeat(np.arange(episode.way), episode.n_query)
    return _run(g, logits, loss, weights, batch, targets, training,
                with_grads, seed)


def proto_episode_loss(episode, weights, segment_frames=None, rng=None,
                       training=False, with_grads=False, seed=0, graph=None):
    """ Prototypical-network loss and query accuracy of one episode

    Prototypes are the mean support embedding per class; query logits are
    negative squared Euclidean distances to the prototypes; the loss is the
    mean negative log posterior of the true class.
    """
    if weights.spec.head == 'xvector':
        raise SpecError('prototypical loss needs a meta-model head')
    return _episode_loss(episode, weights, False, segment_frames, rng,
                         training, with_grads, seed, graph)


def relation_episode_loss(episode, weights, segment_frames=None, rng=None,
                          training=False, with_grads=False, seed=0,
                          graph=None):
    """ Relation-network loss and query accuracy of one episode

    Class representations are the sum of the support embeddings; every
    (class, query) pair is scored by the comparison network and the scores
    of a query are soft-maxed across classes.
    """
    spec = weights.spec
    if not spec.has_comparison:
        raise SpecError('relation loss needs the relation_encoder head')
    missing = [k for k in ('cmp1.weight', 'cmp1.bias') if k not in
               weights.params]
    if missing:
        raise SpecError('comparison network weights are missing: %s'
                        % ', '.join(missing))
    return _episode_loss(episode, weights, True, segment_frames, rng,
                         training, with_grads, seed, graph)


def _classification_graph(spec):
    g = ag.Graph()
    x = g.input('features')
    logits = build_encoder(g, spec, x)['logits']
    # targets are rebound on every step
    loss = ag.softmax_xent(logits, [], name='loss')
    return g, logits, loss


def classification_step(batch, weights, training=True, with_grads=False,
                        seed=0, graph=None):
    """ Mean softmax cross-entropy of the x-vector head over a minibatch

    ``batch`` is a sequence of ``(frames, label)`` pairs whose frame counts
    must all be equal.
    """
    spec = weights.spec
    if spec.head != 'xvector':
        raise SpecError('classification needs the xvector head')
    frames = [np.asarray(f.frames if isinstance(f, FeatureMatrix) else f)
              for f, _ in batch]
    if not frames:
        raise BatchError('empty minibatch')
    lengths = set(f.shape[0] for f in frames)
    if len(lengths) != 1:
        raise BatchError('minibatch mixes durations: %s frames'
                         % sorted(lengths))
    targets = np.array([label for _, label in batch], dtype=np.intp)
    g, logits, loss = graph or _classification_graph(spec)
    loss.attrs['targets'] = targets
    return _run(g, logits, loss, weights, np.stack(frames), targets, training,
                with_grads, seed)


@dataclass(frozen=True)
class TrainConfig:
    """ Training settings

    ``episodes`` counts steps: one episode per step in the meta modes, one
    optimizer update over ``grad_accum`` minibatches in the baseline mode.
    """
    mode: str = 'protonet'
    way: int = 400
    shot: int = 2
    n_query: int = 1
    episodes: int = 100000
    lr0: float = 1e-4
    gamma: float = 0.9
    decay_interval: int = 10
    lr_floor: float = 1e-6
    lr_peak: float = 2e-3
    lr_final: float = 1e-6
    warmup_fraction: float = 0.1
    grad_accum: int = 4
    minibatch: int = 32
    segment_frames: int = 300
    seed: int = 0
    checkpoint_interval: int = 1000
    log_interval: int = 100
    min_utterances: int = 8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError('unknown training mode %r, expected one of '
                                 '%s' % (self.mode, ', '.join(MODES)))
        if self.way < 2 or self.shot < 1 or self.n_query < 1:
            raise ParameterError('need way >= 2, shot >= 1 and n_query >= 1')
        if self.lr0 <= 0 or not 0 < self.gamma <= 1:
            raise ParameterError('need lr0 > 0 and 0 < gamma <= 1')
        if self.decay_interval < 1 or self.grad_accum < 1 \
                or self.minibatch < 1:
            raise ParameterError('decay_interval, grad_accum and minibatch '
                                 'must be >= 1')


def lr_schedule(step, cfg):
    """ Learning rate at ``step``

    Meta modes decay exponentially, ``lr0 * gamma ** (step // interval)``,
    never below ``lr_floor``.  The baseline warms up linearly from ``lr0`` to
    ``lr_peak`` over the first ``warmup_fraction`` of the run and then decays
    exponentially to ``lr_final`` at the last step.

    >>> round(lr_schedule(10, TrainConfig()), 12)
    9e-05
    """
    if step < 0:
        raise ParameterError('step must be >= 0')
    if cfg.mode != 'xvector_baseline':
        return max(cfg.lr_floor,
                   cfg.lr0 * cfg.gamma ** (step // cfg.decay_interval))
    warmup = int(cfg.warmup_fraction * cfg.episodes)
    if step < warmup:
        return cfg.lr0 + (cfg.lr_peak - cfg.lr0) * step / float(warmup)
    span = max(cfg.episodes - 1 - warmup, 1)
    frac = min((step - warmup) / float(span), 1.0)
    return cfg.lr_peak * (cfg.lr_final / cfg.lr_peak) ** frac


@dataclass(frozen=True, eq=False)
class TrainResult:
    weights: object
    log: list

    @property
    def losses(self):
        return [row[2] for row in self.log]


def write_loss_log(path, rows):
    with atomic_write(path, 'w') as f:
        for step, lr, loss, acc in rows:
            f.write('%d\t%.6g\t%.6f\t%.4f\n' % (step, lr, loss, acc))


def _check_mode(cfg, spec):
    if MODES[cfg.mode] != spec.head:
        raise SpecError('training mode %r needs head %r, the encoder spec '
                        'has %r' % (cfg.mode, MODES[cfg.mode], spec.head))


def _meta_step(store, weights, cfg, graph, rng):
    episode = sample_episode(store, cfg.way, cfg.shot, cfg.n_query, rng)
    loss_fn = (relation_episode_loss if cfg.mode == 'relation'
               else proto_episode_loss)
    return loss_fn(episode, weights, cfg.segment_frames, rng, training=True,
                   with_grads=True, seed=int(rng.integers(2 ** 31)),
                   graph=graph)


def _baseline_step(store, weights, cfg, graph, rng, utterances):
    grads, losses, accs = {}, [], []
    for _ in range(cfg.grad_accum):
        picked = [utterances[i] for i in
                  rng.choice(len(utterances), size=cfg.minibatch)]
        frames = _stack(picked, cfg.segment_frames, rng)
        batch = [(f, store.label_of(u.speaker))
                 for f, u in zip(frames, picked)]
        out = classification_step(batch, weights, training=True,
                                  with_grads=True,
                                  seed=int(rng.integers(2 ** 31)),
                                  graph=graph)
        weights = with_params(weights, buffers=out.buffers)
        for k, v in out.grads.items():
            grads[k] = grads.get(k, 0.0) + v / cfg.grad_accum
        losses.append(out.loss)
        accs.append(out.accuracy)
    return StepResult(float(np.mean(losses)), float(np.mean(accs)), None,
                      grads, weights.buffers)


def train(store, cfg, spec, pretrained=None, checkpoint_path=None,
          log_path=None):
    """ Train a network of ``spec`` on ``store``

    With ``pretrained`` weights the TDNN trunk is copied and the fully
    connected layers are re-initialized.  Returns a ``TrainResult``; a
    numeric failure raises ``TrainingAborted`` carrying the last good weights
    (also written to ``checkpoint_path`` when one is given).
    """
    _check_mode(cfg, spec)
    weights = build_network(spec, seed=cfg.seed)
    if pretrained is not None:
        weights = init_from_pretrained(weights, pretrained, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    state = ag.adam_init(weights.params)
    if cfg.mode == 'xvector_baseline':
        if spec.n_speakers < len(store.speakers):
            raise SpecError('n_speakers=%d is smaller than the %d training '
                            'speakers' % (spec.n_speakers,
                                          len(store.speakers)))
        utterances = store.utterances()
        graph = _classification_graph(spec)

        def step_fn(w):
            return _baseline_step(store, w, cfg, graph, rng, utterances)
    else:
        graph = _episode_graph(spec, cfg.way, cfg.shot, cfg.n_query,
                               cfg.mode == 'relation')

        def step_fn(w):
            return _meta_step(store, w, cfg, graph, rng)

    log = []
    try:
        for step in range(cfg.episodes):
            lr = lr_schedule(step, cfg)
            try:
                out = step_fn(weights)
                params, state = ag.adam_step(weights.params, out.grads,
                                             state, lr)
            except NumericError as e:
                if checkpoint_path:
                    save_weights(weights, checkpoint_path)
                logger.warning('step %d failed (%s); last good weights kept%s',
                               step, e, ' in %s' % checkpoint_path
                               if checkpoint_path else '')
                raise TrainingAborted('training aborted at step %d: %s'
                                      % (step, e), step, weights,
                                      checkpoint_path)
            weights = with_params(weights, params, out.buffers)
            log.append((step, lr, out.loss, out.accuracy))
            if cfg.log_interval and step % cfg.log_interval == 0:
                logger.info('step %d lr %.3g loss %.4f acc %.3f', step, lr,
                            out.loss, out.accuracy)
            if checkpoint_path and cfg.checkpoint_interval \
                    and (step + 1) % cfg.checkpoint_interval == 0:
                save_weights(weights, checkpoint_path)
    finally:
        if log_path:
            write_loss_log(log_path, log)
    return TrainResult(weights, log)


def evaluate_episodes(store, weights, way, shot, n_query, n, rng,
                      segment_frames=None):
    """ Mean query accuracy over ``n`` episodes in inference mode """
    relation = weights.spec.has_comparison
    graph = _episode_graph(weights.spec, way, shot, n_query, relation)
    loss_fn = relation_episode_loss if relation else proto_episode_loss
    accs = [loss_fn(sample_episode(store, way, shot, n_query, rng), weights,
                    segment_frames, rng, graph=graph).accuracy
            for _ in range(n)]
    return float(np.mean(accs))


def smoothed_losses(losses, window=100):
    """ Moving average of a loss curve

    >>> smoothed_losses([4, 2, 0, 2], window=2)
    [3.0, 1.0, 1.0]
    """
    losses = list(losses)
    if not losses:
        return []
    if len(losses) < window:
        return [float(np.mean(losses))]
    return [float(np.mean(w)) for w in sliding_window(window, losses)]


def way_shot_sweep(store, held_out, cfg, spec, ways, shots, n_eval=100,
                   eval_way=None):
    """ Train one model per (way, shot) and score held-out episodes

    Returns ``{(way, shot): accuracy}``.  Held-out episodes use ``eval_way``
    classes, by default as many as the held-out store allows up to ``way``.
    """
    results = {}
    for way in ways:
        for shot in shots:
            run_cfg = replace(cfg, way=way, shot=shot)
            weights = train(store, run_cfg, spec).weights
            n_way = eval_way or min(way, len(held_out.eligible(
                shot + cfg.n_query)))
            rng = np.random.default_rng(cfg.seed + 1)
            acc = evaluate_episodes(held_out, weights, n_way, shot,
                                    cfg.n_query, n_eval, rng,
                                    cfg.segment_frames)
            logger.info('way %d shot %d: held-out accuracy %.4f', way, shot,
                        acc)
            results[(way, shot)] = acc
    return results
