""" Encoder networks: x-vector baseline, prototypical and relation networks

All three share a time-delay (TDNN) trunk followed by statistics pooling.
The heads differ:

* ``xvector``: fc1 and fc2 (affine, ReLU, batch-norm, dropout) and a softmax
  output layer over the training speakers.
* ``protonet``: a stack of affine, batch-norm, ReLU layers; the last one has
  no ReLU and its batch-norm output is the embedding.
* ``relation_encoder``: the same kind of stack, plus a comparison network
  scoring concatenated (class, query) embedding pairs.

Parameters are plain arrays named ``<layer>.weight``, ``<layer>.bias``,
``<layer>.bn.gamma`` and ``<layer>.bn.beta``; batch-norm running statistics
are buffers named ``<layer>.bn.running_mean`` and ``<layer>.bn.running_var``.
"""
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from toolz import concat, merge, valmap

from . import autograd as ag
from .archive import read_weight_file, write_weight_file
from .exceptions import IncompatibleWeightsError, InputLengthError, SpecError
from .features import FeatureMatrix

__all__ = ('TdnnLayerSpec', 'EncoderSpec', 'NetworkWeights', 'HEADS',
           'DEFAULT_TDNN', 'receptive_field', 'parameter_shapes',
           'buffer_shapes', 'count_parameters', 'build_network',
           'init_from_pretrained', 'build_encoder', 'build_comparison',
           'default_tap', 'valid_taps', 'embed', 'embed_batch',
           'save_weights', 'load_weights', 'spec_to_text', 'spec_from_text',
           'with_params')

HEADS = ('xvector', 'protonet', 'relation_encoder')


@dataclass(frozen=True)
class TdnnLayerSpec:
    """ Time-delay layer F(N, D, K): N outputs, dilation D, context K """
    out_dim: int
    dilation: int = 1
    context: int = 1

    def __post_init__(self):
        if min(self.out_dim, self.dilation, self.context) < 1:
            raise SpecError('TDNN layer F(%d,%d,%d) needs N, D, K >= 1'
                            % (self.out_dim, self.dilation, self.context))


DEFAULT_TDNN = (TdnnLayerSpec(512, 1, 5), TdnnLayerSpec(512, 2, 5),
                TdnnLayerSpec(512, 3, 7), TdnnLayerSpec(512, 1, 1),
                TdnnLayerSpec(1500, 1, 1))

_DEFAULT_FC = {'xvector': (512, 512),
               'protonet': (512, 512, 512, 512),
               'relation_encoder': (512, 512, 512)}


@dataclass(frozen=True)
class EncoderSpec:
    """ Architecture of one encoder family

    ``fc_dims`` defaults by head: fc1/fc2 for the x-vector, and fc1/fc2 plus
    two (protonet) or one (relation encoder) further layers for the meta
    models.  ``comparison_dims`` lists the hidden widths of the comparison
    network, whose output is a single relation score.

    >>> count_parameters(EncoderSpec(head='protonet'))
    6591892
    """
    input_dim: int = 30
    tdnn: tuple = DEFAULT_TDNN
    head: str = 'protonet'
    fc_dims: tuple = ()
    n_speakers: int = 7323
    comparison_dims: tuple = (512,)
    dropout: float = 0.1
    bn_momentum: float = ag.BN_MOMENTUM
    bn_eps: float = ag.BN_EPS

    def __post_init__(self):
        if self.head not in HEADS:
            raise SpecError('unknown head %r, expected one of %s'
                            % (self.head, ', '.join(HEADS)))
        tdnn = tuple(l if isinstance(l, TdnnLayerSpec) else TdnnLayerSpec(*l)
                     for l in self.tdnn)
        if not tdnn:
            raise SpecError('at least one TDNN layer is required')
        object.__setattr__(self, 'tdnn', tdnn)
        fc = tuple(self.fc_dims) or _DEFAULT_FC[self.head]
        object.__setattr__(self, 'fc_dims', fc)
        object.__setattr__(self, 'comparison_dims',
                           tuple(self.comparison_dims))
        if min(fc) < 1 or self.input_dim < 1:
            raise SpecError('layer widths must be positive')
        if self.head == 'xvector' and self.n_speakers < 2:
            raise SpecError('the x-vector head needs n_speakers >= 2')
        if self.head == 'xvector' and len(fc) < 2:
            raise SpecError('the x-vector head needs fc1 and fc2')
        if not 0.0 <= self.dropout < 1.0:
            raise SpecError('dropout must lie in [0, 1)')

    @property
    def has_comparison(self):
        return self.head == 'relation_encoder'

    @property
    def embedding_dim(self):
        return self.fc_dims[-1]


def receptive_field(spec):
    """ Frames consumed by the TDNN trunk for one output frame

    >>> receptive_field(EncoderSpec())
    31
    """
    return 1 + sum((l.context - 1) * l.dilation for l in spec.tdnn)


def _fc_names(spec):
    return ['fc%d' % i for i in range(1, len(spec.fc_dims) + 1)]


def _layers(spec):
    """ ``(name, fan_in, out_dim, has_bn)`` for every affine layer """
    layers = []
    width = spec.input_dim
    for i, l in enumerate(spec.tdnn, 1):
        layers.append(('tdnn%d' % i, l.context * width, l.out_dim, True))
        width = l.out_dim
    width *= 2
    for name, d in zip(_fc_names(spec), spec.fc_dims):
        layers.append((name, width, d, True))
        width = d
    if spec.head == 'xvector':
        layers.append(('output', width, spec.n_speakers, False))
    if spec.has_comparison:
        width *= 2
        for i, d in enumerate(spec.comparison_dims, 1):
            layers.append(('cmp%d' % i, width, d, True))
            width = d
        layers.append(('cmp%d' % (len(spec.comparison_dims) + 1), width, 1,
                       False))
    return layers


def parameter_shapes(spec):
    """ Ordered ``{name: shape}`` of the trainable parameters """
    shapes = {}
    for name, fan_in, out, bn in _layers(spec):
        shapes[name + '.weight'] = (out, fan_in)
        shapes[name + '.bias'] = (out,)
        if bn:
            shapes[name + '.bn.gamma'] = (out,)
            shapes[name + '.bn.beta'] = (out,)
    return shapes


def buffer_shapes(spec):
    shapes = {}
    for name, fan_in, out, bn in _layers(spec):
        if bn:
            shapes[name + '.bn.running_mean'] = (out,)
            shapes[name + '.bn.running_var'] = (out,)
    return shapes


def count_parameters(spec):
    """ Number of trainable scalars; running statistics are not counted

    >>> count_parameters(EncoderSpec(head='xvector'))
    9821231
    >>> count_parameters(EncoderSpec(head='relation_encoder'))
    6854549
    """
    return int(sum(np.prod(s) for s in parameter_shapes(spec).values()))


@dataclass(frozen=True, eq=False)
class NetworkWeights:
    """ Parameters and batch-norm buffers of one network """
    spec: EncoderSpec
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def bindings(self):
        """ Every array keyed by its graph input name """
        return merge(self.params, self.buffers)

    def n_parameters(self):
        return int(sum(v.size for v in self.params.values()))


def _is_tdnn(name):
    return name.startswith('tdnn')


def _fresh_buffers(spec):
    return dict((name, np.zeros(shape) if name.endswith('running_mean')
                 else np.ones(shape))
                for name, shape in buffer_shapes(spec).items())


def build_network(spec, seed=0):
    """ Allocate and initialize the parameters of ``spec``

    Weights and biases are uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``;
    batch-norm scales start at 1 and shifts at 0.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, fan_in, out, bn in _layers(spec):
        bound = 1.0 / np.sqrt(fan_in)
        params[name + '.weight'] = rng.uniform(-bound, bound, (out, fan_in))
        params[name + '.bias'] = rng.uniform(-bound, bound, (out,))
        if bn:
            params[name + '.bn.gamma'] = np.ones(out)
            params[name + '.bn.beta'] = np.zeros(out)
    return NetworkWeights(spec, params, _fresh_buffers(spec))


def init_from_pretrained(target, source, seed=0):
    """ Copy the TDNN trunk of ``source`` into ``target``

    TDNN weights, biases, batch-norm parameters and running statistics are
    copied verbatim.  Every fully connected weight and bias is redrawn
    uniform in ``[-1/sqrt(N), 1/sqrt(N)]`` with ``N`` the parameter count
    of its layer.
    """
    rng = np.random.default_rng(seed)
    params = dict(target.params)
    buffers = dict(target.buffers)
    for name in concat([params, buffers]):
        if not _is_tdnn(name):
            continue
        pool = source.params if name in source.params else source.buffers
        layer = name.split('.')[0]
        if name not in pool:
            raise IncompatibleWeightsError('source has no %r' % name,
                                           layer=layer)
        if pool[name].shape != target.bindings()[name].shape:
            raise IncompatibleWeightsError(
                'layer %s: %s has shape %s in the source, %s in the target'
                % (layer, name, pool[name].shape,
                   target.bindings()[name].shape), layer=layer)
        (params if name in params else buffers)[name] = pool[name].copy()
    for name, fan_in, out, bn in _layers(target.spec):
        if _is_tdnn(name):
            continue
        bound = 1.0 / np.sqrt(fan_in * out + out)
        params[name + '.weight'] = rng.uniform(-bound, bound, (out, fan_in))
        params[name + '.bias'] = rng.uniform(-bound, bound, (out,))
    return NetworkWeights(target.spec, params, buffers)


def _param(g, name):
    return g.by_name[name] if name in g.by_name else g.input(name)


def _affine(g, h, layer):
    return ag.affine(h, _param(g, layer + '.weight'),
                     _param(g, layer + '.bias'), name=layer)


def _bn(g, spec, h, layer):
    p = layer + '.bn.'
    return ag.batch_norm(h, _param(g, p + 'gamma'), _param(g, p + 'beta'),
                         _param(g, p + 'running_mean'),
                         _param(g, p + 'running_var'),
                         momentum=spec.bn_momentum, eps=spec.bn_eps,
                         name=layer + '.bn.out')


def build_encoder(g, spec, x):
    """ Add the encoder of ``spec`` on top of node ``x`` (``B x T x F``)

    Returns a dict of tap nodes: every fc layer's pre-activation under its
    layer name, ``final`` for the meta-model embedding and ``logits`` for
    the x-vector softmax layer.
    """
    drop = spec.dropout if spec.head == 'xvector' else 0.0
    h = x
    for i, layer in enumerate(spec.tdnn, 1):
        name = 'tdnn%d' % i
        h = ag.tdnn_conv(h, _param(g, name + '.weight'),
                         _param(g, name + '.bias'), layer.context,
                         layer.dilation, name=name)
        h = _bn(g, spec, ag.relu(h), name)
        if drop:
            h = ag.dropout(h, drop)
    h = ag.stats_pool(h, name='pool')
    taps = {'pool': h}
    names = _fc_names(spec)
    for name in names:
        a = _affine(g, h, name)
        taps[name] = a
        if spec.head == 'xvector':
            h = _bn(g, spec, ag.relu(a), name)
            if drop:
                h = ag.dropout(h, drop)
        elif name != names[-1]:
            h = ag.relu(_bn(g, spec, a, name))
        else:
            h = _bn(g, spec, a, name)
            taps['final'] = h
    if spec.head == 'xvector':
        taps['logits'] = _affine(g, h, 'output')
    return taps


def build_comparison(g, spec, pairs):
    """ Relation scores ``(n, 1)`` for concatenated pair embeddings """
    if not spec.has_comparison:
        raise SpecError('head %r has no comparison network' % spec.head)
    h = pairs
    for i in range(1, len(spec.comparison_dims) + 1):
        name = 'cmp%d' % i
        h = ag.relu(_bn(g, spec, _affine(g, h, name), name))
    return _affine(g, h, 'cmp%d' % (len(spec.comparison_dims) + 1))


def default_tap(spec):
    return 'fc1' if spec.head == 'xvector' else 'final'


def valid_taps(spec):
    """ Layer names ``embed`` accepts

    >>> valid_taps(EncoderSpec(head='xvector'))
    ('fc1', 'fc2')
    """
    if spec.head == 'xvector':
        return tuple(_fc_names(spec))
    return ('final',) + tuple(_fc_names(spec))


def embed_batch(weights, frames, tap=None):
    """ Embeddings of an equal-length batch ``B x T x F``, inference mode """
    spec = weights.spec
    tap = tap or default_tap(spec)
    if tap not in valid_taps(spec):
        raise SpecError('tap %r is not available for head %r (choose from %s)'
                        % (tap, spec.head, ', '.join(valid_taps(spec))))
    frames = np.asarray(frames, dtype=np.float64)
    rf = receptive_field(spec)
    if frames.ndim != 3 or frames.shape[1] < rf:
        raise InputLengthError('need at least %d frames per input, got '
                               'shape %s' % (rf, frames.shape))
    g = ag.Graph()
    x = g.input('features')
    taps = build_encoder(g, spec, x)
    bound = merge(weights.bindings(), {'features': frames})
    unused = [n.name for n in g.inputs() if n.name not in bound]
    if unused:
        raise IncompatibleWeightsError('weights lack %s' % ', '.join(unused),
                                       layer=unused[0].split('.')[0])
    return ag.forward(g, bound, training=False)[taps[tap].name]


def embed(weights, f, tap=None):
    """ Fixed-length embedding of one utterance

    ``f`` is a ``FeatureMatrix`` or a ``T x F`` array with at least
    ``receptive_field(spec)`` frames.
    """
    frames = f.frames if isinstance(f, FeatureMatrix) else np.asarray(f)
    return embed_batch(weights, frames[None], tap)[0]


def spec_to_text(spec):
    """ Canonical JSON description of a spec """
    return json.dumps(asdict(spec), sort_keys=True, separators=(',', ':'))


def spec_from_text(text):
    try:
        d = json.loads(text)
        d['tdnn'] = tuple(TdnnLayerSpec(**l) for l in d['tdnn'])
        d['fc_dims'] = tuple(d['fc_dims'])
        d['comparison_dims'] = tuple(d['comparison_dims'])
        return EncoderSpec(**d)
    except (ValueError, KeyError, TypeError) as e:
        raise SpecError('invalid stored architecture: %s' % e)


def save_weights(weights, path):
    entries = ([(k, 'param', v) for k, v in weights.params.items()]
               + [(k, 'buffer', v) for k, v in weights.buffers.items()])
    write_weight_file(path, spec_to_text(weights.spec), entries)


def _first_mismatch(expected, found):
    for name, shape in expected.items():
        if name not in found:
            return name, 'missing'
        if tuple(found[name]) != tuple(shape):
            return name, 'shape %s, expected %s' % (tuple(found[name]),
                                                   tuple(shape))
    for name in found:
        if name not in expected:
            return name, 'unexpected'
    return None


def load_weights(path, spec=None):
    """ Read a weight file, optionally checking it against ``spec``

    A file written for a different architecture raises
    ``IncompatibleWeightsError`` naming the first layer that differs.
    """
    text, entries = read_weight_file(path)
    stored = spec_from_text(text)
    shapes = valmap(lambda e: e[1].shape, entries)
    expected = merge(parameter_shapes(stored), buffer_shapes(stored))
    if spec is not None and spec_to_text(spec) != text:
        expected = merge(parameter_shapes(spec), buffer_shapes(spec))
        bad = _first_mismatch(expected, shapes)
        layer = bad[0].split('.')[0] if bad else None
        raise IncompatibleWeightsError(
            '%s was written for a different architecture%s'
            % (path, ' (first difference: %s %s)' % bad if bad else ''),
            layer=layer)
    bad = _first_mismatch(expected, shapes)
    if bad:
        raise IncompatibleWeightsError('%s: %s %s' % ((path,) + bad),
                                       layer=bad[0].split('.')[0])
    params = dict((k, a) for k, (kind, a) in entries.items()
                  if kind == 'param')
    buffers = dict((k, a) for k, (kind, a) in entries.items()
                   if kind != 'param')
    return NetworkWeights(stored, params, buffers)


def with_params(weights, params=None, buffers=None):
    """ Copy of ``weights`` with some arrays replaced """
    return replace(weights,
                   params=merge(weights.params, params or {}),
                   buffers=merge(weights.buffers, buffers or {}))
