""" A small reverse-mode differentiation engine

A ``Graph`` is built once from op functions and then evaluated many times
with different bindings of its input nodes.  Parameters, batch-norm running
statistics and data are all input nodes; ``backward`` returns the gradient
of a scalar loss with respect to each of them.

>>> g = Graph()
>>> x = g.input('x')
>>> loss = sum_(relu(x))
>>> forward(g, {'x': np.array([-1.0, 2.0])})[loss.name]
array(2.)
>>> backward(g, loss)['x']
array([0., 1.])

Every op keeps a forward and a backward rule in the ``_FORWARD`` and
``_BACKWARD`` tables; backward rules receive the output gradient and return
one gradient per parent (``None`` for parents that take no gradient).
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from .exceptions import (DimensionError, GraphStateError, NumericError,
                         ParameterError)

__all__ = ('Graph', 'Node', 'affine', 'tdnn_conv', 'relu', 'batch_norm',
           'dropout', 'stats_pool', 'concat', 'sq_euclidean', 'neg', 'scale',
           'sum_', 'softmax_xent', 'gather', 'reshape', 'forward', 'backward',
           'AdamState', 'adam_init', 'adam_step', 'finite_diff_check',
           'OP_KINDS', 'VAR_FLOOR')

VAR_FLOOR = 1e-10
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class Node(object):
    """ One value in a computation graph """
    __slots__ = ('graph', 'name', 'op', 'parents', 'attrs', 'value', 'grad',
                 'cache')

    def __init__(self, graph, name, op, parents, attrs):
        self.graph = graph
        self.name = name
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.value = None
        self.grad = None
        self.cache = {}

    @property
    def shape(self):
        return None if self.value is None else self.value.shape

    def __repr__(self):
        return 'Node(%r, op=%r)' % (self.name, self.op)


class Graph(object):
    """ An acyclic computation, stored in construction (topological) order """

    def __init__(self):
        self.nodes = []
        self.by_name = {}
        self.training = False
        self.rng = None
        self.evaluated = False

    def add(self, op, parents, name=None, **attrs):
        for p in parents:
            if p.graph is not self:
                raise GraphStateError('node %r belongs to another graph'
                                      % p.name)
        if name is None:
            name = '%s%d' % (op, len(self.nodes))
        if name in self.by_name:
            raise GraphStateError('duplicate node name %r' % name)
        node = Node(self, name, op, tuple(parents), attrs)
        self.nodes.append(node)
        self.by_name[name] = node
        self.evaluated = False
        return node

    def input(self, name):
        return self.add('input', (), name=name)

    def __getitem__(self, name):
        return self.by_name[name]

    def inputs(self):
        return [n for n in self.nodes if n.op == 'input']

    def updated_buffers(self):
        """ Running statistics produced by the last training-mode forward

        Maps the names of the running-mean and running-variance input nodes
        to their momentum-updated values.
        """
        if not self.evaluated:
            raise GraphStateError('updated_buffers called before forward')
        result = {}
        for node in self.nodes:
            if node.op == 'batch_norm' and 'running_mean' in node.cache:
                mean_node, var_node = node.parents[3], node.parents[4]
                result[mean_node.name] = node.cache['running_mean']
                result[var_node.name] = node.cache['running_var']
        return result


def _graph(*nodes):
    return nodes[0].graph


def affine(x, W, b, name=None):
    """ ``x @ W.T + b`` over the last axis, ``W`` is ``out x in`` """
    return _graph(x).add('affine', (x, W, b), name=name)


def tdnn_conv(x, W, b, context, dilation=1, name=None):
    """ Time-delay layer over ``(T, C)`` or ``(B, T, C)`` input

    Output frame ``t`` sees input frames ``t, t + D, ..., t + (K-1) D``;
    ``W`` is ``N x (K * C)`` with the context offset as the major index.
    """
    if context < 1 or dilation < 1:
        raise ParameterError('context and dilation must be >= 1')
    return _graph(x).add('tdnn_conv', (x, W, b), name=name, context=context,
                         dilation=dilation)


def relu(x, name=None):
    return _graph(x).add('relu', (x,), name=name)


def batch_norm(x, gamma, beta, running_mean, running_var, momentum=BN_MOMENTUM,
               eps=BN_EPS, name=None):
    """ Batch normalization over every axis but the last

    Training mode normalizes with batch statistics and records updated
    running statistics; inference mode uses the running statistics.
    """
    return _graph(x).add('batch_norm',
                         (x, gamma, beta, running_mean, running_var),
                         name=name, momentum=momentum, eps=eps)


def dropout(x, rate, name=None):
    if not 0.0 <= rate < 1.0:
        raise ParameterError('dropout rate must lie in [0, 1), got %r'
                             % (rate,))
    return _graph(x).add('dropout', (x,), name=name, rate=rate)


def stats_pool(x, name=None):
    """ Per-channel mean and standard deviation over time

    ``(T, C) -> (2C,)`` or ``(B, T, C) -> (B, 2C)``.
    """
    return _graph(x).add('stats_pool', (x,), name=name)


def concat(a, b, name=None):
    return _graph(a).add('concat', (a, b), name=name)


def sq_euclidean(a, b, name=None):
    """ Squared Euclidean distance

    Two vectors give a scalar; ``(n, D)`` and ``(m, D)`` matrices give the
    ``n x m`` matrix of pairwise distances.
    """
    return _graph(a).add('sq_euclidean', (a, b), name=name)


def neg(x, name=None):
    return _graph(x).add('neg', (x,), name=name)


def scale(x, c, name=None):
    return _graph(x).add('scale', (x,), name=name, c=float(c))


def sum_(x, axis=None, name=None):
    """ Sum of all entries, or over one axis """
    return _graph(x).add('sum', (x,), name=name, axis=axis)


def softmax_xent(logits, targets, name=None):
    """ Mean cross-entropy of ``(n, C)`` logits against integer targets """
    targets = np.asarray(targets, dtype=np.intp)
    return _graph(logits).add('softmax_xent', (logits,), name=name,
                              targets=targets)


def gather(x, index, name=None):
    """ Rows ``x[index]`` along the first axis """
    index = np.asarray(index, dtype=np.intp)
    return _graph(x).add('gather', (x,), name=name, index=index)


def reshape(x, shape, name=None):
    return _graph(x).add('reshape', (x,), name=name, shape=tuple(shape))


OP_KINDS = ('input', 'affine', 'tdnn_conv', 'relu', 'batch_norm', 'dropout',
            'stats_pool', 'concat', 'sq_euclidean', 'neg', 'scale', 'sum',
            'softmax_xent', 'gather', 'reshape')


def _check(cond, node, message):
    if not cond:
        raise DimensionError('%s (%s): %s' % (node.name, node.op, message))


# Forward rules ############################################################

def _affine_fwd(node, x, W, b):
    _check(W.ndim == 2 and b.shape == (W.shape[0],), node,
           'weight %s and bias %s disagree' % (W.shape, b.shape))
    _check(x.shape[-1] == W.shape[1], node,
           'input width %d, weight expects %d' % (x.shape[-1], W.shape[1]))
    return x @ W.T + b


def _unfold(x, context, dilation):
    t_out = x.shape[1] - (context - 1) * dilation
    return np.concatenate([x[:, k * dilation:k * dilation + t_out, :]
                           for k in range(context)], axis=2)


def _tdnn_fwd(node, x, W, b):
    K, D = node.attrs['context'], node.attrs['dilation']
    _check(x.ndim in (2, 3), node, 'input must be (T, C) or (B, T, C)')
    x3 = x[None] if x.ndim == 2 else x
    _check(W.shape[1] == K * x3.shape[2], node,
           'weight %s does not fit context %d over %d channels'
           % (W.shape, K, x3.shape[2]))
    _check(b.shape == (W.shape[0],), node, 'bias shape %s' % (b.shape,))
    _check(x3.shape[1] - (K - 1) * D >= 1, node,
           '%d frames are fewer than the span %d' % (x3.shape[1],
                                                    (K - 1) * D + 1))
    cols = _unfold(x3, K, D)
    node.cache['cols'] = cols
    y = cols @ W.T + b
    return y[0] if x.ndim == 2 else y


def _relu_fwd(node, x):
    return np.maximum(x, 0.0)


def _batch_norm_fwd(node, x, gamma, beta, running_mean, running_var):
    C = x.shape[-1]
    for arr in (gamma, beta, running_mean, running_var):
        _check(arr.shape == (C,), node,
               'per-channel parameter %s for %d channels' % (arr.shape, C))
    axes = tuple(range(x.ndim - 1))
    eps = node.attrs['eps']
    if node.graph.training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = node.attrs['momentum']
        node.cache['running_mean'] = (1 - m) * running_mean + m * mean
        node.cache['running_var'] = (1 - m) * running_var + m * var
    else:
        mean, var = running_mean, running_var
        node.cache.pop('running_mean', None)
        node.cache.pop('running_var', None)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    node.cache.update(xhat=xhat, inv_std=inv_std, axes=axes,
                      training=node.graph.training)
    return gamma * xhat + beta


def _dropout_fwd(node, x):
    rate = node.attrs['rate']
    if not node.graph.training or rate == 0.0:
        node.cache['mask'] = None
        return x
    mask = (node.graph.rng.random(x.shape) >= rate) / (1.0 - rate)
    node.cache['mask'] = mask
    return x * mask


def _stats_pool_fwd(node, x):
    _check(x.ndim in (2, 3), node, 'input must be (T, C) or (B, T, C)')
    mean = x.mean(axis=-2, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-2, keepdims=True)
    std = np.sqrt(np.maximum(var, VAR_FLOOR))
    node.cache.update(centered=x - mean, std=std, live=var > VAR_FLOOR)
    return np.concatenate([mean, std], axis=-1).squeeze(-2)


def _concat_fwd(node, a, b):
    _check(a.shape[:-1] == b.shape[:-1], node,
           'cannot concatenate %s and %s' % (a.shape, b.shape))
    return np.concatenate([a, b], axis=-1)


def _sq_euclidean_fwd(node, a, b):
    if a.ndim == 1:
        _check(a.shape == b.shape, node,
               'vectors %s and %s' % (a.shape, b.shape))
        return np.sum((a - b) ** 2)
    _check(a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[1], node,
           'matrices %s and %s' % (a.shape, b.shape))
    diff = a[:, None, :] - b[None, :, :]
    return np.sum(diff ** 2, axis=2)


def _neg_fwd(node, x):
    return -x


def _magfwd(node, x):
    return node.attrs['c'] * x


def _sum_fwd(node, x):
    return np.sum(x, axis=node.attrs['axis'])


def _softmax_xent_fwd(node, logits):
    targets = node.attrs['targets']
    _check(logits.ndim == 2 and targets.shape == (logits.shape[0],), node,
           'logits %s with %d targets' % (logits.shape, targets.size))
    _check(bool(np.all((targets >= 0) & (targets < logits.shape[1]))), node,
           'target class out of range')
    logp = log_softmax(logits, axis=1)
    node.cache['logp'] = logp
    return -np.mean(logp[np.arange(len(targets)), targets])


def _gather_fwd(node, x):
    index = node.attrs['index']
    _check(index.size == 0 or (index.min() >= -x.shape[0]
                               and index.max() < x.shape[0]), node,
           'index out of range for %d rows' % x.shape[0])
    return x[index]


def _reshape_fwd(node, x):
    try:
        return x.reshape(node.attrs['shape'])
    except ValueError:
        raise DimensionError('%s (reshape): cannot reshape %s to %s'
                             % (node.name, x.shape, node.attrs['shape']))


_FORWARD = {
    'affine': _affine_fwd,
    'tdnn_conv': _tdnn_fwd,
    'relu': _relu_fwd,
    'batch_norm': _batch_norm_fwd,
    'dropout': _dropout_fwd,
    'stats_pool': _stats_pool_fwd,
    'concat': _concat_fwd,
    'sq_euclidean': _sq_euclidean_fwd,
    'neg': _neg_fwd,
    'scale': _magfwd,
    'sum': _sum_fwd,
    'softmax_xent': _softmax_xent_fwd,
    'gather': _gather_fwd,
    'reshape': _reshape_fwd,
}


# Backward rules ###########################################################

def _affine_bwd(node, g, x, W, b):
    g2 = g.reshape(-1, W.shape[0])
    x2 = x.reshape(-1, W.shape[1])
    return g @ W, g2.T @ x2, g2.sum(axis=0)


def _tdnn_bwd(node, g, x, W, b):
    K, D = node.attrs['context'], node.attrs['dilation']
    cols = node.cache['cols']
    g3 = g[None] if x.ndim == 2 else g
    x3 = x[None] if x.ndim == 2 else x
    C = x3.shape[2]
    t_out = g3.shape[1]
    dcols = g3 @ W
    dx = np.zeros_like(x3)
    for k in range(K):
        dx[:, k * D:k * D + t_out, :] += dcols[:, :, k * C:(k + 1) * C]
    g2 = g3.reshape(-1, W.shape[0])
    dW = g2.T @ cols.reshape(-1, W.shape[1])
    return (dx[0] if x.ndim == 2 else dx), dW, g2.sum(axis=0)


def _relu_bwd(node, g, x):
    return (g * (x > 0),)


def _batch_norm_bwd(node, g, x, gamma, beta, running_mean, running_var):
    c = node.cache
    xhat, inv_std, axes = c['xhat'], c['inv_std'], c['axes']
    dgamma = np.sum(g * xhat, axis=axes)
    dbeta = np.sum(g, axis=axes)
    dxhat = g * gamma
    if c['training']:
        n = x.size // x.shape[-1]
        dx = inv_std / n * (n * dxhat - np.sum(dxhat, axis=axes)
                            - xhat * np.sum(dxhat * xhat, axis=axes))
    else:
        dx = dxhat * inv_std
    return dx, dgamma, dbeta, None, None


def _dropout_bwd(node, g, x):
    mask = node.cache['mask']
    return (g if mask is None else g * mask,)


def _stats_pool_bwd(node, g, x):
    c = node.cache
    C = x.shape[-1]
    T = x.shape[-2]
    g_mean = np.expand_dims(g[..., :C], -2)
    g_std = np.expand_dims(g[..., C:], -2)
    dx = g_mean / T + g_std * c['live'] * c['centered'] / (T * c['std'])
    return (np.broadcast_to(dx, x.shape).copy(),)


def _concat_bwd(node, g, a, b):
    k = a.shape[-1]
    return g[..., :k], g[..., k:]


def _sq_euclidean_bwd(node, g, a, b):
    if a.ndim == 1:
        da = 2.0 * g * (a - b)
        return da, -da
    da = 2.0 * (g.sum(axis=1)[:, None] * a - g @ b)
    db = 2.0 * (g.sum(axis=0)[:, None] * b - g.T @ a)
    return da, db


def _neg_bwd(node, g, x):
    return (-g,)


def _magbwd(node, g, x):
    return (node.attrs['c'] * g,)


def _sum_bwd(node, g, x):
    axis = node.attrs['axis']
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _softmax_xent_bwd(node, g, logits):
    targets = node.attrs['targets']
    probs = np.exp(node.cache['logp'])
    probs[np.arange(len(targets)), targets] -= 1.0
    return (g * probs / len(targets),)


def _gather_bwd(node, g, x):
    dx = np.zeros_like(x)
    np.add.at(dx, node.attrs['index'], g)
    return (dx,)


def _reshape_bwd(node, g, x):
    return (g.reshape(x.shape),)


_BACKWARD = {
    'affine': _affine_bwd,
    'tdnn_conv': _tdnn_bwd,
    'relu': _relu_bwd,
    'batch_norm': _batch_norm_bwd,
    'dropout': _dropout_bwd,
    'stats_pool': _stats_pool_bwd,
    'concat': _concat_bwd,
    'sq_euclidean': _sq_euclidean_bwd,
    'neg': _neg_bwd,
    'scale': _magbwd,
    'sum': _sum_bwd,
    'softmax_xent': _softmax_xent_bwd,
    'gather': _gather_bwd,
    'reshape': _reshape_bwd,
}


def forward(graph, inputs, training=False, seed=0):
    """ Evaluate every node of ``graph``

    ``inputs`` binds every input node by name.  ``seed`` drives dropout so
    repeated calls with the same arguments are bit-identical.  Returns a
    dict from node name to value.
    """
    graph.training = training
    graph.rng = np.random.default_rng(seed)
    graph.evaluated = False
    for node in graph.nodes:
        node.grad = None
        if node.op == 'input':
            if node.name not in inputs:
                raise GraphStateError('input %r is not bound' % node.name)
            node.value = np.asarray(inputs[node.name], dtype=np.float64)
        else:
            values = [p.value for p in node.parents]
            node.value = np.asarray(_FORWARD[node.op](node, *values),
                                    dtype=np.float64)
        if not np.all(np.isfinite(node.value)):
            raise NumericError('non-finite value in node %r (%s)'
                               % (node.name, node.op), node=node.name)
    graph.evaluated = True
    return dict((node.name, node.value) for node in graph.nodes)


def backward(graph, loss):
    """ Gradient of the scalar ``loss`` with respect to every input node

    Gradients from every path through a node are summed.  Returns a dict
    from input name to gradient; inputs the loss does not depend on get
    zeros.
    """
    if not graph.evaluated or loss.value is None:
        raise GraphStateError('backward called before forward')
    if loss.value.shape != ():
        raise DimensionError('loss %r must be a scalar, got shape %s'
                             % (loss.name, loss.value.shape))
    for node in graph.nodes:
        node.grad = None
    loss.grad = np.ones(())
    stop = graph.nodes.index(loss)
    for node in reversed(graph.nodes[:stop + 1]):
        if node.grad is None or node.op == 'input':
            continue
        values = [p.value for p in node.parents]
        grads = _BACKWARD[node.op](node, node.grad, *values)
        for parent, grad in zip(node.parents, grads):
            if grad is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(grad, dtype=np.float64)
            else:
                parent.grad = parent.grad + grad
    return dict((node.name, np.zeros_like(node.value) if node.grad is None
                 else node.grad) for node in graph.inputs())


@dataclass(frozen=True, eq=False)
class AdamState:
    """ First and second moment estimates per parameter """
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8


def adam_init(params, beta1=0.9, beta2=0.99, eps=1e-8):
    zeros = dict((k, np.zeros_like(np.asarray(v, dtype=np.float64)))
                 for k, v in params.items())
    return AdamState(zeros, dict((k, v.copy()) for k, v in zeros.items()),
                     0, beta1, beta2, eps)


def adam_step(params, grads, state, lr):
    """ One bias-corrected Adam update

    Parameters without an entry in ``grads`` are passed through unchanged.
    Returns ``(new_params, new_state)``; neither input is modified.

    >>> p, s = adam_step({'x': np.array(1.0)}, {'x': np.array(3.0)},
    ...                  adam_init({'x': np.array(1.0)}), lr=0.1)
    >>> round(float(p['x']), 6)
    0.9
    """
    if lr <= 0:
        raise ParameterError('learning rate must be positive, got %r' % (lr,))
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError('non-finite gradient for %r' % name, node=name)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m, v = dict(params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        if name not in params:
            continue
        if np.shape(g) != np.shape(params[name]):
            raise DimensionError('gradient for %r has shape %s, parameter %s'
                                 % (name, np.shape(g), np.shape(params[name])))
        m_prev = m.get(name, np.zeros_like(g))
        v_prev = v.get(name, np.zeros_like(g))
        m[name] = b1 * m_prev + (1 - b1) * g
        v[name] = b2 * v_prev + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1 ** t)
        v_hat = v[name] / (1 - b2 ** t)
        new_params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat)
                                                       + state.eps)
    return new_params, AdamState(m, v, t, b1, b2, state.eps)


def finite_diff_check(graph, inputs, loss, h=1e-5, wrt=None, training=False,
                      seed=0, zero_tol=1e-6):
    """ Largest relative disagreement between analytic and numeric gradients

    Central differences are taken for every entry of each input named in
    ``wrt`` (all inputs by default).  Per input the error is
    ``|a - n| / max(|a|, |n|, 1e-12)`` with Frobenius norms.  An input whose
    analytic and numeric gradients both have norm below ``zero_tol`` has a
    zero gradient and is left out; a zero analytic gradient against a larger
    numeric one counts as a full disagreement.
    """
    if h <= 0:
        raise ParameterError('step h must be positive')
    inputs = dict((k, np.array(v, dtype=np.float64))
                  for k, v in inputs.items())
    forward(graph, inputs, training=training, seed=seed)
    analytic = backward(graph, loss)
    names = list(wrt) if wrt is not None else [n.name for n in graph.inputs()]

    def evaluate(bound):
        return float(forward(graph, bound, training=training,
                             seed=seed)[loss.name])

    worst = 0.0
    for name in names:
        value = inputs[name]
        numeric = np.zeros_like(value)
        for i in np.ndindex(value.shape):
            original = value[i]
            value[i] = original + h
            up = evaluate(inputs)
            value[i] = original - h
            down = evaluate(inputs)
            value[i] = original
            numeric[i] = (up - down) / (2 * h)
        a = analytic[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-12)
        if denom >= zero_tol:
            worst = max(worst, np.linalg.norm(a - numeric) / denom)
    forward(graph, inputs, training=training, seed=seed)
    return worst
