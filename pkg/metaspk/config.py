""" Run configuration: ``section.key = value`` text files

>>> cfg = parse_config('train.way = 5\\nverify.backend = cosine')
>>> cfg.train.way, cfg.verify.backend
(5, 'cosine')
>>> parse_config(dump_config(cfg)) == cfg
True
"""
from dataclasses import dataclass, field, fields, replace

from toolz import groupby, merge

from .diarize import DiarizeConfig
from .episodes import TrainConfig
from .exceptions import ConfigError, ParameterError
from .features import MfccConfig
from .nets import EncoderSpec, TdnnLayerSpec

__all__ = ('VerifyConfig', 'RunConfig', 'SECTIONS', 'parse_config',
           'load_config', 'dump_config', 'override', 'as_dict')


@dataclass(frozen=True)
class VerifyConfig:
    lda_dim: int = 200
    backend: str = 'plda'
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0
    plda_iters: int = 10

    def __post_init__(self):
        if self.backend not in ('plda', 'cosine'):
            raise ParameterError('unknown backend %r' % self.backend)
        if not 0.0 < self.p_target < 1.0:
            raise ParameterError('p_target must lie in (0, 1)')
        if self.lda_dim < 1 or self.plda_iters < 0:
            raise ParameterError('need lda_dim >= 1 and plda_iters >= 0')


@dataclass(frozen=True)
class RunConfig:
    features: MfccConfig = field(default_factory=MfccConfig)
    model: EncoderSpec = field(default_factory=EncoderSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    diarize: DiarizeConfig = field(default_factory=DiarizeConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)


SECTIONS = dict((f.name, f.default_factory) for f in fields(RunConfig))

_TRUE = ('1', 'true', 'yes', 'on')
_FALSE = ('0', 'false', 'no', 'off')


def _parse_tdnn(text):
    layers = []
    for item in filter(None, (s.strip() for s in text.split(','))):
        parts = item.split(':')
        if len(parts) != 3:
            raise ValueError('TDNN layers are written N:D:K, got %r' % item)
        layers.append(TdnnLayerSpec(*map(int, parts)))
    return tuple(layers)


def _parse_value(key, kind, text):
    if key == 'model.tdnn':
        return _parse_tdnn(text)
    if kind is bool:
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ValueError('not a boolean')
    if kind is tuple:
        return tuple(int(s) for s in text.split(',') if s.strip())
    return kind(text)


def _format_value(key, value):
    if key == 'model.tdnn':
        return ', '.join('%d:%d:%d' % (l.out_dim, l.dilation, l.context)
                         for l in value)
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ', '.join(map(str, value))
    return repr(value) if isinstance(value, float) else str(value)


def _split_line(line, lineno):
    if '=' not in line:
        raise ConfigError('line %d: expected "section.key = value"' % lineno)
    name, value = (s.strip() for s in line.split('=', 1))
    if name.count('.') != 1:
        raise ConfigError('line %d: key %r is not "section.key"'
                          % (lineno, name), key=name)
    return name, value


def _assignments(lines):
    out = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split('#', 1)[0].strip()
        if line:
            out.append(_split_line(line, lineno))
    return out


def _apply(cfg, assignments):
    by_section = groupby(lambda kv: kv[0].split('.')[0], assignments)
    updates = {}
    for section, items in by_section.items():
        if section not in SECTIONS:
            raise ConfigError('unknown config section %r' % section,
                              key=items[0][0])
        current = getattr(cfg, section)
        kinds = dict((f.name, f.type) for f in fields(current))
        values = {}
        for name, text in items:
            key = name.split('.')[1]
            if key not in kinds:
                raise ConfigError('unknown config key %r' % name, key=name)
            try:
                values[key] = _parse_value(name, kinds[key], text)
            except (ValueError, TypeError) as e:
                raise ConfigError('bad value %r for %s: %s'
                                  % (text, name, e), key=name)
        if section == 'model' and 'head' in values \
                and 'fc_dims' not in values:
            values['fc_dims'] = ()
        try:
            updates[section] = replace(current, **values)
        except (ValueError, TypeError) as e:
            raise ConfigError('invalid %s settings: %s' % (section, e),
                              key=section)
    return replace(cfg, **updates)


def parse_config(text, base=None):
    """ Parse config text on top of ``base`` (defaults when omitted)

    Later lines win over earlier ones.  Unknown sections or keys and values
    that do not parse raise ``ConfigError`` naming the key.
    """
    return _apply(base or RunConfig(), _assignments(text.splitlines()))


def load_config(path, base=None):
    with open(path) as f:
        return parse_config(f.read(), base)


def dump_config(cfg):
    """ Text form of ``cfg`` that parses back to an equal config """
    lines = []
    for section in SECTIONS:
        values = getattr(cfg, section)
        for f in fields(values):
            name = '%s.%s' % (section, f.name)
            value = getattr(values, f.name)
            lines.append('%s = %s' % (name, _format_value(name, value)))
        lines.append('')
    return '\n'.join(lines)


def override(cfg, items):
    """ Apply ``section.key=value`` strings, as given with ``--set``

    >>> override(RunConfig(), ['train.shot=3']).train.shot
    3
    """
    return _apply(cfg, [_split_line(item, i)
                        for i, item in enumerate(items, 1)])


def as_dict(cfg):
    """ Flat ``{"section.key": value}`` view of ``cfg`` """
    return merge(*[dict(('%s.%s' % (s, f.name), getattr(getattr(cfg, s),
                                                         f.name))
                        for f in fields(getattr(cfg, s)))
                   for s in SECTIONS])
