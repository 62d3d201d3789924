""" Binary archives for features, network weights and embeddings

All integers and floats are little-endian.  Readers parse the complete file
before returning anything, so a truncated file raises ``ParseError`` and
never yields partial data.  Writers go through ``atomic_write``.
"""
import hashlib
import struct

import numpy as np

from .exceptions import FormatError, ParseError, UnsupportedFormatError
from .features import FeatureMatrix
from .utils import atomic_write

__all__ = ('FEATURE_MAGIC', 'WEIGHT_MAGIC', 'EMBEDDING_MAGIC',
           'write_features', 'read_features', 'spec_fingerprint',
           'write_weight_file', 'read_weight_file', 'write_embeddings',
           'read_embeddings')

FEATURE_MAGIC = b'MSPKFEAT'
FEATURE_VERSION = 1
WEIGHT_MAGIC = b'MSPKWGT1'
EMBEDDING_MAGIC = b'MSPKEMB1'

_F32 = np.dtype('<f4')


class _Reader(object):
    """ Cursor over an in-memory file that raises ``ParseError`` on overrun """

    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ParseError('truncated file: needed %d bytes at offset %d, '
                             'only %d left' % (n, self.pos,
                                               len(self.data) - self.pos),
                             path=self.path)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        fmt = '<' + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count):
        return np.frombuffer(self.take(4 * count), dtype=_F32).astype(
            np.float64)

    def string(self):
        n, = self.unpack('I')
        try:
            return self.take(n).decode('utf-8')
        except UnicodeDecodeError as e:
            raise ParseError('invalid utf-8 string (%s)' % e, path=self.path)

    def magic(self, expected):
        got = self.take(len(expected))
        if got != expected:
            raise FormatError('%s: bad magic %r, expected %r'
                              % (self.path, got, expected))

    def finish(self):
        if self.pos != len(self.data):
            raise ParseError('%d trailing bytes after last record'
                             % (len(self.data) - self.pos), path=self.path)


def _load(path, magic):
    with open(path, 'rb') as f:
        reader = _Reader(f.read(), path)
    reader.magic(magic)
    return reader


def _string(s):
    raw = s.encode('utf-8')
    return struct.pack('<I', len(raw)) + raw


def write_features(path, f):
    """ Store a ``FeatureMatrix`` as an ``MSPKFEAT`` archive """
    frames = np.ascontiguousarray(f.frames, dtype=_F32)
    with atomic_write(path) as out:
        out.write(FEATURE_MAGIC)
        out.write(struct.pack('<IIIdd', FEATURE_VERSION, frames.shape[0],
                              frames.shape[1], f.frame_shift, f.frame_width))
        out.write(frames.tobytes())


def read_features(path):
    reader = _load(path, FEATURE_MAGIC)
    version, n_frames, dim, shift, width = reader.unpack('IIIdd')
    if version != FEATURE_VERSION:
        raise UnsupportedFormatError('%s: feature archive version %d is not '
                                     'supported' % (path, version))
    frames = reader.floats(n_frames * dim).reshape(n_frames, dim)
    reader.finish()
    return FeatureMatrix(frames, frame_shift=shift, frame_width=width)


def spec_fingerprint(spec_text):
    """ 64-bit fingerprint of a canonical architecture description

    >>> spec_fingerprint('{}') == spec_fingerprint('{}')
    True
    """
    digest = hashlib.blake2b(spec_text.encode('utf-8'), digest_size=8)
    return int.from_bytes(digest.digest(), 'little')


def write_weight_file(path, spec_text, entries):
    """ Write named arrays under an architecture fingerprint

    ``entries`` is a sequence of ``(name, kind, array)`` with ``kind`` one
    of ``'param'`` or ``'buffer'``.
    """
    with atomic_write(path) as out:
        out.write(WEIGHT_MAGIC)
        out.write(struct.pack('<Q', spec_fingerprint(spec_text)))
        out.write(_string(spec_text))
        out.write(struct.pack('<I', len(entries)))
        for name, kind, array in entries:
            array = np.ascontiguousarray(array, dtype=_F32)
            out.write(_string(name))
            out.write(_string(kind))
            out.write(struct.pack('<I', array.ndim))
            out.write(struct.pack('<%dI' % array.ndim, *array.shape))
            out.write(array.tobytes())


def read_weight_file(path):
    """ Parse a weight file into ``(spec_text, entries)``

    ``entries`` maps each name to ``(kind, array)`` in file order.
    """
    reader = _load(path, WEIGHT_MAGIC)
    fingerprint, = reader.unpack('Q')
    spec_text = reader.string()
    if spec_fingerprint(spec_text) != fingerprint:
        raise ParseError('architecture fingerprint does not match the stored '
                         'description', path=path)
    count, = reader.unpack('I')
    entries = {}
    for _ in range(count):
        name = reader.string()
        kind = reader.string()
        ndim, = reader.unpack('I')
        shape = reader.unpack('%dI' % ndim) if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        entries[name] = (kind, reader.floats(size).reshape(shape))
    reader.finish()
    return spec_text, entries


def write_embeddings(path, items):
    """ Write ``(utt_id, vector)`` pairs as an ``MSPKEMB1`` archive """
    items = list(items)
    dim = len(items[0][1]) if items else 0
    with atomic_write(path) as out:
        out.write(EMBEDDING_MAGIC)
        out.write(struct.pack('<II', len(items), dim))
        for utt_id, vector in items:
            vector = np.ascontiguousarray(vector, dtype=_F32)
            if vector.shape != (dim,):
                raise FormatError('embedding %r has shape %s, expected (%d,)'
                                  % (utt_id, vector.shape, dim))
            out.write(_string(utt_id))
            out.write(vector.tobytes())


def read_embeddings(path):
    """ Read an embedding archive into an ordered ``{utt_id: vector}`` """
    reader = _load(path, EMBEDDING_MAGIC)
    count, dim = reader.unpack('II')
    result = {}
    for _ in range(count):
        utt_id = reader.string()
        result[utt_id] = reader.floats(dim)
    reader.finish()
    return result
