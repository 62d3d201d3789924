""" Worker pools for the ``map=`` arguments of the pipeline functions

Pipeline functions that fan out over files, sessions or trials accept a
``map`` with the builtin's signature, the way ``toolz.sandbox.parallel.fold``
does.  ``worker_map`` hands out either the builtin or a process pool's
``map``.

>>> with worker_map(1) as pmap:
...     list(pmap(abs, [-1, 2]))
[1, 2]
"""
import logging
import multiprocessing
from contextlib import contextmanager

from .exceptions import ParameterError

__all__ = ('worker_map', 'n_workers')

logger = logging.getLogger(__name__)


def n_workers(jobs):
    """ Number of workers for ``--jobs``; zero or less means all cores """
    if jobs is None:
        return 1
    if jobs <= 0:
        return multiprocessing.cpu_count()
    return int(jobs)


@contextmanager
def worker_map(jobs=1, chunksize=1):
    """ Context manager yielding a ``map``-compatible callable

    Results keep input order.  Functions and items must be picklable when
    more than one worker is used.
    """
    n = n_workers(jobs)
    if chunksize < 1:
        raise ParameterError('chunksize must be >= 1')
    if n == 1:
        yield map
        return
    logger.info('starting %d worker processes', n)
    with multiprocessing.Pool(n) as pool:
        def pmap(func, *seqs):
            if len(seqs) == 1:
                return pool.map(func, seqs[0], chunksize)
            return pool.starmap(func, zip(*seqs), chunksize)
        yield pmap
