import doctest
import sys

import metaspk
import metaspk.curried
from toolz import curry


def test_doctests():
    modules = set(sys.modules[func.func.__module__]
                  for func in vars(metaspk.curried).values()
                  if isinstance(func, curry))
    modules.add(metaspk.curried)
    for module in sorted(modules, key=lambda m: m.__name__):
        assert doctest.testmod(module).failed == 0, module.__name__
