import contextlib
import os
import tempfile


def raises(err, lamda):
    try:
        lamda()
        return False
    except err:
        return True


def seconds_to_ms(t):
    """ Round a time in seconds to integer milliseconds

    >>> seconds_to_ms(1.2345)
    1234
    >>> seconds_to_ms(0.75)
    750
    """
    return int(round(t * 1000.0))


@contextlib.contextmanager
def atomic_write(path, mode='wb'):
    """ Open a temporary sibling of ``path`` and move it into place on success

    Readers never observe a partially written file.  If the body raises, the
    temporary file is removed and ``path`` is left untouched.
    """
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix='.%s.' % os.path.basename(path),
                               dir=directory)
    try:
        with os.fdopen(fd, mode) as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise
