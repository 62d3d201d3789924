from .exceptions import *

from .features import *

from .archive import *

from .autograd import *

from .nets import *

from .episodes import *

from .cluster import *

from .verify import *

from .diarize import *

from .config import *

from .parallel import *

from .synth import *

from . import curried

from ._version import __version__
