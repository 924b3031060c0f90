# ruff: noqa: F403, F401
from .version import __version__, __versiondate__, __license__

from .utils import *
from .nn import *
from .stream import *
from .memory import *
from .augment import *
from .rehearsal import *
from .tuner import *
from .analysis import *
from .config import *
from .harness import *

from . import paths
from . import utils
from . import nn
from . import memory
from . import cli
