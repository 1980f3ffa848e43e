import jax

# The 1e-9 simplex and 1e-12 likelihood tolerances need double precision.
jax.config.update("jax_enable_x64", True)

try:
    from ._version import version as __version__
except ImportError:
    __version__ = "0.1.0"

from .core import *  # noqa: E402, F403
from .exceptions import *  # noqa: E402, F403
from .herding import *  # noqa: E402, F403
from .inference import *  # noqa: E402, F403
from .optim import *  # noqa: E402, F403
from .speed import *  # noqa: E402, F403
