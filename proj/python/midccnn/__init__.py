from ._midccnn import *  # noqa: F401,F403
from ._midccnn import __version__  # noqa: F401
