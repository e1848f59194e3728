"""Low-rank activation compression for recursive transformers, in numpy."""

from .errors import LaserError
from .tracker import Event, TrackerConfig

__version__ = "0.1.0"

__all__ = ["Event", "LaserError", "TrackerConfig", "__version__"]
