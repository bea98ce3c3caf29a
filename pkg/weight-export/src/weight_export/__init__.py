"""Converter from framework VGG19 checkpoints to the VGGW1 weight container."""

from .export import ExportError, export, make_tiny
from .vggw1 import read_vggw1, write_vggw1

__all__ = ["ExportError", "export", "make_tiny", "read_vggw1", "write_vggw1"]
__version__ = "0.1.0"
