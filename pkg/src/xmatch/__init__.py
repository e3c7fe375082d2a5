"""Cross-modal (visible/thermal) detector-free local feature matching."""

from ._validation import DegenerateGeometryError, InputError, TrainingAbort, ValidationError
from .model import CrossModalNet, ModelConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "CrossModalNet",
    "ModelConfig",
    "load_checkpoint",
    "save_checkpoint",
    "DegenerateGeometryError",
    "InputError",
    "TrainingAbort",
    "ValidationError",
]
