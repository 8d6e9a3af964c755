"""Hard attention by embedding norm for visual question answering, in numpy."""

from .config import RunConfig, preset
from .data import Dataset, generate_dataset, read_dataset, write_dataset
from .errors import ConfigError, FormatError, GenerationError, ShapeError, TrainingDiverged
from .model import VQAModel
from .tensor import Tensor, backward, no_grad
from .training import evaluate, load_checkpoint, save_checkpoint, train

__all__ = [
    "ConfigError",
    "Dataset",
    "FormatError",
    "GenerationError",
    "RunConfig",
    "ShapeError",
    "Tensor",
    "TrainingDiverged",
    "VQAModel",
    "backward",
    "evaluate",
    "generate_dataset",
    "load_checkpoint",
    "no_grad",
    "preset",
    "read_dataset",
    "save_checkpoint",
    "train",
    "write_dataset",
]

__version__ = "0.1.0"
