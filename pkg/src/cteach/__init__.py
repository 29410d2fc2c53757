"""Teacher-guided generalized zero-shot semantic segmentation, desk scale."""

from .autodiff import DiffTensor, backward, finite_difference_check, primitive_set
from .config import GlmConfig, ModelConfig, PlmConfig, RunConfig, TrainConfig, WorldConfig
from .training import MetricsReport, TrainState, evaluate, harmonic_iou, init_state, train_loop
from .world import IGNORE, Scene, TextTable, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "DiffTensor",
    "backward",
    "finite_difference_check",
    "primitive_set",
    "RunConfig",
    "WorldConfig",
    "ModelConfig",
    "GlmConfig",
    "PlmConfig",
    "TrainConfig",
    "TrainState",
    "MetricsReport",
    "init_state",
    "train_loop",
    "evaluate",
    "harmonic_iou",
    "Vocabulary",
    "TextTable",
    "Scene",
    "IGNORE",
    "__version__",
]
