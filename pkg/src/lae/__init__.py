"""Language-aware encoder (LAE) for CTC code-switching recognition on a numpy autograd engine."""
from .config import ExperimentConfig
from .model import EncoderModel, ModelConfig, build_model
from .vocab import Vocabulary

__version__ = "0.1.0"
__all__ = ["ExperimentConfig", "EncoderModel", "ModelConfig", "build_model", "Vocabulary"]
