"""Input-adaptive sequence length reduction for small transformer classifiers."""

from .config import RunConfig, load_config
from .encoder import Encoder, EncoderConfig, Vocabulary
from .errors import AdaptiveLengthError, ConfigError, MissingPrerequisiteError, NumericDomainError, UsageError
from .inference import count_flops, infer_adaptive
from .model import AdaptiveModel, load_checkpoint, save_checkpoint
from .pipeline import Pipeline

__all__ = [
    "AdaptiveLengthError",
    "AdaptiveModel",
    "ConfigError",
    "Encoder",
    "EncoderConfig",
    "MissingPrerequisiteError",
    "NumericDomainError",
    "Pipeline",
    "RunConfig",
    "UsageError",
    "Vocabulary",
    "count_flops",
    "infer_adaptive",
    "load_checkpoint",
    "load_config",
    "save_checkpoint",
]
__version__ = "0.1.0"
