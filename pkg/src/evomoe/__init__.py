"""Desk-scale laboratory for evolving mixture-of-experts language models.

The package trains a small causal transformer on a synthetic two-modality
token task, grows it from a dense feed-forward network into a bank of
experts, evolves the non-primary experts toward the trained one, and then
fits a token-aware router on top.  Everything runs in float64 on the CPU so
that runs are bitwise reproducible and cheap to probe.
"""

__version__ = "0.1.0"

from .config import LabConfig, ModelConfig, StageConfig, SyntheticTaskSpec, load_config
from .checkpoint import TrainingState, load_checkpoint, save_checkpoint
from .diagnostics import kde_overlap, logit_kde, modality_distribution, shuffle_probe
from .errors import (
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigError,
    ContractError,
    EvomoeError,
    NumericError,
    ShapeError,
)
from .model import Model, transition_to_moe
from .pipeline import evaluate, new_run, run_pipeline, run_stage
from .rng import Rng
from .tensor import Tensor, no_grad

__all__ = [
    "CheckpointFormatError",
    "CheckpointVersionError",
    "ConfigError",
    "ContractError",
    "EvomoeError",
    "LabConfig",
    "Model",
    "ModelConfig",
    "NumericError",
    "Rng",
    "ShapeError",
    "StageConfig",
    "SyntheticTaskSpec",
    "Tensor",
    "TrainingState",
    "evaluate",
    "kde_overlap",
    "load_checkpoint",
    "load_config",
    "logit_kde",
    "modality_distribution",
    "new_run",
    "no_grad",
    "run_pipeline",
    "run_stage",
    "save_checkpoint",
    "shuffle_probe",
    "transition_to_moe",
    "__version__",
]
