"""Two-stage generative toolkit: a continuous semantic planner feeding a
masked-token diffusion generator, with synthetic bimodal data, training,
sampling, and evaluation utilities."""

from .bridge import FrozenEncoder, Modality, SemanticVector
from .discrete import (MASK_TOKEN, PAD_TOKEN, CorruptionState, SampleRun,
                       TokenSequence)
from .schedules import NoiseSchedule, unmask_budget
from .tensor import ParamStore, Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "FrozenEncoder", "Modality", "SemanticVector",
    "MASK_TOKEN", "PAD_TOKEN", "CorruptionState", "SampleRun", "TokenSequence",
    "NoiseSchedule", "unmask_budget",
    "ParamStore", "Tensor", "backward", "grad_check",
    "__version__",
]
