"""Structure-rectified noise for inversion-free flow-matching edits, with a
desk-scale toy world: synthetic scenarios, a numpy flow model, an analytic
Gaussian oracle, and numerical checks of the re-anchoring bounds."""

from __future__ import annotations

__version__ = "0.1.0"

from .edit import EditConfig, EditRun, edit, edit_image, make_schedule
from .errors import (
    FormatError,
    IntegrationDiverged,
    InvalidArgument,
    InvalidInput,
    SnrEditError,
    TrainingFailed,
)
from .flow import GaussianOracleField, MlpFlowModel, TrainConfig, train
from .grid import Codec, RngStream
from .prior import PriorConfig, StructuralPrior, prior_from_image, segment_synthetic
from .scenarios import SCENARIOS, get_scenario

__all__ = [
    "Codec", "EditConfig", "EditRun", "FormatError", "GaussianOracleField", "IntegrationDiverged",
    "InvalidArgument", "InvalidInput", "MlpFlowModel", "PriorConfig", "RngStream", "SCENARIOS",
    "SnrEditError", "StructuralPrior", "TrainConfig", "TrainingFailed", "edit", "edit_image",
    "get_scenario", "make_schedule", "prior_from_image", "segment_synthetic", "train",
]
