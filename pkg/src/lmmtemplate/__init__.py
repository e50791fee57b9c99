"""Template estimation with diffeomorphic deformations and bias fields in a linearized mixed-effects model."""

from .mixed_model import NumericalError, VarianceParams
from .template import EstimationState, PipelineConfig, run_pipeline
from .volume import DisplacementField, Grid, LabelVolume, Volume3

__version__ = "0.1.0"

__all__ = [
    "DisplacementField",
    "EstimationState",
    "Grid",
    "LabelVolume",
    "NumericalError",
    "PipelineConfig",
    "VarianceParams",
    "Volume3",
    "run_pipeline",
]
