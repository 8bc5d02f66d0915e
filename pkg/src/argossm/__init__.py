"""State-space modelling of drifting Argo float trajectories with ice-dependent missing GPS."""

__version__ = "0.1.0"

from .errors import ArgoSSMError, ConfigurationError, DomainError, InferenceError, LoadError, ParameterError
from .geo import Position, Velocity
from .model import ModelKind, ModelParams, ProfileSeries, simulate

__all__ = [
    "ArgoSSMError", "ConfigurationError", "DomainError", "InferenceError", "LoadError", "ParameterError",
    "Position", "Velocity", "ModelKind", "ModelParams", "ProfileSeries", "simulate",
]
