"""Additive coupling flows trained by exact maximum likelihood."""

from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    FormatError,
    NiceError,
    NumericOverflowError,
    SingularityError,
    UnsupportedVersionError,
)
from .flow import CouplingLaw, CouplingLayer, FlowModel, Partition, ScalingLayer, make_reference_model
from .numeric import MlpParams, RngStream, seeded_rng
from .prior import Prior

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CouplingLaw",
    "CouplingLayer",
    "DimensionError",
    "DomainError",
    "FlowModel",
    "FormatError",
    "MlpParams",
    "NiceError",
    "NumericOverflowError",
    "Partition",
    "Prior",
    "RngStream",
    "ScalingLayer",
    "SingularityError",
    "UnsupportedVersionError",
    "make_reference_model",
    "seeded_rng",
]
