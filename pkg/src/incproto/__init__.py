"""Few-shot class-incremental audio classification with episodic training
and prototype refinement."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    FeatureError,
    IncprotoError,
    IntegrityError,
    MetricError,
    ModelError,
    PrototypeError,
    ProtocolError,
    RefinementError,
    SamplingError,
    TrainingError,
)

__all__ = [
    "ConfigError",
    "FeatureError",
    "IncprotoError",
    "IntegrityError",
    "MetricError",
    "ModelError",
    "PrototypeError",
    "ProtocolError",
    "RefinementError",
    "SamplingError",
    "TrainingError",
    "__version__",
]
