"""Exception types shared across the package."""


class IncprotoError(Exception):
    """Base class for all package errors."""


class ProtocolError(IncprotoError):
    """Invalid session schedule, manifest, or session index."""


class SamplingError(IncprotoError):
    """Episode or query sampling cannot satisfy its shape requirements."""


class FeatureError(IncprotoError):
    """Bad audio input or feature extraction parameters."""


class ModelError(IncprotoError):
    """Shape or mode violation in the embedding / scoring networks."""


class PrototypeError(IncprotoError):
    """Invalid prototype matrix operation."""


class RefinementError(IncprotoError):
    """Dimension mismatch in prototype refinement."""


class TrainingError(IncprotoError):
    """Training diverged or was invoked on an invalid bundle."""


class IntegrityError(IncprotoError):
    """Frozen parameters changed, or artifacts from mismatched configs were mixed."""


class MetricError(IncprotoError):
    """Metric computation on empty or inconsistent inputs."""


class ConfigError(IncprotoError):
    """Invalid or inconsistent experiment configuration."""
