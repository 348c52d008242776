"""Exception hierarchy shared across the package."""


class MakerError(Exception):
    """Base class for all package errors."""


class ParseError(MakerError):
    """A data file could not be parsed; carries the offending record index."""

    def __init__(self, message: str, record_index: int | None = None):
        super().__init__(message)
        self.record_index = record_index


class ValidationError(MakerError):
    """An object violates one of its declared invariants."""


class EntityNotFoundError(MakerError, KeyError):
    """An entity id was referenced but is not present in the knowledge base."""


class ContractError(MakerError):
    """A caller violated an operation precondition (shape/length mismatch etc.)."""


class RetrievalError(MakerError):
    """Retrieval was attempted against an empty or unusable index."""


class ConfigError(MakerError):
    """A run configuration is invalid or names an unknown key."""


class GenerationError(MakerError):
    """Response generation was asked to run with degenerate inputs."""


class MetricError(MakerError):
    """A metric was computed over an empty or misaligned corpus."""


class GradCheckError(MakerError):
    """Numeric gradient verification hit a non-finite loss."""


class NonFiniteLossError(MakerError):
    """Training produced a NaN/Inf loss; carries a diagnostic dump."""

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


class GenerationRetryError(MakerError):
    """Synthetic data generation could not satisfy its constraints."""
