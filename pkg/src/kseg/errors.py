"""Exception types shared across the package."""


class KsegError(Exception):
    """Base class for all package errors."""


class DimensionError(KsegError):
    """Tensor/array extents are inconsistent with the requested operation."""


class UnsupportedExtentError(DimensionError):
    """Extents violate a structural requirement (e.g. odd width for packed spectra)."""


class ContractError(KsegError):
    """An API contract was violated (e.g. backward on a non-scalar)."""


class DataError(KsegError):
    """Input data violates its declared domain (e.g. out-of-range label)."""


class GenerationError(KsegError):
    """Phantom generation cannot satisfy its geometric constraints."""


class FormatError(KsegError):
    """A serialized file is malformed, truncated, or of the wrong kind."""


class ConfigError(KsegError):
    """An experiment configuration is invalid or unsatisfiable."""


class TrainingError(KsegError):
    """Training diverged or could not proceed."""


class ReportError(KsegError):
    """Report generation has no usable inputs."""
