"""
Custom exceptions for the DualFast sampler lab.
"""


class SamplerError(Exception):
    """Base exception for sampler-related errors."""
    pass


class ValidationError(SamplerError):
    """Raised when an argument fails validation."""
    pass


class DomainError(SamplerError):
    """Raised when a time, log-SNR or coefficient lies outside its valid range."""
    pass


class OrderError(SamplerError):
    """Raised when two times are given in the wrong order."""
    pass


class NumericError(SamplerError):
    """Raised when a computation produces or receives non-finite values."""
    pass


class SingularityError(NumericError):
    """Raised when a prediction conversion would divide by a vanishing alpha or sigma."""
    pass


class GridError(SamplerError):
    """Raised when a time grid cannot support the requested update."""
    pass


class ConfigurationError(SamplerError):
    """Raised when configuration is invalid."""
    pass


class ResultsError(SamplerError):
    """Raised when result files cannot be written or read."""
    pass


class CacheError(ResultsError):
    """Raised when a reference cache entry is unreadable or corrupted."""
    pass
