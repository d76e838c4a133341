"""
Error hierarchy for the GAPA toolkit.

Validation errors mean the inputs or artifacts are wrong (CLI exit code 2);
numerical errors mean the maths failed on otherwise valid inputs (exit code 3).
"""

from __future__ import annotations


class GapaError(Exception):
    """Base class for every error raised by the toolkit."""


class GapaValidationError(GapaError, ValueError):
    """Inputs, files or configuration violate a documented contract."""


class GapaNumericalError(GapaError, ArithmeticError):
    """A numerical routine could not produce a finite, valid result."""


class DimensionMismatch(GapaValidationError):
    pass


class NegativeVariance(GapaValidationError):
    pass


class NonFiniteValue(GapaValidationError):
    pass


class NetworkValidationError(GapaValidationError):
    pass


class SchemaVersionUnsupported(GapaValidationError):
    pass


class CorruptFile(GapaValidationError):
    pass


class EmptyCache(GapaValidationError):
    pass


class TooFewRows(GapaValidationError):
    pass


class FingerprintMismatch(GapaValidationError):
    pass


class MissingArtifact(GapaValidationError):
    pass


class ConfigError(GapaValidationError):
    pass


class SingleClass(GapaValidationError):
    pass


class NonPositiveVariance(GapaValidationError):
    pass


class NonPositiveScale(GapaValidationError):
    pass


class NegativeEntropy(GapaValidationError):
    pass


class NotPositiveDefinite(GapaNumericalError):
    """Cholesky hit a non-positive pivot; usually the jitter is too small."""


class DegenerateScale(GapaNumericalError):
    pass


class NonFiniteLoss(GapaNumericalError):
    """Noise-head training diverged; lower the learning rate."""
