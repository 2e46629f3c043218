"""Input validation helpers and the package exception hierarchy."""

from __future__ import annotations

import numpy as np


class ContractViolation(ValueError):
    """An argument breaks a documented precondition (wrong shape, frame, range)."""


class DomainError(ValueError):
    """A numeric operation was applied outside its mathematical domain."""


class DegenerateGeometryError(ValueError):
    """Geometry with no usable extent (zero-length polyline, empty clip)."""


class GenerationError(RuntimeError):
    """Scene generation produced no valid elements."""


class SplitError(ValueError):
    """The requested dataset split cannot be constructed."""


class ConfigurationError(ValueError):
    """Invalid run configuration or missing referenced artifact."""


class NumericalError(RuntimeError):
    """Non-finite value where a finite one is required."""


def check_shape(name, arr, expected):
    """Check an array shape against ``expected``; -1 entries are wildcards."""
    shape = tuple(arr.shape)
    if len(shape) != len(expected) or any(
        e != -1 and s != e for s, e in zip(shape, expected)
    ):
        raise ContractViolation(f"{name}: expected shape {expected}, got {shape}")


def check_finite(name, arr, exc=NumericalError):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise exc(f"{name}: contains non-finite values")
    return arr


def as_float_array(name, values, shape=None):
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        check_shape(name, arr, shape)
    check_finite(name, arr, exc=ContractViolation)
    return arr


def check_probability(name, value):
    if not 0.0 <= value <= 1.0:
        raise ContractViolation(f"{name}: must be in [0, 1], got {value}")
    return float(value)


def check_positive(name, value):
    if not value > 0:
        raise ContractViolation(f"{name}: must be positive, got {value}")
    return value


def check_fitted(estimator, attribute):
    """Raise sklearn's NotFittedError if ``attribute`` is missing or None."""
    from sklearn.exceptions import NotFittedError

    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted; call fit() first"
        )
