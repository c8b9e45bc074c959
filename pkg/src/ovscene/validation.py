"""Input validation helpers shared by the estimators and loss functions."""

import numpy as np


class ContractError(ValueError):
    """Raised when a caller violates a precondition of an operation."""


class SchemaError(ValueError):
    """Raised when a file does not follow the documented JSON schema."""


class NotFittedError(ContractError, AttributeError):
    pass


def check_vector(x, dim=None, name="vector"):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractError(f"{name} must be 1-d, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ContractError(f"{name} must have length {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite entries")
    return arr


def check_matrix(x, shape=None, name="matrix"):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 2-d, got shape {arr.shape}")
    if shape is not None:
        for got, want in zip(arr.shape, shape):
            if want is not None and got != want:
                raise ContractError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite entries")
    return arr


def check_unit_interval(value, name="value"):
    v = float(value)
    if not (0.0 <= v <= 1.0):
        raise ContractError(f"{name} must lie in [0, 1], got {v}")
    return v


def check_is_fitted(estimator, attributes):
    if isinstance(attributes, str):
        attributes = [attributes]
    if not all(getattr(estimator, a, None) is not None for a in attributes):
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )
