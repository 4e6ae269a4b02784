"""Input validation helpers shared by the solvers and estimators."""

import numpy as np

from .exceptions import ValidationError

SYMMETRY_RTOL = 1e-12


def as_vector(x, name="vector", dim=None):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValidationError(f"{name} has length {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def as_square(m, name="matrix", dim=None):
    arr = np.asarray(m, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValidationError(f"{name} is {arr.shape[0]}x{arr.shape[0]}, expected {dim}x{dim}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def symmetry_defect(m):
    """Relative Frobenius asymmetry ``||M - M'|| / ||M||``."""
    scale = np.linalg.norm(m)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(m - m.T) / scale)


def check_symmetric(m, name="matrix", rtol=SYMMETRY_RTOL):
    m = as_square(m, name)
    if symmetry_defect(m) > rtol:
        raise ValidationError(f"{name} is not symmetric (relative defect {symmetry_defect(m):.3e})")
    return m


def check_spd(m, name="covariance", dim=None, rtol=SYMMETRY_RTOL):
    """Return ``m`` as a float array after checking it is symmetric positive definite."""
    m = check_symmetric(as_square(m, name, dim), name, rtol)
    eig = np.linalg.eigvalsh(0.5 * (m + m.T))
    if eig[0] <= 0.0:
        raise ValidationError(f"{name} is not positive definite (smallest eigenvalue {eig[0]:.3e})")
    return m


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or int(value) != value or int(value) < minimum:
        raise ValidationError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_nonnegative(value, name):
    value = float(value)
    if not np.isfinite(value) or value < 0.0:
        raise ValidationError(f"{name} must be finite and >= 0, got {value!r}")
    return value
