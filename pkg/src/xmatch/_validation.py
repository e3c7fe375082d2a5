"""Input checks shared by the estimators and the functional API."""

import numpy as np


class InputError(OSError):
    """A file could not be read or decoded."""


class ValidationError(ValueError):
    """An argument violates a documented precondition."""


class DegenerateGeometryError(ValidationError):
    """Geometry is too degenerate to define the requested quantity."""


class TrainingAbort(RuntimeError):
    """A loss component became non-finite during training."""


def check_intensity(image, name="image", ndim=2):
    """Return ``image`` as a float64 array with values in [0, 1].

    Raises ValidationError on NaN, wrong rank, empty input, or values
    outside the unit interval.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValidationError(f"{name} is empty")
    if np.isnan(arr).any():
        raise ValidationError(f"{name} contains NaN")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError(f"{name} values must lie in [0, 1]")
    return arr


def check_rgb(image, name="rgb_image"):
    arr = check_intensity(image, name=name, ndim=3)
    if arr.shape[2] != 3:
        raise ValidationError(f"{name} must have 3 channels, got {arr.shape[2]}")
    return arr


def check_divisible(shape, factor, name="image"):
    h, w = shape[:2]
    if h <= 0 or w <= 0 or h % factor or w % factor:
        raise ValidationError(
            f"{name} dims {h}x{w} must be positive multiples of {factor}; pad first"
        )


def check_matrix(mat, shape, name):
    arr = np.asarray(mat, dtype=np.float64)
    if arr.shape != shape:
        raise ValidationError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} has non-finite entries")
    return arr


def check_rotation(R, name="R", tol=1e-6):
    R = check_matrix(R, (3, 3), name)
    if np.abs(R @ R.T - np.eye(3)).max() > tol or np.linalg.det(R) < 0:
        raise ValidationError(f"{name} is not a proper rotation (tolerance {tol})")
    return R


def check_probability(value, name):
    if not 0.0 <= float(value) <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value}")
    return float(value)


def check_positive(value, name):
    if not float(value) > 0.0:
        raise ValidationError(f"{name} must be positive, got {value}")
    return float(value)
