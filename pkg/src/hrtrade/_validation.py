"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
import numpy as np

from .exceptions import NumericError, ShapeError, ValidationError

SIMPLEX_TOL = 1e-9


def check_vector(x, name="x", size=None, dtype=np.float64):
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if size is not None and arr.shape[0] != size:
        raise ShapeError(f"{name} must have length {size}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def check_simplex(w, name="weights", size=None, tol=SIMPLEX_TOL):
    """Validate a portfolio weight vector: non-negative, summing to one."""
    w = check_vector(w, name, size)
    if np.any(w < -tol):
        raise ValidationError(f"{name} has negative entries: {w.min()}")
    if abs(w.sum() - 1.0) > tol:
        raise ValidationError(f"{name} must sum to 1 (got {w.sum()!r})")
    return w


def check_prices(p, name="prices", size=None, cash_first=True):
    p = check_vector(p, name, size)
    if np.any(p <= 0):
        raise ValidationError(f"{name} must be strictly positive")
    if cash_first and p[0] != 1.0:
        raise ValidationError(f"{name}[0] is the cash price and must equal 1")
    return p


def check_positive(value, name, strict=True):
    if strict and not value > 0:
        raise ValidationError(f"{name} must be > 0, got {value!r}")
    if not strict and not value >= 0:
        raise ValidationError(f"{name} must be >= 0, got {value!r}")
    return value


def check_random_state(seed):
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (int, np.integer)):
        return np.random.default_rng(seed)
    raise ValueError(f"{seed!r} cannot be used to seed a Generator")
