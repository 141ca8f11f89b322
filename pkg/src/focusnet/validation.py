"""Input validation for array-level entry points (estimator, evaluation)."""
import numpy as np

from .exceptions import ShapeError, ValidationError


def check_images(X, channels=None, size=None, dtype=np.float32) -> np.ndarray:
    """Coerce images to a finite float array N x C x H x W.

    A 3-d input N x H x W is read as single-channel.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ShapeError("images must be N x C x H x W (or N x H x W)", X.shape)
    if X.shape[0] == 0:
        raise ValidationError("no images given")
    if not np.issubdtype(X.dtype, np.number):
        raise ValidationError(f"images must be numeric, got {X.dtype}")
    X = X.astype(dtype, copy=False)
    if not np.isfinite(X).all():
        raise ValidationError("images contain NaN or infinite values")
    if channels is not None and X.shape[1] != channels:
        raise ShapeError(f"expected {channels} channel(s)", X.shape)
    if size is not None and X.shape[2:] != (size, size):
        raise ShapeError(f"expected {size}x{size} images", X.shape)
    return X


def check_masks(y, X=None) -> np.ndarray:
    """Coerce binary masks to float32 N x 1 x H x W, matching ``X`` when given."""
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[:, None]
    if y.ndim != 4 or y.shape[1] != 1:
        raise ShapeError("masks must be N x 1 x H x W (or N x H x W)", y.shape)
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("masks must be binary (0/1)")
    if X is not None and (y.shape[0] != X.shape[0] or y.shape[2:] != X.shape[2:]):
        raise ShapeError("masks do not match images", y.shape, X.shape)
    return y.astype(np.float32)


def check_fraction(value, name, low_open=True, high_open=True) -> float:
    value = float(value)
    ok_low = value > 0 if low_open else value >= 0
    ok_high = value < 1 if high_open else value <= 1
    if not (ok_low and ok_high):
        raise ValidationError(f"{name} must lie in {'(' if low_open else '['}0, 1{')' if high_open else ']'}, got {value}")
    return value
