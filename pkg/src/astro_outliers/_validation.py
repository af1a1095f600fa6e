import numpy as np

from .exceptions import DataError, ShapeError


def check_images(X, dims=None, dtype=None, value_range=(0.0, 1.0)):
    """Validate a batch of NHWC images and return it as a float array.

    Raises ShapeError for a wrong rank or per-image shape, DataError for
    non-finite values or values outside ``value_range``.
    """
    X = np.asarray(X)
    if dtype is None:
        dtype = X.dtype if X.dtype in (np.float32, np.float64) else np.float64
    X = X.astype(dtype, copy=False)
    if X.ndim != 4:
        raise ShapeError(f"expected a 4-d image batch (n, height, width, channels), got shape {X.shape}")
    if dims is not None and X.shape[1:] != tuple(dims):
        raise ShapeError(f"expected images of shape {tuple(dims)}, got {X.shape[1:]}")
    if X.size:
        if not np.isfinite(X).all():
            raise DataError("images contain NaN or Inf")
        if value_range is not None and (X.min() < value_range[0] or X.max() > value_range[1]):
            raise DataError(f"image values must lie in [{value_range[0]}, {value_range[1]}]")
    return X


def check_points(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"points must be an (n, d) matrix, got shape {X.shape}")
    if X.shape[1] < 1:
        raise ShapeError("points need at least one feature")
    if not np.isfinite(X).all():
        raise DataError("points contain NaN or Inf")
    return X
