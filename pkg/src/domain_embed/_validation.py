"""Input validation and conversion helpers shared by the estimators."""
import numpy as np
import torch

from .exceptions import DimensionError, PreconditionError


def check_images(X, image_size=32):
    """Return ``X`` as a uint8 array of shape (n, H, W, 3)."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = np.repeat(X[..., None], 3, axis=-1)
    if X.ndim != 4 or X.shape[1:] != (image_size, image_size, 3):
        raise DimensionError(f"expected images of shape (n, {image_size}, {image_size}, 3), got {X.shape}")
    if X.dtype != np.uint8:
        if X.size and (X.min() < 0 or X.max() > 255):
            raise PreconditionError("pixel values must lie in [0, 255]")
        X = X.astype(np.uint8)
    return X


def check_labels(y, n, name="y", allow_unlabeled=False):
    y = np.asarray(y).astype(np.int64).reshape(-1)
    if y.shape[0] != n:
        raise DimensionError(f"{name} has {y.shape[0]} entries for {n} samples")
    lo = -1 if allow_unlabeled else 0
    if y.size and y.min() < lo:
        raise PreconditionError(f"{name} contains negative labels")
    return y


def channel_stats(X):
    x = X.reshape(-1, 3).astype(np.float64) / 255.0
    return x.mean(0), np.maximum(x.std(0), 1e-6)


def to_tensor(X, mean, std):
    """uint8 NHWC -> float32 NCHW, scaled to [0, 1] then standardized per channel."""
    x = torch.from_numpy(np.ascontiguousarray(X)).float().div_(255.0).permute(0, 3, 1, 2)
    m = torch.as_tensor(np.asarray(mean), dtype=torch.float32).view(1, 3, 1, 1)
    s = torch.as_tensor(np.asarray(std), dtype=torch.float32).view(1, 3, 1, 1)
    return ((x - m) / s).contiguous()
