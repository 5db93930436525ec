"""Input checks shared by the estimator wrappers and the command line."""
import numpy as np

from .target_net import LabeledDataset, TargetNetwork


def check_images(X):
    """Float32 ``[N, C, H, W]`` batch with values in ``[-1, 1]``."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or len(X) == 0:
        raise ValueError(f"expected images shaped [N, C, H, W], got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinity")
    if X.min() < -1.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [-1, 1]")
    return X


def check_dataset(X, y=None):
    """Accept a ``LabeledDataset`` or an ``(images, labels)`` pair."""
    if isinstance(X, LabeledDataset):
        return X
    if y is None and isinstance(X, tuple) and len(X) == 2:
        X, y = X
    X = check_images(X)
    if y is None:
        raise ValueError("labels are required")
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != len(X):
        raise ValueError("labels must be a 1-D array matching the number of images")
    return LabeledDataset(X, y)


def check_network(net):
    """Unwrap a fitted ``TargetClassifier`` or pass a ``TargetNetwork`` through."""
    net = getattr(net, "network_", net)
    if not isinstance(net, TargetNetwork):
        raise TypeError(f"expected a TargetNetwork, got {type(net).__name__}")
    return net


def check_positive_int(value, name):
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
