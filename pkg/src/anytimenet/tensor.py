"""Dense float64 primitives.

Arrays are plain ``numpy.ndarray`` objects in float64.  These wrappers add
the shape/label validation the kernels skip.
"""
import numpy as np

from . import _kernels
from .errors import InputError, ShapeError


def as_tensor(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return _kernels.matmul(a, b)


def relu(x):
    return np.maximum(as_tensor(x), 0.0)


def relu_grad(x, dy):
    # subgradient at exactly 0 is 0
    return dy * (x > 0.0)


def check_labels(labels, num_classes, batch=None):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise InputError(f"labels must be 1-D, got shape {labels.shape}")
    if batch is not None and labels.shape[0] != batch:
        raise InputError(f"{labels.shape[0]} labels for a batch of {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes})")
    return labels.astype(np.int64, copy=False)


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy.

    Returns ``(loss, dlogits)`` where ``dlogits`` is the gradient of the mean
    loss with respect to ``logits``.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be batch x classes, got {logits.shape}")
    labels = check_labels(labels, logits.shape[1], logits.shape[0])
    loss, dlogits = _kernels.softmax_xent(logits, np.ascontiguousarray(labels))
    return float(loss), dlogits
