"""Dense tensor primitives shared by every propagation stage.

Tensors are plain ``numpy.ndarray`` values in row-major order. File formats
store float32; in-memory computation runs in float64 so that the
conservation checks hold at tight relative tolerances even when sums cancel.
Public operations are pure functions and never return NaN/Inf for finite
inputs.
"""

import numpy as np

__all__ = [
    "ShapeMismatchError",
    "as_tensor",
    "check_finite",
    "hadamard",
    "normalize_max",
    "heaviside_surrogate",
    "positive_part",
    "channel_mean_reduce",
    "tensor_sum",
]


class ShapeMismatchError(ValueError):
    """Operands cannot be combined under the supported broadcast rules."""


class NumericError(ValueError):
    """A computation produced non-finite values."""


def as_tensor(data, dtype=np.float64):
    """Coerce ``data`` to a contiguous float array (float64 default)."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    return arr


def check_finite(a, context=""):
    """Raise ``NumericError`` if ``a`` contains NaN or Inf."""
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values{' in ' + context if context else ''}")
    return a


def tensor_sum(a):
    """Sum with a 64-bit accumulator regardless of storage dtype."""
    return float(np.sum(a, dtype=np.float64))


def _broadcast_spatial(a, b):
    """Expand an H×W map ``b`` across the channel axis of a C×H×W tensor ``a``.

    Returns ``b`` reshaped so elementwise numpy ops against ``a`` apply the
    map to every channel. Only this one broadcast form is supported.
    """
    if a.shape == b.shape:
        return b
    if a.ndim == 3 and b.ndim == 2 and a.shape[1:] == b.shape:
        return b[None, :, :]
    raise ShapeMismatchError(f"cannot combine shapes {a.shape} and {b.shape}")


def hadamard(a, b):
    """Elementwise product; an H×W map multiplies every channel of C×H×W."""
    a = np.asarray(a)
    b = np.asarray(b)
    return a * _broadcast_spatial(a, b)


def broadcast_channels(spatial, channels):
    """Tile an H×W map into a C×H×W tensor with ``channels`` copies."""
    spatial = np.asarray(spatial)
    if spatial.ndim != 2:
        raise ShapeMismatchError(f"expected rank-2 map, got shape {spatial.shape}")
    return np.broadcast_to(spatial[None, :, :], (channels,) + spatial.shape).copy()


def normalize_max(a):
    """Divide by the raw maximum; all-nonpositive input maps to zeros.

    The degenerate guard keeps downstream streams finite when a map carries
    no positive signal.
    """
    a = np.asarray(a)
    m = float(np.max(a)) if a.size else 0.0
    if m <= 0.0:
        return np.zeros_like(a)
    return a / np.asarray(m, dtype=a.dtype)


def heaviside_surrogate(y):
    """Smooth step: elementwise logistic sigmoid, computed in float64.

    Output lies in (0, 1) and is strictly increasing over the value ranges
    that occur after max-normalization.
    """
    y = np.asarray(y, dtype=np.float64)
    out = np.empty_like(y)
    pos = y >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-y[pos]))
    ey = np.exp(y[~pos])
    out[~pos] = ey / (1.0 + ey)
    return out


def positive_part(a):
    """Elementwise max(0, a)."""
    a = np.asarray(a)
    return np.maximum(a, np.zeros((), dtype=a.dtype))


def channel_mean_reduce(a):
    """Mean over the channel axis of a C×H×W tensor, returning H×W."""
    a = np.asarray(a)
    if a.ndim != 3:
        raise ShapeMismatchError(f"expected rank-3 tensor, got shape {a.shape}")
    return np.mean(a, axis=0, dtype=np.float64).astype(a.dtype)
