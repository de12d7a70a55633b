"""Relevance propagation primitives and the baseline heatmap methods.

The generic rule redistributes each output neuron's relevance over its
inputs in proportion to their (transformed) contributions, so the total
relevance is conserved layer by layer. Biases are excluded from the
denominators and absorb no relevance.
"""

from dataclasses import dataclass

import numpy as np

from .core import ShapeMismatchError, positive_part, tensor_sum
from .model import (
    avgpool_forward,
    avgpool_scatter,
    conv2d_forward,
    conv2d_input_grad,
    maxpool_scatter,
)

DEFAULT_EPSILON = 1e-9

_X_TRANSFORMS = {
    "abs": np.abs,
    "positive": positive_part,
    "ones": np.ones_like,
    "raw": lambda a: a,
}
_THETA_TRANSFORMS = {
    "abs": np.abs,
    "positive": positive_part,
    "raw": lambda a: a,
}


class DegenerateInputError(ValueError):
    """Residual carries mass but there are no non-zero neurons to balance it."""


@dataclass(frozen=True)
class GenericRuleConfig:
    """Input/weight transforms and the denominator stabilizer.

    ``x_transform`` is one of abs | positive | ones | raw; ``theta_transform``
    one of abs | positive | raw.
    """

    x_transform: str = "positive"
    theta_transform: str = "positive"
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.x_transform not in _X_TRANSFORMS:
            raise ValueError(f"unknown x_transform {self.x_transform!r}")
        if self.theta_transform not in _THETA_TRANSFORMS:
            raise ValueError(f"unknown theta_transform {self.theta_transform!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


LRP_CONFIG = GenericRuleConfig("positive", "positive")
ABS_CONFIG = GenericRuleConfig("abs", "abs")
AGNOSTIC_CONFIG = GenericRuleConfig("ones", "abs")


def _stabilize(z, eps):
    # zero denominators count as positive so dead neurons divide by +eps
    return z + eps * np.where(z >= 0, 1.0, -1.0)


def _leak(r_prev, z, stab):
    """Relevance the stabilizer withholds from each output neuron.

    The weighted path delivers ``r·z/stab``; the remainder ``r·eps/stab`` is
    negligible for healthy neurons but equals the whole of ``r`` when a
    receptive patch is (numerically) dead. Spreading it uniformly over the
    patch keeps the conservation rule exact instead of approximately true.
    """
    return r_prev - (r_prev / stab) * z


def generic_rule(layer, x, r_prev, cfg=LRP_CONFIG):
    """One backward relevance step through ``layer`` at cached input ``x``.

    Parameterized layers redistribute by transformed contribution with a
    per-output-neuron denominator; relu passes relevance through, maxpool is
    winner-take-all on the raw input, avgpool splits like a uniform-weight
    linear map, flatten reshapes.
    """
    x = np.asarray(x, dtype=np.float64)
    r_prev = np.asarray(r_prev, dtype=np.float64)
    kind = layer.kind

    if kind in ("relu", "flatten"):
        if r_prev.size != x.size:
            raise ShapeMismatchError(f"relevance size {r_prev.size} != input {x.size}")
        return r_prev.reshape(x.shape)

    if kind == "maxpool2d":
        return maxpool_scatter(r_prev, x, layer.kernel, layer.stride)

    tx = _X_TRANSFORMS[cfg.x_transform]
    xt = tx(x)

    if kind == "avgpool2d":
        z = avgpool_forward(xt, layer.kernel, layer.stride)
        if r_prev.shape != z.shape:
            raise ShapeMismatchError(f"relevance shape {r_prev.shape} != output {z.shape}")
        stab = _stabilize(z, cfg.epsilon)
        out = xt * avgpool_scatter(r_prev / stab, x.shape, layer.kernel, layer.stride)
        return out + avgpool_scatter(_leak(r_prev, z, stab), x.shape, layer.kernel, layer.stride)

    tt = _THETA_TRANSFORMS[cfg.theta_transform]
    if kind == "conv2d":
        wt = tt(np.asarray(layer.weight, dtype=np.float64))
        z = conv2d_forward(xt, wt, None, layer.stride, layer.padding)
        if r_prev.shape != z.shape:
            raise ShapeMismatchError(f"relevance shape {r_prev.shape} != output {z.shape}")
        stab = _stabilize(z, cfg.epsilon)
        out = xt * conv2d_input_grad(r_prev / stab, wt, x.shape, layer.stride, layer.padding)
        ones_w = np.ones_like(wt)
        counts = conv2d_forward(np.ones(x.shape), ones_w, None, layer.stride, layer.padding)
        share = _leak(r_prev, z, stab) / np.where(counts > 0, counts, 1.0)
        return out + conv2d_input_grad(share, ones_w, x.shape, layer.stride, layer.padding)
    if kind == "linear":
        wt = tt(np.asarray(layer.weight, dtype=np.float64))
        z = wt @ xt
        if r_prev.shape != z.shape:
            raise ShapeMismatchError(f"relevance shape {r_prev.shape} != output {z.shape}")
        stab = _stabilize(z, cfg.epsilon)
        out = xt * (wt.T @ (r_prev / stab))
        return out + float(np.sum(_leak(r_prev, z, stab))) / x.size
    raise ValueError(f"no propagation rule for layer kind {kind!r}")


def broadcastable(g, r):
    """Return ``r`` expanded to ``g``'s shape (spatial-over-channel only)."""
    r = np.asarray(r)
    if r.shape == g.shape:
        return r
    if g.ndim == 3 and r.ndim == 2 and g.shape[1:] == r.shape:
        return np.broadcast_to(r[None, :, :], g.shape)
    raise ShapeMismatchError(f"cannot combine shapes {g.shape} and {r.shape}")


def delta_shift(g, r):
    """Inject residual ``r`` into ``g`` while restoring the sum of ``g``.

    The balancing scalar (sum of the residual divided by the number of
    non-zero entries of ``g``) is subtracted only where ``g`` is non-zero,
    so the output total equals the input total exactly.
    """
    g = np.asarray(g, dtype=np.float64)
    r = broadcastable(g, r).astype(np.float64, copy=False)
    mask = g != 0
    count = int(mask.sum())
    total = float(r.sum(dtype=np.float64))
    if count == 0:
        if total == 0.0:
            return g + r
        raise DegenerateInputError(
            "residual has non-zero sum but all reference entries are zero"
        )
    shift = total / count
    return g + r - shift * mask


def relevance_init(logits, t):
    """Class-score relevance seed: zeros except entry ``t`` set to its logit."""
    logits = np.asarray(logits, dtype=np.float64)
    r0 = np.zeros_like(logits)
    r0[t] = logits[t]
    return r0


def propagate(model, trace, r0, cfg=LRP_CONFIG):
    """Apply the generic rule layer by layer from the logits to the image."""
    r = np.asarray(r0, dtype=np.float64)
    for i in reversed(range(model.depth)):
        r = generic_rule(model.layers[i], trace.inputs[i], r, cfg)
    return r


def lrp(model, trace, t, epsilon=DEFAULT_EPSILON):
    """Relevance propagation with positive input/weight parts (z+ rule)."""
    if not 0 <= t < model.class_count:
        raise IndexError(f"class {t} outside 0..{model.class_count - 1}")
    cfg = GenericRuleConfig("positive", "positive", epsilon)
    return propagate(model, trace, relevance_init(trace.logits, t), cfg)


def clrp(model, trace, t, epsilon=DEFAULT_EPSILON):
    """Contrast of a target propagation against the rest-of-classes one."""
    if model.class_count < 2:
        raise ValueError("contrastive propagation needs at least two classes")
    if not 0 <= t < model.class_count:
        raise IndexError(f"class {t} outside 0..{model.class_count - 1}")
    cfg = GenericRuleConfig("positive", "positive", epsilon)
    y = np.asarray(trace.logits, dtype=np.float64)
    r0 = relevance_init(y, t)
    r_tgt = propagate(model, trace, r0, cfg)
    r_rst = propagate(model, trace, (y - r0) / (model.class_count - 1), cfg)
    sum_rst = tensor_sum(r_rst)
    if sum_rst == 0.0:
        return r_tgt
    return r_tgt - r_rst * (tensor_sum(r_tgt) / sum_rst)


def grad_cam(trace, grads, layer=None):
    """Channel-weighted feature map at one layer, clipped to positives.

    Each channel of the cached input is weighted by the spatial sum of its
    gradient, channels are averaged, and negatives are dropped. ``layer`` is
    the depth index (1 = logits layer); default picks the rank-3 feature map
    closest to the output.
    """
    n_layers = len(trace.inputs)
    if layer is None:
        candidates = [i for i, x in enumerate(trace.inputs) if np.ndim(x) == 3]
        if not candidates:
            raise ShapeMismatchError("model has no rank-3 feature map")
        i = max(candidates)
    else:
        if not 1 <= layer <= n_layers:
            raise IndexError(f"depth index {layer} outside 1..{n_layers}")
        i = n_layers - layer
    x = trace.inputs[i]
    g = grads.grads[i]
    if np.ndim(x) != 3:
        raise ShapeMismatchError(
            f"selected layer input has rank {np.ndim(x)}, need a C×H×W map"
        )
    weights = np.sum(g, axis=(1, 2), dtype=np.float64)
    cam = np.mean(x * weights[:, None, None], axis=0, dtype=np.float64)
    return positive_part(cam)
