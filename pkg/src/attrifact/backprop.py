"""Reverse-mode gradient propagation over a cached forward trace.

The seed is an arbitrary cotangent on the logits, so callers can
differentiate any scalar objective of ``y`` by supplying its gradient.
"""

from dataclasses import dataclass

import numpy as np

from .model import avgpool_scatter, conv2d_input_grad, maxpool_scatter


@dataclass
class GradientTrace:
    """Per-layer input gradients; ``grads[i]`` matches ``trace.inputs[i]``."""

    grads: list


def layer_input_grad(layer, x, g):
    """Pull the output gradient ``g`` back through one layer at input ``x``."""
    if layer.kind == "conv2d":
        return conv2d_input_grad(g, layer.weight, x.shape, layer.stride, layer.padding)
    if layer.kind == "linear":
        return layer.weight.T @ g
    if layer.kind == "relu":
        return g * (x > 0)
    if layer.kind == "maxpool2d":
        return maxpool_scatter(g, x, layer.kernel, layer.stride)
    if layer.kind == "avgpool2d":
        return avgpool_scatter(g, x.shape, layer.kernel, layer.stride)
    if layer.kind == "flatten":
        return g.reshape(x.shape)
    raise ValueError(f"no gradient rule for layer kind {layer.kind!r}")


def backward(model, trace, seed):
    """Chain-rule pass from the logits down to the image.

    ReLU gates by the sign of its cached input, maxpool routes to each
    window's argmax (first index on ties), avgpool distributes uniformly.
    """
    if len(trace.inputs) != model.depth:
        raise ValueError("trace does not match model (layer count differs)")
    seed = np.asarray(seed)
    if seed.shape != (model.class_count,):
        raise ValueError(f"seed shape {seed.shape} != ({model.class_count},)")
    g = seed
    grads = [None] * model.depth
    for i in reversed(range(model.depth)):
        x = trace.inputs[i]
        g = layer_input_grad(model.layers[i], x, g.astype(x.dtype, copy=False))
        if g.shape != x.shape:
            raise ValueError("trace does not match model (shape mismatch)")
        grads[i] = g
    return GradientTrace(grads=grads)
