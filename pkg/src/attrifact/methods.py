"""Uniform heatmap-producing closures for every supported method.

Each method maps ``(image, target_class)`` to a signed or nonnegative H×W
map at image resolution, which is what the evaluation harnesses and the CLI
consume.
"""

import numpy as np

from .agf import AgfConfig, explain
from .attribution import clrp, grad_cam, lrp
from .backprop import backward
from .evaluation import random_heatmap_fn
from .model import forward

METHODS = ("agf", "lrp", "clrp", "gradcam")

# signed methods segment by sign; positive-only methods threshold at the mean
POLARITY = {
    "agf": "signed",
    "clrp": "signed",
    "lrp": "positive_only",
    "gradcam": "positive_only",
    "random": "positive_only",
}


def bilinear_resize(grid, out_h, out_w):
    """Resize an H×W map with bilinear sampling at half-pixel centers."""
    grid = np.asarray(grid, dtype=np.float64)
    in_h, in_w = grid.shape
    if (in_h, in_w) == (out_h, out_w):
        return grid.copy()
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, in_h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, in_w - 1).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bot = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def _channel_sum(rel):
    return np.sum(rel, axis=0) if rel.ndim == 3 else rel


def heatmap_fn(model, method, cfg=None, gradcam_layer=None, random_seed=0):
    """Closure computing the ``method`` heatmap at image resolution."""
    if method == "agf":
        agf_cfg = cfg if cfg is not None else AgfConfig()

        def fn(image, target):
            return explain(model, image, target, agf_cfg)

    elif method == "lrp":

        def fn(image, target):
            trace = forward(model, image)
            return _channel_sum(lrp(model, trace, target))

    elif method == "clrp":

        def fn(image, target):
            trace = forward(model, image)
            return _channel_sum(clrp(model, trace, target))

    elif method == "gradcam":

        def fn(image, target):
            trace = forward(model, image)
            seed = np.zeros(model.class_count)
            seed[target] = 1.0
            grads = backward(model, trace, seed)
            cam = grad_cam(trace, grads, gradcam_layer)
            h, w = np.asarray(image).shape[-2:]
            return bilinear_resize(cam, h, w)

    elif method == "random":
        fn = random_heatmap_fn(random_seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    return fn
