"""Two-class factorization of a feature tensor into foreground/background.

A signed partition map assigns every pixel to one of two groups; each group
gets a representative channel profile (its mean), and a one-shot ridge least
squares recovers per-pixel nonnegative mixing weights for both profiles.
The output is the foreground weight minus the background weight, a signed
spatial map.
"""

import numpy as np

from .core import (
    ShapeMismatchError,
    channel_mean_reduce,
    heaviside_surrogate,
    normalize_max,
    positive_part,
)

RIDGE_SCALE = 1e-6


def representatives(h, phi):
    """Per-channel means of ``h`` over the positive / nonpositive pixels.

    ``h`` is C×HW with values in (0, 1); ``phi`` has length HW. An empty
    partition yields an all-zero representative.
    """
    h = np.asarray(h, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    if h.ndim != 2 or h.shape[1] != phi.size:
        raise ShapeMismatchError(f"data {h.shape} does not match partition {phi.shape}")
    fg = phi > 0
    c = h.shape[0]
    r_f = h[:, fg].mean(axis=1) if fg.any() else np.zeros(c)
    r_b = h[:, ~fg].mean(axis=1) if (~fg).any() else np.zeros(c)
    return r_f, r_b


def normal_equations(r, h):
    """Ridge-regularized solve of R·W ≈ H for W (pre-clipping).

    Returns ``(w_pre, lam)`` where ``w_pre`` is 2×HW with rows ordered
    (background, foreground). The ridge keeps the 2×2 system solvable when
    the representatives are parallel or a channel count of one collapses it.
    """
    r = np.asarray(r, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    gram = r.T @ r
    tr = float(np.trace(gram))
    if tr == 0.0:
        return np.zeros((2, h.shape[1])), 0.0
    lam = RIDGE_SCALE * tr / 2.0
    w_pre = np.linalg.solve(gram + lam * np.eye(2), r.T @ h)
    return w_pre, lam


def solve_weights(r, h):
    """Nonnegative mixing weights (W_b, W_f) for representatives ``r``.

    ``r`` is C×2 with columns ordered [background, foreground]; the solution
    is clipped to nonnegatives after the ridge solve.
    """
    w_pre, _ = normal_equations(r, h)
    w = positive_part(w_pre)
    return w[0], w[1]


def guided_factorization(y, guide):
    """Signed foreground-minus-background map for tensor ``y``.

    ``guide`` (same C×H×W shape) sets the partition via its channel mean:
    positive pixels seed the foreground, the rest the background. ``y`` is
    max-normalized and squashed through a sigmoid before factorization so
    multiple streams combine on a common scale.
    """
    y = np.asarray(y, dtype=np.float64)
    guide = np.asarray(guide, dtype=np.float64)
    if y.shape != guide.shape:
        raise ShapeMismatchError(f"data {y.shape} does not match guide {guide.shape}")
    if y.ndim != 3:
        raise ShapeMismatchError(f"expected rank-3 tensor, got shape {y.shape}")
    c, hh, ww = y.shape
    phi = channel_mean_reduce(guide).reshape(-1)
    hmat = heaviside_surrogate(normalize_max(y)).reshape(c, hh * ww)
    r_f, r_b = representatives(hmat, phi)
    r = np.stack([r_b, r_f], axis=1)
    w_b, w_f = solve_weights(r, hmat)
    return (w_f - w_b).reshape(hh, ww)
