"""Class attribution propagation with factorization-guided residuals.

The driver walks the network from the logits back to the image. At every
parameterized layer it propagates the running attribution map with the
absolute-contribution rule, assembles a residual from input-agnostic
propagation, factorized activations/gradients, and the input-gradient
interaction, gates the activation-derived parts to counter the pull of
salient features, and re-balances so each step conserves the attribution
total.
"""

import json
from dataclasses import dataclass, replace

import numpy as np

from .attribution import (
    DEFAULT_EPSILON,
    GenericRuleConfig,
    broadcastable,
    delta_shift,
    generic_rule,
)
from .backprop import backward, layer_input_grad
from .core import (
    channel_mean_reduce,
    check_finite,
    heaviside_surrogate,
    normalize_max,
    positive_part,
)
from .factorization import guided_factorization
from .model import ForwardTrace, Model, forward

RESIDUAL_MODES = ("standard", "gradcam")


@dataclass(frozen=True)
class AgfConfig:
    """Residual-component switches; all on reproduces the full method.

    ``residual_mode='gradcam'`` swaps the whole convolutional residual for a
    per-layer channel-weighted gradient map instead.
    """

    use_agnostic: bool = True  # input-agnostic propagation term
    use_feature_factor: bool = True  # factorized activations
    use_gradient_factor: bool = True  # factorized gradients
    use_interaction: bool = True  # input-gradient interaction map
    use_gate: bool = True  # sigmoid gate on activation-derived terms
    residual_mode: str = "standard"
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.residual_mode not in RESIDUAL_MODES:
            raise ValueError(f"unknown residual_mode {self.residual_mode!r}")

    def ablated(self, **kw):
        return replace(self, **kw)


def _abs_cfg(cfg):
    return GenericRuleConfig("abs", "abs", cfg.epsilon)


def _ones_cfg(cfg):
    return GenericRuleConfig("ones", "abs", cfg.epsilon)


def target_reweighted_softmax(logits, t):
    """Class-highlighted score distribution and its logit gradient.

    Every logit is weighted by a Gaussian of its distance to the target
    logit (scale = the largest absolute distance), multiplied by the target
    logit, and softmaxed. Returns ``(p, seed)`` where ``seed`` is the exact
    gradient of ``p[t]`` w.r.t. the logits with the scale held constant.
    If all logits are equal the weights degenerate to ones.
    """
    y = np.asarray(logits, dtype=np.float64)
    if not 0 <= t < y.size:
        raise IndexError(f"class {t} outside 0..{y.size - 1}")
    d = y - y[t]
    sigma = float(np.max(np.abs(d)))
    if sigma == 0.0:
        w = np.ones_like(y)
        dw = np.zeros_like(y)  # weight derivative w.r.t. each y_k
    else:
        w = np.exp(-0.5 * (d / sigma) ** 2)
        dw = w * (-d / sigma**2)
    u = y[t] * w
    u_shift = u - np.max(u)
    e = np.exp(u_shift)
    p = e / e.sum()

    # dp[t]/du_k = p_t (delta_tk - p_k); du_k/dy_k = y_t*dw_k (k != t),
    # du_k/dy_t = w_k - y_t*dw_k for every k (du_t/dy_t = 1 since w_t = 1).
    dp_du = p[t] * (np.eye(y.size)[t] - p)
    seed = dp_du * (y[t] * dw)
    seed[t] = float(np.dot(dp_du, w - y[t] * dw))
    return p, seed


def initial_attribution(trace, model, t):
    """Seed gradient on the logits and the attribution at the head's input.

    The attribution starts as the head layer's input times the seed pulled
    back through that single layer.
    """
    p, seed = target_reweighted_softmax(trace.logits, t)
    x1 = trace.inputs[-1]
    g1 = layer_input_grad(model.layers[-1], x1, seed)
    return seed, np.asarray(x1, dtype=np.float64) * g1


def interaction_map(x, grad_x):
    """Max-normalized positive part of the channel-mean input·gradient map."""
    prod = np.asarray(x, dtype=np.float64) * np.asarray(grad_x, dtype=np.float64)
    return normalize_max(positive_part(channel_mean_reduce(prod)))


def conv_layer_step(layer, x, grad_x, phi_prev, cfg=AgfConfig()):
    """One attribution step through a conv layer, residual included."""
    c_map = generic_rule(layer, x, phi_prev, _abs_cfg(cfg))
    if cfg.residual_mode == "gradcam":
        residual = broadcastable(c_map, grad_cam_term(x, grad_x))
    else:
        residual = np.zeros_like(c_map)
        if cfg.use_agnostic:
            residual = residual + generic_rule(layer, x, phi_prev, _ones_cfg(cfg))
        if cfg.use_gradient_factor:
            f_grad = positive_part(guided_factorization(grad_x, c_map))
            residual = residual + broadcastable(c_map, f_grad)
        gated = np.zeros(c_map.shape[1:], dtype=np.float64)
        any_gated = False
        if cfg.use_feature_factor:
            gated = gated + positive_part(guided_factorization(x, c_map))
            any_gated = True
        if cfg.use_interaction:
            gated = gated + interaction_map(x, grad_x)
            any_gated = True
        if any_gated:
            gated = broadcastable(c_map, gated)
            if cfg.use_gate:
                residual = residual + gated * heaviside_surrogate(c_map)
            else:
                residual = residual + gated
    return delta_shift(c_map, residual)


def grad_cam_term(x, grad_x):
    """Per-layer channel-weighted gradient map used as drop-in residual."""
    weights = np.sum(np.asarray(grad_x, dtype=np.float64), axis=(1, 2))
    cam = np.mean(np.asarray(x, dtype=np.float64) * weights[:, None, None], axis=0)
    return positive_part(cam)


def linear_layer_step(
    layer, x, grad_x, phi_prev, cfg=AgfConfig(), is_first_linear=False, spatial_shape=None
):
    """One attribution step through a linear layer.

    The linear layer adjacent to the flatten gets the input-gradient
    interaction (computed on the unflattened maps) as its residual; other
    linear layers carry none.
    """
    c_map = generic_rule(layer, x, phi_prev, _abs_cfg(cfg))
    residual = np.zeros_like(c_map)
    if is_first_linear and cfg.use_interaction and cfg.residual_mode == "standard":
        if spatial_shape is None:
            raise ValueError("first linear layer needs the pre-flatten spatial shape")
        x2 = np.asarray(x, dtype=np.float64).reshape(spatial_shape)
        g2 = np.asarray(grad_x, dtype=np.float64).reshape(spatial_shape)
        m = interaction_map(x2, g2)
        residual = np.broadcast_to(m[None, :, :], spatial_shape).reshape(c_map.shape)
    return delta_shift(c_map, residual)


def _pre_flatten_shape(model, trace, linear_exec_idx):
    """Shape of the nearest upstream flatten's rank-3 input, if any."""
    for j in range(linear_exec_idx - 1, -1, -1):
        if model.layers[j].kind == "flatten":
            shape = np.asarray(trace.inputs[j]).shape
            return shape if len(shape) == 3 else None
    return None


def explain_trace(model, trace, t, cfg=AgfConfig(), return_steps=False):
    """Run the propagation loop over a prepared forward trace.

    Returns the signed H×W heatmap (channel-summed attribution at the
    image); with ``return_steps`` also the list of ``(depth_index,
    attribution)`` pairs from the head down to the image.
    """
    if not 0 <= t < model.class_count:
        raise IndexError(f"class {t} outside 0..{model.class_count - 1}")
    seed, phi = initial_attribution(trace, model, t)
    grads = backward(model, trace, seed)
    first_linear_idx = min(
        (i for i, l in enumerate(model.layers) if l.kind == "linear"),
        default=None,
    )
    steps = [(1, phi)]
    for i in range(model.depth - 2, -1, -1):
        layer = model.layers[i]
        x = trace.inputs[i]
        if layer.kind == "conv2d":
            phi = conv_layer_step(layer, x, grads.grads[i], phi, cfg)
        elif layer.kind == "linear":
            spatial = _pre_flatten_shape(model, trace, i)
            phi = linear_layer_step(
                layer,
                x,
                grads.grads[i],
                phi,
                cfg,
                is_first_linear=(i == first_linear_idx and spatial is not None),
                spatial_shape=spatial,
            )
        else:
            phi = generic_rule(layer, x, phi, _abs_cfg(cfg))
        steps.append((model.depth_index(i), phi))
    check_finite(phi, "attribution")
    heatmap = np.sum(phi, axis=0) if phi.ndim == 3 else phi
    if return_steps:
        return heatmap, steps
    return heatmap


def explain(model, image, t, cfg=AgfConfig(), return_steps=False):
    """Signed class-evidence heatmap for ``image`` w.r.t. class ``t``."""
    trace = forward(model, image)
    return explain_trace(model, trace, t, cfg, return_steps=return_steps)


# ---------------------------------------------------------------------------
# self-supervised explanation via nearest-neighbor latent contrast


@dataclass
class GalleryEntry:
    id: str
    latent: np.ndarray
    logits: np.ndarray


class GalleryError(ValueError):
    pass


def load_gallery(path):
    """Read a JSON-lines gallery of (id, latent, logits) records."""
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                entries.append(
                    GalleryEntry(
                        id=str(rec["id"]),
                        latent=np.asarray(rec["latent"], dtype=np.float64),
                        logits=np.asarray(rec["logits"], dtype=np.float64),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise GalleryError(f"{path}:{line_no}: malformed gallery line") from exc
    if not entries:
        raise GalleryError(f"{path}: empty gallery")
    dim = entries[0].latent.size
    if any(e.latent.size != dim for e in entries):
        raise GalleryError(f"{path}: latent vectors differ in length")
    return entries


def save_gallery(entries, path):
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(
                json.dumps(
                    {
                        "id": e.id,
                        "latent": [float(v) for v in np.asarray(e.latent).ravel()],
                        "logits": [float(v) for v in np.asarray(e.logits).ravel()],
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def nearest_gallery_entry(latent, gallery):
    """Index of the closest gallery latent, skipping exact self-matches."""
    latent = np.asarray(latent, dtype=np.float64).ravel()
    best = None
    best_d = np.inf
    for idx, entry in enumerate(gallery):
        d = float(np.linalg.norm(latent - entry.latent.ravel()))
        if d == 0.0:
            continue
        if d < best_d:
            best, best_d = idx, d
    if best is None:
        raise GalleryError("gallery holds only zero-distance entries")
    return best, best_d


def ssl_explain(features_model, head_model, image, gallery, cfg=AgfConfig(),
                fusion="subtract"):
    """Explain what distinguishes ``image`` from its nearest gallery neighbor.

    The image's latent vector (features model output) is contrasted against
    the closest gallery latent; the classifier head runs on the contrast,
    and the winning pseudo-class is explained over a stitched trace: head
    inputs from the contrast vector, feature inputs from the image itself.
    ``fusion`` selects the contrast: neighbor subtracted (default) or added.
    """
    if fusion not in ("subtract", "add"):
        raise ValueError(f"unknown fusion {fusion!r}")
    ftrace = forward(features_model, image)
    latent = ftrace.logits
    idx, _ = nearest_gallery_entry(latent, gallery)
    neighbor = gallery[idx].latent.ravel()
    contrast = latent - neighbor if fusion == "subtract" else latent + neighbor
    htrace = forward(head_model, contrast)
    t = int(np.argmax(htrace.logits))
    combined = Model(
        layers=list(features_model.layers) + list(head_model.layers),
        class_count=head_model.class_count,
        input_shape=features_model.input_shape,
        mean=features_model.mean,
        std=features_model.std,
    )
    stitched = ForwardTrace(inputs=list(ftrace.inputs) + list(htrace.inputs), logits=htrace.logits)
    heatmap = explain_trace(combined, stitched, t, cfg)
    return heatmap, t, gallery[idx].id
