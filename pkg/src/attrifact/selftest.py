"""Built-in invariant suite behind the ``selftest`` CLI command.

Every check builds its own tiny fixtures from a pinned seed and verifies an
independent property: loop-oracle equality, finite-difference agreement,
conservation of attribution totals, or factorization geometry. Checks are
self-contained so the suite runs without any external files.
"""

import numpy as np

from .agf import AgfConfig, explain_trace, target_reweighted_softmax
from .attribution import (
    ABS_CONFIG,
    GenericRuleConfig,
    clrp,
    delta_shift,
    generic_rule,
    grad_cam,
    lrp,
    relevance_init,
)
from .backprop import backward
from .core import normalize_max, positive_part
from .factorization import guided_factorization, normal_equations, representatives
from .model import Layer, Model, forward, layer_forward, validate_model

SEED = 20240817


def _toy_model(rng, classes=4):
    """Random 2-conv / 2-linear chain on 2×8×8 inputs."""
    w1 = rng.standard_normal((4, 2, 3, 3)) * 0.5
    w2 = rng.standard_normal((5, 4, 3, 3)) * 0.4
    w3 = rng.standard_normal((8, 5 * 2 * 2)) * 0.4
    w4 = rng.standard_normal((classes, 8)) * 0.5
    layers = [
        Layer("conv2d", weight=w1, bias=rng.standard_normal(4) * 0.1, stride=1, padding=1),
        Layer("relu"),
        Layer("maxpool2d", kernel=2, stride=2),
        Layer("conv2d", weight=w2, bias=rng.standard_normal(5) * 0.1, stride=1, padding=1),
        Layer("relu"),
        Layer("avgpool2d", kernel=2, stride=2),
        Layer("flatten"),
        Layer("linear", weight=w3, bias=rng.standard_normal(8) * 0.1),
        Layer("relu"),
        Layer("linear", weight=w4, bias=rng.standard_normal(classes) * 0.1),
    ]
    model = Model(
        layers=layers,
        class_count=classes,
        input_shape=(2, 8, 8),
        mean=np.full(2, 0.5),
        std=np.full(2, 0.5),
    )
    return validate_model(model)


def _run_layers(model, x):
    for layer in model.layers:
        x = layer_forward(layer, x)
    return x


def _rel_err(a, b):
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b))) / scale


def check_conv_oracle(rng):
    """conv2d matches a six-nested-loop evaluation."""
    x = rng.standard_normal((3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    stride, pad = 2, 1
    layer = Layer("conv2d", weight=w, bias=b, stride=stride, padding=pad)
    got = layer_forward(layer, x)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (8 + 2 * pad - 3) // stride + 1
    want = np.zeros((4, oh, oh))
    for o in range(4):
        for oy in range(oh):
            for ox in range(oh):
                acc = b[o]
                for i in range(3):
                    for ky in range(3):
                        for kx in range(3):
                            acc += xp[i, oy * stride + ky, ox * stride + kx] * w[o, i, ky, kx]
                want[o, oy, ox] = acc
    err = _rel_err(got, want)
    assert err <= 1e-5, f"conv loop-oracle error {err:.2e}"


def check_gradient_oracle(rng):
    """backward agrees with central finite differences at the image."""
    model = _toy_model(rng)
    image = rng.random((2, 8, 8))
    trace = forward(model, image)
    seed = rng.standard_normal(model.class_count)
    g = backward(model, trace, seed).grads[0]
    x0 = trace.inputs[0]
    h = 1e-3
    fd = np.zeros_like(x0)
    flat = x0.ravel()
    for j in range(flat.size):
        bump = np.zeros_like(flat)
        bump[j] = h
        up = _run_layers(model, (flat + bump).reshape(x0.shape))
        dn = _run_layers(model, (flat - bump).reshape(x0.shape))
        fd.ravel()[j] = float(np.dot(seed, up - dn)) / (2 * h)
    err = _rel_err(g, fd)
    assert err <= 1e-3, f"finite-difference error {err:.2e}"


def check_generic_rule_oracle(rng):
    """Generic rule equals the double-loop transcription on a linear layer."""
    for _ in range(20):
        w = rng.standard_normal((3, 4))
        x = rng.standard_normal(4)
        r = rng.standard_normal(3)
        layer = Layer("linear", weight=w, bias=np.zeros(3))
        cfg = GenericRuleConfig("abs", "abs")
        got = generic_rule(layer, x, r, cfg)
        xt, wt = np.abs(x), np.abs(w)
        want = np.zeros(4)
        for j in range(4):
            for i in range(3):
                z = sum(wt[i, k] * xt[k] for k in range(4))
                denom = z + cfg.epsilon * (1.0 if z >= 0 else -1.0)
                want[j] += xt[j] * wt[i, j] * r[i] / denom
        err = float(np.max(np.abs(got - want)))
        assert err <= 1e-6, f"generic-rule oracle error {err:.2e}"


def check_conservation(rng):
    """Generic rule preserves totals on conv and linear layers."""
    conv = Layer("conv2d", weight=rng.standard_normal((4, 3, 3, 3)), bias=np.zeros(4), padding=1)
    x = rng.standard_normal((3, 6, 6))
    r = rng.standard_normal((4, 6, 6))
    for cfg in (ABS_CONFIG, GenericRuleConfig("ones", "abs")):
        out = generic_rule(conv, x, r, cfg)
        drift = abs(out.sum() - r.sum()) / max(abs(r.sum()), 1e-12)
        assert drift <= 1e-5, f"conv conservation drift {drift:.2e}"
    lin = Layer("linear", weight=rng.standard_normal((5, 7)), bias=np.zeros(5))
    xl = rng.standard_normal(7)
    rl = rng.standard_normal(5)
    out = generic_rule(lin, xl, rl, ABS_CONFIG)
    drift = abs(out.sum() - rl.sum()) / max(abs(rl.sum()), 1e-12)
    assert drift <= 1e-5, f"linear conservation drift {drift:.2e}"


def check_delta_shift(rng):
    """Residual injection restores the reference total exactly."""
    g = rng.standard_normal(64)
    g[rng.random(64) < 0.3] = 0.0
    r = rng.standard_normal(64)
    out = delta_shift(g, r)
    drift = abs(out.sum() - g.sum()) / max(abs(g.sum()), 1e-12)
    assert drift <= 1e-6, f"delta-shift drift {drift:.2e}"
    assert np.array_equal(delta_shift(g, np.zeros(64)), g), "zero residual must be identity"


def check_factorization(rng):
    """Normal-equation residual, separable fixture, and sign agreement."""
    for c in (2, 4, 8):
        h = rng.random((c, 16))
        phi = rng.standard_normal(16)
        r_f, r_b = representatives(h, phi)
        r = np.stack([r_b, r_f], axis=1)
        w_pre, lam = normal_equations(r, h)
        residual = np.linalg.norm((r.T @ r + lam * np.eye(2)) @ w_pre - r.T @ h)
        assert residual <= 1e-6, f"normal-equation residual {residual:.2e}"
    y = np.array([[[2.0, -2.0]], [[-2.0, 2.0]]]).reshape(2, 1, 2)
    guide = np.array([[[1.0, -1.0]], [[1.0, -1.0]]]).reshape(2, 1, 2)
    f = guided_factorization(y, guide)
    assert np.max(np.abs(f.ravel() - [1.0, -1.0])) <= 1e-3, f"separable fixture gave {f.ravel()}"


def check_agf_conservation(rng):
    """Per-layer and end-to-end attribution totals for every ablation."""
    model = _toy_model(rng)
    image = rng.random((2, 8, 8))
    trace = forward(model, image)
    configs = [
        AgfConfig(),
        AgfConfig(use_agnostic=False, use_feature_factor=False, use_gradient_factor=False,
                  use_interaction=False),
        AgfConfig(use_agnostic=False),
        AgfConfig(use_feature_factor=False),
        AgfConfig(use_gradient_factor=False),
        AgfConfig(use_interaction=False),
        AgfConfig(use_gate=False),
        AgfConfig(residual_mode="gradcam"),
    ]
    for cfg in configs:
        heatmap, steps = explain_trace(model, trace, 1, cfg, return_steps=True)
        sums = [float(np.sum(phi)) for _, phi in steps]
        for a, b in zip(sums, sums[1:]):
            drift = abs(b - a) / max(abs(a), 1e-9)
            assert drift <= 1e-5, f"layer conservation drift {drift:.2e} ({cfg})"
        end = abs(float(heatmap.sum()) - sums[0]) / max(abs(sums[0]), 1e-9)
        assert end <= 1e-4, f"end-to-end drift {end:.2e} ({cfg})"


def check_initial_attribution(rng):
    """Seed gradient matches finite differences of the reweighted score."""
    y = rng.standard_normal(6) * 2
    t = 2
    sigma = float(np.max(np.abs(y - y[t])))

    def score(v):
        w = np.exp(-0.5 * ((v - v[t]) / sigma) ** 2)
        u = v[t] * w
        e = np.exp(u - np.max(u))
        return (e / e.sum())[t]

    _, seed = target_reweighted_softmax(y, t)
    h = 1e-5
    for j in range(y.size):
        bump = np.zeros_like(y)
        bump[j] = h
        # score() holds the scale constant, matching the analytic derivative
        fd = (score(y + bump) - score(y - bump)) / (2 * h)
        assert abs(fd - seed[j]) <= 1e-4, f"seed[{j}] {seed[j]:.6f} vs fd {fd:.6f}"


def check_lrp_and_clrp(rng):
    """Baselines: LRP conserves its seed; CLRP composes two propagations."""
    model = _toy_model(rng)
    image = rng.random((2, 8, 8))
    trace = forward(model, image)
    t = int(np.argmax(trace.logits))
    rel = lrp(model, trace, t)
    y_t = float(trace.logits[t])
    drift = abs(float(rel.sum()) - y_t) / max(abs(y_t), 1e-9)
    assert drift <= 1e-3, f"relevance total drifts from logit by {drift:.2e}"
    out = clrp(model, trace, t)
    assert out.shape == trace.inputs[0].shape


def check_grad_cam(rng):
    """Weighted-channel map matches its loop transcription."""
    model = _toy_model(rng)
    image = rng.random((2, 8, 8))
    trace = forward(model, image)
    seed = np.zeros(model.class_count)
    seed[0] = 1.0
    grads = backward(model, trace, seed)
    n = model.depth_index(3)  # second conv input (exec index 3)
    got = grad_cam(trace, grads, n)
    x, g = trace.inputs[3], grads.grads[3]
    c, hh, ww = x.shape
    want = np.zeros((hh, ww))
    for cc in range(c):
        want += x[cc] * g[cc].sum()
    want = np.maximum(want / c, 0)
    err = _rel_err(got, want)
    assert err <= 1e-6, f"grad-cam oracle error {err:.2e}"


CHECKS = [
    ("conv-loop-oracle", check_conv_oracle),
    ("gradient-finite-difference", check_gradient_oracle),
    ("generic-rule-double-loop", check_generic_rule_oracle),
    ("generic-rule-conservation", check_conservation),
    ("delta-shift-sum", check_delta_shift),
    ("factorization", check_factorization),
    ("attribution-conservation", check_agf_conservation),
    ("initial-attribution-gradient", check_initial_attribution),
    ("lrp-clrp", check_lrp_and_clrp),
    ("grad-cam-oracle", check_grad_cam),
]


def run_selftest(out=print):
    """Run every invariant check; return True when all pass."""
    ok = True
    for name, fn in CHECKS:
        rng = np.random.default_rng(SEED)
        try:
            fn(rng)
            out(f"ok   {name}")
        except AssertionError as exc:
            ok = False
            out(f"FAIL {name}: {exc}")
    return ok
