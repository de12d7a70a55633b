"""Acceptance suite: one test per criterion, each printing a PASS line.

Runs entirely against the committed golden fixtures (ModelPack + datasets);
nothing here invokes the exporter tooling.
"""

import json
import os
import shutil
import time

import numpy as np
import pytest

from attrifact.agf import AgfConfig, explain_trace
from attrifact.attribution import GenericRuleConfig, generic_rule
from attrifact.backprop import backward
from attrifact.core import tensor_sum
from attrifact.dataset import load_dataset, read_netpbm
from attrifact.evaluation import negative_perturbation, random_heatmap_fn
from attrifact.factorization import (
    guided_factorization,
    normal_equations,
    representatives,
)
from attrifact.methods import heatmap_fn
from attrifact.model import Layer, forward, load_modelpack

from conftest import FIXTURES, random_model
from test_backprop import finite_difference

ALL_CONFIGS = [
    AgfConfig(),
    AgfConfig(use_agnostic=False, use_feature_factor=False,
              use_gradient_factor=False, use_interaction=False),
    AgfConfig(use_agnostic=False),
    AgfConfig(use_feature_factor=False),
    AgfConfig(use_gradient_factor=False),
    AgfConfig(use_interaction=False),
    AgfConfig(use_gate=False),
    AgfConfig(residual_mode="gradcam"),
]

ONLY_C = ALL_CONFIGS[1]


@pytest.fixture(scope="module")
def toy_model():
    return load_modelpack(os.path.join(FIXTURES, "toy_model.nnpk"))


@pytest.fixture(scope="module")
def single_records():
    return load_dataset(os.path.join(FIXTURES, "single_object"))


@pytest.fixture(scope="module")
def two_object_pairs():
    """(image, target_label, target_mask, other_mask) per labeled object."""
    records = load_dataset(os.path.join(FIXTURES, "two_object"))
    by_image = {}
    for rec in records:
        by_image.setdefault(rec.image_path, []).append(rec)
    pairs = []
    for path, recs in sorted(by_image.items()):
        assert len(recs) == 2, f"{path}: expected two labeled objects"
        image = recs[0].load_image()
        masks = {r.label: r.load_mask() for r in recs}
        for r in recs:
            other = next(l for l in masks if l != r.label)
            pairs.append((image, r.label, masks[r.label], masks[other]))
    return pairs


def test_conservation_suite(toy_model, single_records):
    """Per-layer and end-to-end attribution totals on shipped fixtures."""
    start = time.time()
    images = [single_records[0].load_image(), single_records[1].load_image()]
    two = load_dataset(os.path.join(FIXTURES, "two_object"))
    images.append(two[0].load_image())
    worst_layer = 0.0
    worst_end = 0.0
    for image in images:
        trace = forward(toy_model, image)
        targets = [int(np.argmax(trace.logits))]
        for cfg in ALL_CONFIGS:
            for t in targets:
                hm, steps = explain_trace(toy_model, trace, t, cfg, return_steps=True)
                sums = [tensor_sum(phi) for _, phi in steps]
                for a, b in zip(sums, sums[1:]):
                    worst_layer = max(worst_layer, abs(b - a) / max(abs(a), 1e-9))
                worst_end = max(worst_end, abs(tensor_sum(hm) - sums[0]) / max(abs(sums[0]), 1e-9))
    elapsed = time.time() - start
    assert worst_layer <= 1e-5, f"layer conservation drift {worst_layer:.2e}"
    assert worst_end <= 1e-4, f"end-to-end drift {worst_end:.2e}"
    assert elapsed < 10.0, f"conservation suite took {elapsed:.1f}s"
    print(f"\nPASS conservation: layer drift {worst_layer:.2e} (<=1e-5), "
          f"end-to-end {worst_end:.2e} (<=1e-4), {elapsed:.1f}s (<10s)")


def test_gradient_oracle():
    """Backward pass vs central finite differences on 10 random networks."""
    worst = 0.0
    for trial in range(10):
        model = random_model(np.random.default_rng(500 + trial))
        image = np.random.default_rng(600 + trial).random((2, 8, 8))
        trace = forward(model, image)
        seed = np.random.default_rng(700 + trial).standard_normal(model.class_count)
        g = backward(model, trace, seed).grads[0]
        fd = finite_difference(model, trace.inputs[0], seed, h=1e-3)
        scale = max(np.abs(fd).max(), np.abs(g).max(), 1e-12)
        worst = max(worst, float(np.abs(fd - g).max()) / scale)
    assert worst <= 1e-3, f"finite-difference error {worst:.2e}"
    print(f"\nPASS gradient oracle: max relative error {worst:.2e} (<=1e-3, 10 networks)")


def test_generic_rule_oracle():
    """Propagation rule vs double-loop transcription, 100 random layers."""
    from test_attribution import linear_rule_oracle

    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(100):
        w = rng.standard_normal((3, 4))
        x = rng.standard_normal(4)
        r = rng.standard_normal(3)
        layer = Layer("linear", weight=w, bias=np.zeros(3))
        got = generic_rule(layer, x, r, GenericRuleConfig("abs", "abs"))
        want = linear_rule_oracle(w, x, r, "abs", "abs")
        worst = max(worst, float(np.abs(got - want).max()))
    assert worst <= 1e-6, f"double-loop deviation {worst:.2e}"
    print(f"\nPASS generic-rule oracle: max deviation {worst:.2e} (<=1e-6, 100 instances)")


def test_factorization_oracle():
    """Normal-equation residual, separable fixture, sign agreement."""
    worst_residual = 0.0
    for c in range(2, 9):
        rng = np.random.default_rng(c)
        h = rng.random((c, 16))
        r_f, r_b = representatives(h, rng.standard_normal(16))
        r = np.stack([r_b, r_f], axis=1)
        w_pre, lam = normal_equations(r, h)
        worst_residual = max(worst_residual, float(np.linalg.norm(
            (r.T @ r + lam * np.eye(2)) @ w_pre - r.T @ h)))
    assert worst_residual <= 1e-6, f"normal-equation residual {worst_residual:.2e}"

    y = np.array([[[2.0, -2.0]], [[-2.0, 2.0]]]).reshape(2, 1, 2)
    guide = np.array([[[1.0, -1.0]], [[1.0, -1.0]]]).reshape(2, 1, 2)
    f = guided_factorization(y, guide)
    sep_err = float(np.abs(f.ravel() - [1.0, -1.0]).max())
    assert sep_err <= 1e-3, f"separable fixture off by {sep_err:.2e}"

    rng = np.random.default_rng(77)
    agree = True
    for _ in range(10):
        phi = np.sign(rng.standard_normal((4, 4)))
        phi[phi == 0] = 1.0
        y = np.stack([np.where(phi > 0, 3.0, -3.0), np.where(phi > 0, -3.0, 3.0)])
        f = guided_factorization(y, np.broadcast_to(phi, (2, 4, 4)).copy())
        agree &= bool(np.all(np.sign(f) == np.sign(phi)))
    assert agree, "sign disagreement on separable synthetics"
    print(f"\nPASS factorization oracle: residual {worst_residual:.2e} (<=1e-6), "
          f"separable off by {sep_err:.2e} (<=1e-3), signs agree")


def _positive_mass_wins(fn, pairs):
    wins = 0
    for image, label, target_mask, other_mask in pairs:
        hm = fn(image, label)
        pos = np.maximum(hm, 0)
        wins += float(pos[target_mask].sum()) > float(pos[other_mask].sum())
    return wins / len(pairs)


def test_class_specificity(toy_model, two_object_pairs):
    """Positive attribution concentrates on the explained object."""
    agf_rate = _positive_mass_wins(heatmap_fn(toy_model, "agf"), two_object_pairs)
    lrp_rate = _positive_mass_wins(heatmap_fn(toy_model, "lrp"), two_object_pairs)
    assert agf_rate >= 0.90, f"factorization-guided wins only {agf_rate:.3f}"
    assert 1.0 - lrp_rate >= 0.30, f"plain propagation fails only {1 - lrp_rate:.3f}"
    print(f"\nPASS class specificity: guided method wins {agf_rate:.3f} (>=0.90), "
          f"plain propagation fails {1 - lrp_rate:.3f} (>=0.30), "
          f"{len(two_object_pairs)} pairs")


def test_negative_perturbation_ordering(toy_model, single_records):
    """Guided heatmaps beat the random baseline; full beats bare propagation."""
    start = time.time()
    samples = [(rec.load_image(), rec.label) for rec in single_records]
    auc_full = negative_perturbation(
        toy_model, samples, heatmap_fn(toy_model, "agf"), mode="predicted").auc
    auc_random = negative_perturbation(
        toy_model, samples, random_heatmap_fn(0), mode="predicted").auc
    auc_only_c = negative_perturbation(
        toy_model, samples, heatmap_fn(toy_model, "agf", cfg=ONLY_C), mode="predicted").auc
    elapsed = time.time() - start
    assert auc_full >= 1.10 * auc_random, (
        f"full AUC {auc_full:.4f} < 1.1 * random {auc_random:.4f}")
    assert auc_only_c <= auc_full, (
        f"bare-propagation AUC {auc_only_c:.4f} exceeds full {auc_full:.4f}")
    assert elapsed < 120.0, f"perturbation suite took {elapsed:.1f}s"
    print(f"\nPASS perturbation ordering: full {auc_full:.4f} >= 1.1*random "
          f"({auc_random:.4f}), bare {auc_only_c:.4f} <= full, {elapsed:.0f}s (<120s)")


def test_cli_determinism(tmp_path, toy_model):
    """Every CLI command writes bitwise-identical outputs across two runs."""
    from attrifact.cli import main

    model_path = os.path.join(FIXTURES, "toy_model.nnpk")
    image_path = os.path.join(FIXTURES, "single_object", "images", "img_0000.ppm")

    # small dataset copy keeps the doubled perturb/segeval runs quick
    small = tmp_path / "small"
    (small / "images").mkdir(parents=True)
    (small / "masks").mkdir()
    records = load_dataset(os.path.join(FIXTURES, "two_object"))[:8]
    rows = ["filename,label"]
    for rec in records:
        shutil.copy(rec.image_path, small / "images" / rec.name)
        shutil.copy(rec.mask_path, small / "masks" / os.path.basename(rec.mask_path))
        rows.append(f"{rec.name},{rec.label}")
    (small / "labels.csv").write_text("\n".join(rows) + "\n")

    def run_twice(argv, outputs):
        assert main(argv) == 0
        first = [open(p, "rb").read() for p in outputs]
        assert main(argv) == 0
        assert [open(p, "rb").read() for p in outputs] == first

    out = tmp_path / "hm.pgm"
    raw = tmp_path / "hm.hmap"
    run_twice(["explain", "--model", model_path, "--image", image_path, "--class", "0",
               "--method", "agf", "--out", str(out), "--raw", str(raw)], [out, raw])

    curve = tmp_path / "curve.csv"
    run_twice(["perturb", "--model", model_path, "--data", str(small), "--method", "agf",
               "--fractions", "0.3,0.6", "--out", str(curve)],
              [curve, tmp_path / "curve.json"])

    report = tmp_path / "report.json"
    run_twice(["segeval", "--model", model_path, "--data", str(small), "--method", "agf",
               "--out", str(report)], [report])

    ssl_out = tmp_path / "ssl.pgm"
    run_twice(["ssl-explain", "--features", os.path.join(FIXTURES, "features.nnpk"),
               "--head", os.path.join(FIXTURES, "head.nnpk"), "--image", image_path,
               "--gallery", os.path.join(FIXTURES, "gallery.jsonl"),
               "--out", str(ssl_out)], [ssl_out])

    assert main(["selftest"]) == 0
    print("\nPASS determinism: explain/perturb/segeval/ssl-explain bitwise stable, "
          "selftest exits 0")


def test_cross_implementation_contract(toy_model, single_records):
    """[SECONDARY] exported pack reproduces the exporter's reference logits."""
    manifest = json.load(open(os.path.join(FIXTURES, "reference_logits.json")))
    assert len(manifest["entries"]) == 16
    worst = 0.0
    for entry in manifest["entries"]:
        image = read_netpbm(os.path.join(FIXTURES, "single_object", "images", entry["file"]))
        logits = forward(toy_model, image).logits
        worst = max(worst, float(np.abs(logits - np.asarray(entry["logits"])).max()))
    assert worst <= 1e-4, f"logit deviation {worst:.2e}"

    correct = 0
    for rec in single_records:
        pred = int(np.argmax(forward(toy_model, rec.load_image()).logits))
        correct += pred == rec.label
    accuracy = correct / len(single_records)
    assert accuracy >= 0.95, f"validation accuracy {accuracy:.3f}"
    print(f"\nPASS cross-implementation: worst logit deviation {worst:.2e} (<=1e-4, "
          f"16 images), validation accuracy {accuracy:.3f} (>=0.95)")
