"""Command-line surface: explain, perturb, segeval, ssl-explain, selftest.

Exit codes: 0 success, 1 usage error, 2 data error (missing/malformed
files, shape mismatches), 3 numeric or invariant failure.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from .agf import AgfConfig, GalleryError, load_gallery, ssl_explain
from .attribution import DegenerateInputError
from .core import NumericError
from .dataset import DatasetError, load_dataset
from .evaluation import (
    DEFAULT_FRACTIONS,
    negative_perturbation,
    render_heatmap,
    segmentation_eval,
)
from .methods import METHODS, POLARITY, heatmap_fn
from .model import ModelPackError, load_modelpack
from .selftest import run_selftest

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

ABLATE_FLAGS = {
    "a": "use_agnostic",
    "fx": "use_feature_factor",
    "fgrad": "use_gradient_factor",
    "m": "use_interaction",
    "gate": "use_gate",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _agf_config(args):
    kw = {}
    for token in filter(None, (args.ablate or "").split(",")):
        token = token.strip()
        if token not in ABLATE_FLAGS:
            raise UsageError(
                f"unknown --ablate token {token!r} (expected {','.join(ABLATE_FLAGS)})"
            )
        kw[ABLATE_FLAGS[token]] = False
    if args.residual:
        kw["residual_mode"] = args.residual
    return AgfConfig(**kw)


def _parse_fractions(text):
    try:
        fractions = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --fractions value: {text!r}") from exc
    if not fractions:
        raise UsageError("--fractions must list at least one value")
    return fractions


def _method_options(parser, with_random=False):
    choices = METHODS + (("random",) if with_random else ())
    parser.add_argument("--method", required=True, choices=choices)
    parser.add_argument("--gradcam-layer", type=int, default=None,
                        help="depth index of the feature map (1 = logits layer)")
    parser.add_argument("--ablate", default="",
                        help="comma list of residual parts to disable: a,fx,fgrad,m,gate")
    parser.add_argument("--residual", choices=["gradcam"], default=None,
                        help="swap the residual for a per-layer gradient map")


def build_parser():
    parser = _Parser(prog="attrifact", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("explain", help="write a class-evidence heatmap for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="target", type=int, required=True)
    _method_options(p)
    p.add_argument("--out", required=True, help="output PGM path")
    p.add_argument("--raw", default=None, help="optional raw float32 heatmap path")

    p = sub.add_parser("perturb", help="negative-perturbation accuracy curve over a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    _method_options(p, with_random=True)
    p.add_argument("--mode", choices=["predicted", "target"], default="predicted")
    p.add_argument("--fractions", default=",".join(str(f) for f in DEFAULT_FRACTIONS))
    p.add_argument("--seed", type=int, default=0, help="seed for the random baseline")
    p.add_argument("--out", required=True, help="output CSV path (JSON summary written beside it)")

    p = sub.add_parser("segeval", help="segmentation metrics against ground-truth masks")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    _method_options(p)
    p.add_argument("--out", required=True, help="output JSON report path")

    p = sub.add_parser("ssl-explain", help="explain the nearest-neighbor latent contrast")
    p.add_argument("--features", required=True, help="feature-extractor ModelPack")
    p.add_argument("--head", required=True, help="classifier-head ModelPack")
    p.add_argument("--image", required=True)
    p.add_argument("--gallery", required=True, help="JSON-lines latent gallery")
    p.add_argument("--fusion", choices=["subtract", "add"], default="subtract",
                   help="combine with the neighbor latent by difference or sum")
    p.add_argument("--ablate", default="")
    p.add_argument("--residual", choices=["gradcam"], default=None)
    p.add_argument("--out", required=True, help="output PGM path")
    p.add_argument("--raw", default=None)

    sub.add_parser("selftest", help="run the built-in invariant suite")
    return parser


def _load_image(path):
    from .dataset import read_netpbm

    return read_netpbm(path)


def cmd_explain(args):
    model = load_modelpack(args.model)
    image = _load_image(args.image)
    if not 0 <= args.target < model.class_count:
        raise UsageError(f"--class outside 0..{model.class_count - 1}")
    fn = heatmap_fn(model, args.method, cfg=_agf_config(args), gradcam_layer=args.gradcam_layer)
    hm = fn(image, args.target)
    render_heatmap(hm, pgm_path=args.out, raw_path=args.raw)
    return EXIT_OK


def cmd_perturb(args):
    model = load_modelpack(args.model)
    records = load_dataset(args.data)
    samples = [(rec.load_image(), rec.label) for rec in records]
    fractions = _parse_fractions(args.fractions)
    fn = heatmap_fn(
        model,
        args.method,
        cfg=_agf_config(args),
        gradcam_layer=args.gradcam_layer,
        random_seed=args.seed,
    )
    curve = negative_perturbation(model, samples, fn, fractions, args.mode)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "accuracy"])
        for f, a in zip(curve.fractions, curve.accuracy):
            writer.writerow([f"{f:.6g}", f"{a:.6g}"])
    summary = {
        "auc": curve.auc,
        "method": args.method,
        "mode": args.mode,
        "images": len(samples),
    }
    with open(os.path.splitext(args.out)[0] + ".json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return EXIT_OK


def cmd_segeval(args):
    model = load_modelpack(args.model)
    records = load_dataset(args.data)
    fn = heatmap_fn(model, args.method, cfg=_agf_config(args), gradcam_layer=args.gradcam_layer)
    heatmaps, masks, names = [], [], []
    for rec in records:
        mask = rec.load_mask()
        if mask is None:
            raise DatasetError(f"{rec.name}: no ground-truth mask")
        heatmaps.append(fn(rec.load_image(), rec.label))
        masks.append(mask)
        names.append(rec.name)
    report = segmentation_eval(heatmaps, masks, POLARITY[args.method])
    payload = {
        "method": args.method,
        "polarity": POLARITY[args.method],
        "pixel_accuracy": report.pixel_accuracy,
        "mean_average_precision": report.mean_average_precision,
        "per_image": [
            {"image": names[r["index"]], "label": records[r["index"]].label,
             "accuracy": r["accuracy"], "ap": r["ap"]}
            for r in report.per_image
        ],
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return EXIT_OK


def cmd_ssl_explain(args):
    features = load_modelpack(args.features)
    head = load_modelpack(args.head)
    image = _load_image(args.image)
    gallery = load_gallery(args.gallery)
    cfg = _agf_config(args)
    hm, t, neighbor = ssl_explain(features, head, image, gallery, cfg, fusion=args.fusion)
    render_heatmap(hm, pgm_path=args.out, raw_path=args.raw)
    print(f"pseudo-class {t} (nearest neighbor {neighbor})")
    return EXIT_OK


def cmd_selftest(_args):
    return EXIT_OK if run_selftest() else EXIT_NUMERIC


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        handler = {
            "explain": cmd_explain,
            "perturb": cmd_perturb,
            "segeval": cmd_segeval,
            "ssl-explain": cmd_ssl_explain,
            "selftest": cmd_selftest,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DegenerateInputError, NumericError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ModelPackError, DatasetError, GalleryError, ValueError, IndexError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
