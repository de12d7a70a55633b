"""modelkit CLI: dataset | train | export | gallery, all seed-pinned."""

import argparse
import sys

import numpy as np
import torch

from .export import (
    build_gallery,
    export_modelpack,
    export_split,
    reference_logits,
    save_gallery,
    save_reference_logits,
)
from .shapes import load_dataset_arrays, write_single_dataset, write_two_object_dataset
from .train import group_rows, multihot_targets, train_classifier


def build_parser():
    parser = argparse.ArgumentParser(prog="modelkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="generate a synthetic shapes dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["single", "two-object"], default="single")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train the toy classifier on dataset directories")
    p.add_argument("--data", required=True, action="append",
                   help="training dataset directory (repeatable; rows per image merge "
                        "into a multi-label target)")
    p.add_argument("--val", required=True, help="validation dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path (.pt)")
    p.add_argument("--epochs", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export", help="write ModelPack files and reference logits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="ModelPack output path")
    p.add_argument("--split-features", default=None)
    p.add_argument("--split-head", default=None)
    p.add_argument("--reference-data", default=None,
                   help="dataset directory for the reference-logits manifest")
    p.add_argument("--reference-out", default=None)
    p.add_argument("--reference-count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gallery", help="latent gallery from the feature extractor")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    return parser


def cmd_dataset(args):
    if args.kind == "single":
        write_single_dataset(args.out, args.count, args.seed, args.size)
    else:
        write_two_object_dataset(args.out, args.count, args.seed, args.size)
    print(f"wrote {args.kind} dataset ({args.count} images) to {args.out}")
    return 0


def cmd_train(args):
    images, targets = [], []
    for root in args.data:
        x, y, names = load_dataset_arrays(root)
        grouped_x, label_sets = group_rows(x, y, names)
        images.append(grouped_x)
        targets.append(multihot_targets(label_sets))
    train_x = np.concatenate(images)
    train_t = np.concatenate(targets)
    val_x, val_y, _ = load_dataset_arrays(args.val)
    ckpt = train_classifier(train_x, train_t, val_x, val_y,
                            seed=args.seed, epochs=args.epochs)
    torch.save(ckpt, args.out)
    print(f"val accuracy {ckpt['val_accuracy']:.3f}; checkpoint at {args.out}")
    return 0


def _load_checkpoint(path):
    return torch.load(path, weights_only=False)


def cmd_export(args):
    ckpt = _load_checkpoint(args.checkpoint)
    export_modelpack(ckpt, args.out)
    print(f"modelpack at {args.out}")
    if args.split_features or args.split_head:
        if not (args.split_features and args.split_head):
            print("both --split-features and --split-head are required", file=sys.stderr)
            return 1
        export_split(ckpt, args.split_features, args.split_head)
        print(f"split packs at {args.split_features} / {args.split_head}")
    if args.reference_data:
        manifest = reference_logits(ckpt, args.reference_data, args.reference_count)
        out = args.reference_out or (args.out + ".logits.json")
        save_reference_logits(manifest, out)
        print(f"reference logits at {out}")
    return 0


def cmd_gallery(args):
    ckpt = _load_checkpoint(args.checkpoint)
    records = build_gallery(ckpt, args.data, args.count)
    save_gallery(records, args.out)
    print(f"gallery of {len(records)} latents at {args.out}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = {
        "dataset": cmd_dataset,
        "train": cmd_train,
        "export": cmd_export,
        "gallery": cmd_gallery,
    }[args.command]
    try:
        return handler(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
