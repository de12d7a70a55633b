"""Torch model construction from a declarative sequential architecture.

Only the layer kinds the explainability engine can load are accepted;
anything else (skip connections, batch norm, ...) is rejected up front.
"""

import numpy as np
import torch
from torch import nn

SUPPORTED_KINDS = ("conv2d", "linear", "relu", "maxpool2d", "avgpool2d", "flatten")

DEFAULT_ARCH = (
    {"kind": "conv2d", "out": 16, "kernel": 3, "stride": 1, "padding": 1},
    {"kind": "relu"},
    {"kind": "conv2d", "out": 16, "kernel": 3, "stride": 1, "padding": 1},
    {"kind": "relu"},
    {"kind": "maxpool2d", "kernel": 2, "stride": 2},
    {"kind": "conv2d", "out": 32, "kernel": 3, "stride": 1, "padding": 1},
    {"kind": "relu"},
    {"kind": "conv2d", "out": 32, "kernel": 3, "stride": 1, "padding": 1},
    {"kind": "relu"},
    {"kind": "maxpool2d", "kernel": 2, "stride": 2},
    {"kind": "conv2d", "out": 48, "kernel": 3, "stride": 1, "padding": 1},
    {"kind": "relu"},
    {"kind": "conv2d", "out": 48, "kernel": 3, "stride": 1, "padding": 1},
    {"kind": "relu"},
    {"kind": "maxpool2d", "kernel": 2, "stride": 2},
    {"kind": "flatten"},
    {"kind": "linear", "out": 64},
    {"kind": "relu"},
    {"kind": "linear", "out": None},  # class count filled in at build time
)


class ArchitectureError(ValueError):
    pass


def build_model(arch, in_shape, class_count):
    """nn.Sequential from the architecture spec, validating every entry."""
    modules = []
    shape = tuple(in_shape)
    arch = [dict(entry) for entry in arch]
    if arch and arch[-1]["kind"] == "linear" and arch[-1].get("out") is None:
        arch[-1]["out"] = class_count
    for pos, entry in enumerate(arch):
        kind = entry.get("kind")
        if kind not in SUPPORTED_KINDS:
            raise ArchitectureError(
                f"layer {pos}: kind {kind!r} is not a supported sequential layer"
            )
        if kind == "conv2d":
            if len(shape) != 3:
                raise ArchitectureError(f"layer {pos}: conv2d needs a C×H×W input")
            c, h, w = shape
            k, s, p = entry["kernel"], entry.get("stride", 1), entry.get("padding", 0)
            modules.append(nn.Conv2d(c, entry["out"], k, stride=s, padding=p))
            shape = (entry["out"], (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        elif kind == "linear":
            if len(shape) != 1:
                raise ArchitectureError(f"layer {pos}: linear needs a flat input")
            modules.append(nn.Linear(shape[0], entry["out"]))
            shape = (entry["out"],)
        elif kind == "relu":
            modules.append(nn.ReLU())
        elif kind in ("maxpool2d", "avgpool2d"):
            c, h, w = shape
            k, s = entry["kernel"], entry.get("stride", entry["kernel"])
            cls = nn.MaxPool2d if kind == "maxpool2d" else nn.AvgPool2d
            modules.append(cls(k, stride=s))
            shape = (c, (h - k) // s + 1, (w - k) // s + 1)
        elif kind == "flatten":
            modules.append(nn.Flatten())
            shape = (int(np.prod(shape)),)
    if shape != (class_count,):
        raise ArchitectureError(f"architecture ends in shape {shape}, need ({class_count},)")
    return nn.Sequential(*modules), arch


def manifest_layers(arch):
    """Hyperparameter part of the ModelPack layer list for this architecture."""
    out = []
    for entry in arch:
        kind = entry["kind"]
        rec = {"kind": kind}
        if kind == "conv2d":
            rec["stride"] = entry.get("stride", 1)
            rec["padding"] = entry.get("padding", 0)
        elif kind in ("maxpool2d", "avgpool2d"):
            rec["kernel"] = entry["kernel"]
            rec["stride"] = entry.get("stride", entry["kernel"])
        out.append(rec)
    return out


def normalize_batch(images, mean, std):
    x = torch.as_tensor(np.ascontiguousarray(images), dtype=torch.float32)
    m = torch.as_tensor(mean, dtype=torch.float32).view(1, -1, 1, 1)
    s = torch.as_tensor(std, dtype=torch.float32).view(1, -1, 1, 1)
    return (x - m) / s
