"""ModelPack serialization and fixture-bundle export.

The on-disk format is written here independently of the consuming engine:
"NNPK" magic, u32 version 1, u64 manifest length, canonical-JSON manifest,
then raw little-endian float32 buffers addressed by manifest offsets.
"""

import json
import os
import struct

import numpy as np
import torch

from .net import manifest_layers, normalize_batch
from .shapes import load_dataset_arrays
from .train import model_logits, rebuild

MAGIC = b"NNPK"
FORMAT_VERSION = 1


def _pack(manifest, chunks):
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<Q", len(blob))
    out += blob
    for raw in chunks:
        out += raw
    return bytes(out)


def modelpack_bytes(arch, state, mean, std, class_count, input_shape):
    """Serialize parameter arrays into the ModelPack container."""
    chunks = []
    offset = 0

    def put(arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        rec = {"shape": list(arr.shape), "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
        return rec

    layers = manifest_layers(arch)
    param_idx = 0
    for entry, layer in zip(arch, layers):
        if entry["kind"] in ("conv2d", "linear"):
            layer["weight"] = put(state[f"{param_idx}.weight"])
            layer["bias"] = put(state[f"{param_idx}.bias"])
        param_idx += 1
    manifest = {
        "class_count": int(class_count),
        "input_shape": [int(v) for v in input_shape],
        "preprocess": {
            "mean": [float(v) for v in np.atleast_1d(mean)],
            "std": [float(v) for v in np.atleast_1d(std)],
        },
        "layers": layers,
    }
    return _pack(manifest, chunks)


def export_modelpack(checkpoint, path):
    """Write the full classifier as one ModelPack file."""
    data = modelpack_bytes(
        checkpoint["arch"],
        checkpoint["state"],
        checkpoint["mean"],
        checkpoint["std"],
        checkpoint["class_count"],
        checkpoint["input_shape"],
    )
    with open(path, "wb") as fh:
        fh.write(data)


def _split_point(arch):
    """Index of the final linear layer (the classifier head)."""
    for pos in range(len(arch) - 1, -1, -1):
        if arch[pos]["kind"] == "linear":
            return pos
    raise ValueError("architecture has no linear head")


def export_split(checkpoint, features_path, head_path):
    """Write feature-extractor and classifier-head ModelPacks.

    The features pack keeps the image preprocessing; the head pack consumes
    raw latent vectors (identity preprocessing).
    """
    arch = checkpoint["arch"]
    cut = _split_point(arch)
    state = checkpoint["state"]
    latent_dim = int(state[f"{cut}.weight"].shape[1])

    feat_state = {k: v for k, v in state.items() if int(k.split(".")[0]) < cut}
    feat_bytes = modelpack_bytes(
        arch[:cut], feat_state, checkpoint["mean"], checkpoint["std"],
        latent_dim, checkpoint["input_shape"],
    )
    with open(features_path, "wb") as fh:
        fh.write(feat_bytes)

    head_state = {"0.weight": state[f"{cut}.weight"], "0.bias": state[f"{cut}.bias"]}
    head_bytes = modelpack_bytes(
        arch[cut:], head_state, np.zeros(1), np.ones(1),
        checkpoint["class_count"], (latent_dim,),
    )
    with open(head_path, "wb") as fh:
        fh.write(head_bytes)


def reference_logits(checkpoint, data_dir, count=16):
    """Exporter-side logits for the first ``count`` images of a dataset.

    Logits are computed on the quantized pixel data the files actually hold,
    so a consuming engine can be checked against them bit-for-bit-ish.
    """
    images, _, names = load_dataset_arrays(data_dir)
    seen = {}
    for idx, name in enumerate(names):
        if name not in seen:
            seen[name] = idx
        if len(seen) >= count:
            break
    chosen = list(seen.items())[:count]
    logits = model_logits(checkpoint, images[[idx for _, idx in chosen]])
    return {
        "dataset": os.path.basename(os.path.normpath(data_dir)),
        "entries": [
            {"file": name, "logits": [float(v) for v in logits[k]]}
            for k, (name, _) in enumerate(chosen)
        ],
    }


def build_gallery(checkpoint, data_dir, count=32):
    """Latent/logit records for the first ``count`` distinct images."""
    images, _, names = load_dataset_arrays(data_dir)
    model = rebuild(checkpoint)
    # arch entries map 1:1 to sequential modules, so slicing at the head
    # position yields the feature extractor
    features = model[: _split_point(checkpoint["arch"])]
    x = normalize_batch(images, checkpoint["mean"], checkpoint["std"])
    with torch.no_grad():
        latents = features(x).numpy()
        logits = model(x).numpy()
    records = []
    seen = set()
    for i, name in enumerate(names):
        if name in seen:
            continue
        seen.add(name)
        records.append({
            "id": name,
            "latent": [float(v) for v in latents[i]],
            "logits": [float(v) for v in logits[i]],
        })
        if len(records) >= count:
            break
    return records


def save_gallery(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def save_reference_logits(manifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
