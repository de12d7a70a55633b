"""Seed-pinned training of the toy shape classifier.

Training is multi-label (sigmoid per class) over a mix of single- and
two-object images, with smoothed targets. That keeps logits calibrated and
gives every object class present in an image a positive score, which is
what downstream class-specific explanation needs; plain softmax training
saturates the logit gaps instead.
"""

import numpy as np
import torch
from torch import nn

from .net import DEFAULT_ARCH, build_model, normalize_batch
from .shapes import NUM_CLASSES

TARGET_HIGH = 0.9
TARGET_LOW = 0.1


def multihot_targets(labels_per_image, classes=NUM_CLASSES):
    """n×C multi-hot matrix from per-image label lists."""
    out = np.zeros((len(labels_per_image), classes))
    for i, labels in enumerate(labels_per_image):
        out[i, list(labels)] = 1.0
    return out


def group_rows(images, labels, names):
    """Collapse per-(image, label) rows to unique images with label sets."""
    order = {}
    for i, name in enumerate(names):
        if name not in order:
            order[name] = (images[i], set())
        order[name][1].add(int(labels[i]))
    grouped = list(order.values())
    return np.stack([g[0] for g in grouped]), [g[1] for g in grouped]


def _augment(images, mean, rng):
    """Replace a random fraction of pixels with the dataset mean.

    Keeps the classifier usable on partially masked inputs, which the
    perturbation benchmark feeds it.
    """
    out = images.copy()
    n, _, h, w = out.shape
    for i in range(n):
        if rng.random() < 0.4:
            frac = rng.uniform(0.05, 0.35)
            k = int(frac * h * w)
            sel = rng.choice(h * w, size=k, replace=False)
            flat = out[i].reshape(3, h * w)
            flat[:, sel] = mean[:, None]
    return out


def train_classifier(train_images, train_targets, val_images, val_labels,
                     seed=0, epochs=24, arch=DEFAULT_ARCH, batch_size=64,
                     target_accuracy=0.95):
    """Train on quantized [0,1] images; returns a checkpoint dict.

    ``train_targets`` is an n×C multi-hot matrix (an integer label vector is
    also accepted). Validation accuracy is top-1 argmax against integer
    labels; raises ``RuntimeError`` if the target accuracy is not met.
    """
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    rng = np.random.default_rng(seed)

    train_targets = np.asarray(train_targets, dtype=np.float64)
    if train_targets.ndim == 1:
        train_targets = multihot_targets([[v] for v in train_targets.astype(int)])
    smoothed = train_targets * (TARGET_HIGH - TARGET_LOW) + TARGET_LOW

    mean = train_images.mean(axis=(0, 2, 3))
    std = train_images.std(axis=(0, 2, 3))
    std[std < 1e-3] = 1e-3

    model, arch = build_model(arch, train_images.shape[1:], NUM_CLASSES)
    optimizer = torch.optim.Adam(model.parameters(), lr=2e-3, weight_decay=1e-4)
    scheduler = torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=max(1, (2 * epochs) // 3), gamma=0.3
    )
    loss_fn = nn.BCEWithLogitsLoss()

    n = train_images.shape[0]
    val_x = normalize_batch(val_images, mean, std)
    val_y = torch.as_tensor(val_labels, dtype=torch.long)
    acc = 0.0
    for _epoch in range(epochs):
        model.train()
        order = rng.permutation(n)
        augmented = _augment(train_images[order], mean, rng)
        targets = smoothed[order]
        for start in range(0, n, batch_size):
            xb = normalize_batch(augmented[start : start + batch_size], mean, std)
            yb = torch.as_tensor(targets[start : start + batch_size], dtype=torch.float32)
            optimizer.zero_grad()
            loss = loss_fn(model(xb), yb)
            loss.backward()
            optimizer.step()
        scheduler.step()
        model.eval()
        with torch.no_grad():
            acc = float((model(val_x).argmax(dim=1) == val_y).float().mean())
    if acc < target_accuracy:
        raise RuntimeError(f"validation accuracy {acc:.3f} below target {target_accuracy}")
    return {
        "arch": arch,
        "state": {k: v.detach().numpy() for k, v in model.state_dict().items()},
        "mean": mean,
        "std": std,
        "class_count": NUM_CLASSES,
        "input_shape": tuple(train_images.shape[1:]),
        "seed": seed,
        "val_accuracy": acc,
    }


def rebuild(checkpoint):
    """Torch model from a checkpoint dict."""
    model, _ = build_model(checkpoint["arch"], checkpoint["input_shape"],
                           checkpoint["class_count"])
    state = {k: torch.as_tensor(v) for k, v in checkpoint["state"].items()}
    model.load_state_dict(state)
    model.eval()
    return model


def model_logits(checkpoint, images):
    """Float32 logits of the checkpointed model on [0,1] images."""
    model = rebuild(checkpoint)
    with torch.no_grad():
        out = model(normalize_batch(images, checkpoint["mean"], checkpoint["std"]))
    return out.numpy().astype(np.float32)
