"""Synthetic shapes-on-background image generator with exact masks.

Images are 3×H×W floats in [0, 1], quantized to 8 bits at creation time so
in-memory data and the PPM files on disk are identical. Every class is a
geometric shape; colors and positions are randomized so shape, not color,
is the discriminative feature.
"""

import csv
import os

import numpy as np

CLASS_NAMES = ("square", "circle", "triangle", "plus", "ring", "diamond")
NUM_CLASSES = len(CLASS_NAMES)


def shape_mask(kind, size, cy, cx, s):
    """Boolean support of one shape with half-extent ``s`` at (cy, cx)."""
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - cy
    dx = xx - cx
    if kind == 0:  # square
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if kind == 1:  # circle
        return dy**2 + dx**2 <= s**2
    if kind == 2:  # triangle (apex up)
        return (dy >= -s) & (dy <= s) & (np.abs(dx) <= (dy + s) / 2)
    if kind == 3:  # plus
        arm = max(1, s // 3)
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= s)) | (
            (np.abs(dx) <= arm) & (np.abs(dy) <= s)
        )
    if kind == 4:  # ring
        rr = dy**2 + dx**2
        return (rr <= s**2) & (rr >= (0.55 * s) ** 2)
    if kind == 5:  # diamond
        return np.abs(dy) + np.abs(dx) <= s
    raise ValueError(f"unknown shape class {kind}")


def _quantize(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def _background(rng, size):
    base = rng.uniform(0.15, 0.85, size=3)
    noise = rng.normal(0.0, 0.04, size=(3, size, size))
    return base[:, None, None] + noise


def _shape_color(rng, base):
    # resample until clearly distinguishable from the background base color
    while True:
        color = rng.uniform(0.0, 1.0, size=3)
        if np.max(np.abs(color - base)) > 0.35:
            return color


def _paint(canvas, mask, color, rng):
    noisy = color[:, None] + rng.normal(0.0, 0.03, size=(3, int(mask.sum())))
    canvas[:, mask] = noisy
    return canvas


def make_single(rng, size=32):
    """One image with a single shape; returns (image, label, mask)."""
    label = int(rng.integers(0, NUM_CLASSES))
    canvas = _background(rng, size)
    base = canvas.mean(axis=(1, 2))
    s = int(rng.integers(5, 10))
    cy = int(rng.integers(s + 1, size - s - 1))
    cx = int(rng.integers(s + 1, size - s - 1))
    mask = shape_mask(label, size, cy, cx, s)
    _paint(canvas, mask, _shape_color(rng, base), rng)
    return _quantize(canvas), label, mask


def make_two_object(rng, size=32):
    """One image with two shapes of different classes and disjoint masks.

    Returns (image, [(label_a, mask_a), (label_b, mask_b)]).
    """
    label_a = int(rng.integers(0, NUM_CLASSES))
    label_b = int((label_a + 1 + rng.integers(0, NUM_CLASSES - 1)) % NUM_CLASSES)
    canvas = _background(rng, size)
    base = canvas.mean(axis=(1, 2))
    half = size // 2
    # keep each shape strictly inside its half so the placement range stays valid
    s_hi = half // 2 - 2
    while True:
        s_a = int(rng.integers(4, s_hi + 1))
        s_b = int(rng.integers(4, s_hi + 1))
        cy_a = int(rng.integers(s_a + 1, size - s_a - 1))
        cy_b = int(rng.integers(s_b + 1, size - s_b - 1))
        cx_a = int(rng.integers(s_a + 1, half - s_a - 1))
        cx_b = int(rng.integers(half + s_b + 1, size - s_b - 1))
        mask_a = shape_mask(label_a, size, cy_a, cx_a, s_a)
        mask_b = shape_mask(label_b, size, cy_b, cx_b, s_b)
        if not (mask_a & mask_b).any():
            break
    _paint(canvas, mask_a, _shape_color(rng, base), rng)
    _paint(canvas, mask_b, _shape_color(rng, base), rng)
    return _quantize(canvas), [(label_a, mask_a), (label_b, mask_b)]


# ---------------------------------------------------------------------------
# netpbm writers (format-compatible with the explainability engine's readers)


def write_ppm(path, image):
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    _, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(data.transpose(1, 2, 0).tobytes())


def write_pgm(path, values):
    data = np.asarray(values).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: expected binary PPM")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        raw = fh.read(w * h * 3)
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / maxval


def write_single_dataset(root, count, seed, size=32):
    """Single-shape dataset directory: images/, masks/, labels.csv."""
    rng = np.random.default_rng(seed)
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    rows = []
    for i in range(count):
        image, label, mask = make_single(rng, size)
        name = f"img_{i:04d}"
        write_ppm(os.path.join(root, "images", f"{name}.ppm"), image)
        write_pgm(os.path.join(root, "masks", f"{name}_{label}.pgm"), mask * 255)
        rows.append((f"{name}.ppm", label))
    _write_labels(root, rows)
    return rows


def write_two_object_dataset(root, count, seed, size=32):
    """Two-shape dataset: one labels.csv row and one mask per (image, class)."""
    rng = np.random.default_rng(seed)
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    rows = []
    for i in range(count):
        image, objects = make_two_object(rng, size)
        name = f"pair_{i:04d}"
        write_ppm(os.path.join(root, "images", f"{name}.ppm"), image)
        for label, mask in objects:
            write_pgm(os.path.join(root, "masks", f"{name}_{label}.pgm"), mask * 255)
            rows.append((f"{name}.ppm", label))
    _write_labels(root, rows)
    return rows


def _write_labels(root, rows):
    with open(os.path.join(root, "labels.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label"])
        writer.writerows(rows)


def load_dataset_arrays(root):
    """Read a dataset directory back into (images, labels, filenames)."""
    images, labels, names = [], [], []
    with open(os.path.join(root, "labels.csv"), encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for fname, label in reader:
            images.append(read_ppm(os.path.join(root, "images", fname)))
            labels.append(int(label))
            names.append(fname)
    return np.stack(images), np.asarray(labels), names
