"""Netpbm image I/O and the on-disk dataset directory layout.

A dataset directory holds ``images/*.ppm|*.pgm`` (binary P6/P5, 8-bit),
``labels.csv`` with a ``filename,label`` header, and optionally
``masks/*.pgm`` where nonzero means foreground. An image may appear under
several labels (multi-object scenes); its per-class mask is
``masks/<stem>_<label>.pgm``, with ``masks/<stem>.pgm`` as the single-mask
fallback.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np


class DatasetError(ValueError):
    pass


def _read_netpbm_header(fh, path):
    def token():
        # skip whitespace and '#' comments between header fields
        out = b""
        while True:
            ch = fh.read(1)
            if not ch:
                raise DatasetError(f"{path}: truncated netpbm header")
            if ch == b"#":
                while ch not in (b"\n", b""):
                    ch = fh.read(1)
                continue
            if ch.isspace():
                if out:
                    return out
                continue
            out += ch

    magic = token()
    if magic not in (b"P5", b"P6"):
        raise DatasetError(f"{path}: unsupported netpbm magic {magic!r}")
    width = int(token())
    height = int(token())
    maxval = int(token())
    if not 0 < maxval < 65536:
        raise DatasetError(f"{path}: bad maxval {maxval}")
    return magic, width, height, maxval


def read_netpbm(path):
    """Read a binary PGM/PPM as channel-first floats in [0, 1].

    PGM gives shape 1×H×W, PPM gives 3×H×W.
    """
    with open(path, "rb") as fh:
        magic, width, height, maxval = _read_netpbm_header(fh, path)
        channels = 1 if magic == b"P5" else 3
        if maxval > 255:
            raise DatasetError(f"{path}: 16-bit netpbm not supported")
        raw = fh.read(width * height * channels)
    if len(raw) != width * height * channels:
        raise DatasetError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / maxval
    if channels == 1:
        return arr.reshape(1, height, width)
    return arr.reshape(height, width, 3).transpose(2, 0, 1)


def read_mask(path):
    """Read a PGM mask; nonzero pixels are foreground."""
    arr = read_netpbm(path)
    if arr.shape[0] != 1:
        raise DatasetError(f"{path}: mask must be grayscale")
    return arr[0] > 0


def write_pgm(path, values):
    """Write an H×W uint8 array as binary PGM."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise DatasetError(f"PGM needs an H×W array, got shape {values.shape}")
    data = values.astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def write_ppm(path, image):
    """Write a 3×H×W float image in [0, 1] as binary PPM."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DatasetError(f"PPM needs a 3×H×W array, got shape {image.shape}")
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    _, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(data.transpose(1, 2, 0).tobytes())


@dataclass
class Record:
    """One labeled image, optionally with a ground-truth mask."""

    image_path: str
    label: int
    mask_path: str = None

    @property
    def name(self):
        return os.path.basename(self.image_path)

    def load_image(self):
        return read_netpbm(self.image_path)

    def load_mask(self):
        if self.mask_path is None:
            return None
        return read_mask(self.mask_path)


def load_dataset(root):
    """Read ``labels.csv`` and resolve image/mask paths, in file order."""
    labels_path = os.path.join(root, "labels.csv")
    images_dir = os.path.join(root, "images")
    masks_dir = os.path.join(root, "masks")
    if not os.path.isfile(labels_path):
        raise DatasetError(f"{root}: missing labels.csv")
    records = []
    with open(labels_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip().lower() for c in header[:2]] != ["filename", "label"]:
            raise DatasetError(f"{labels_path}: expected 'filename,label' header")
        for row_no, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) < 2:
                raise DatasetError(f"{labels_path}:{row_no}: malformed row")
            fname = row[0].strip()
            try:
                label = int(row[1])
            except ValueError as exc:
                raise DatasetError(f"{labels_path}:{row_no}: label must be an integer") from exc
            image_path = os.path.join(images_dir, fname)
            if not os.path.isfile(image_path):
                raise DatasetError(f"{labels_path}:{row_no}: missing image {fname}")
            stem = os.path.splitext(fname)[0]
            mask_path = None
            for candidate in (f"{stem}_{label}.pgm", f"{stem}.pgm"):
                cand_path = os.path.join(masks_dir, candidate)
                if os.path.isfile(cand_path):
                    mask_path = cand_path
                    break
            records.append(Record(image_path=image_path, label=label, mask_path=mask_path))
    if not records:
        raise DatasetError(f"{root}: labels.csv lists no images")
    return records
