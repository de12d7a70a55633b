"""Offline tooling that trains toy CNNs and exports engine-ready bundles."""

from .export import export_modelpack, export_split, reference_logits
from .shapes import make_single, make_two_object, write_single_dataset, write_two_object_dataset
from .train import train_classifier

__all__ = [
    "export_modelpack",
    "export_split",
    "make_single",
    "make_two_object",
    "reference_logits",
    "train_classifier",
    "write_single_dataset",
    "write_two_object_dataset",
]
