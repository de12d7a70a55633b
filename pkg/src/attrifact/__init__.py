"""Class-specific attribution heatmaps for small sequential CNNs."""

from .agf import AgfConfig, explain, explain_trace, initial_attribution, ssl_explain
from .attribution import GenericRuleConfig, clrp, delta_shift, generic_rule, grad_cam, lrp
from .backprop import GradientTrace, backward
from .evaluation import negative_perturbation, render_heatmap, segmentation_eval
from .factorization import guided_factorization
from .model import ForwardTrace, Layer, Model, forward, load_modelpack, save_modelpack

__version__ = "0.1.0"

__all__ = [
    "AgfConfig",
    "ForwardTrace",
    "GenericRuleConfig",
    "GradientTrace",
    "Layer",
    "Model",
    "backward",
    "clrp",
    "delta_shift",
    "explain",
    "explain_trace",
    "forward",
    "generic_rule",
    "grad_cam",
    "guided_factorization",
    "initial_attribution",
    "load_modelpack",
    "lrp",
    "negative_perturbation",
    "render_heatmap",
    "save_modelpack",
    "segmentation_eval",
    "ssl_explain",
]
