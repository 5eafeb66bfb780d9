"""WILSON diagnostics: inverse-free loop curvature, activation commutators,
gauge-fixed logging and invariance scoring on a deterministic toy Transformer."""

from wilson.refmodel import ModelSpec, ModelWeights, forward, init_model
from wilson.curvature import LoopSpec, LoopScore, SamplingKnobs, kappa_inv_estimate, scan_then_confirm
from wilson.gate import Thresholds

__all__ = [
    "ModelSpec",
    "ModelWeights",
    "forward",
    "init_model",
    "LoopSpec",
    "LoopScore",
    "SamplingKnobs",
    "kappa_inv_estimate",
    "scan_then_confirm",
    "Thresholds",
]

__version__ = "0.1.0"
