"""Differential testing of int8-quantized hyperspectral image classifiers.

A search looks for small, semantics-preserving distortions of labelled
hyperspectral patches on which a full-precision model and its quantized
copy disagree.
"""

from hsidiff.distortions import FAMILIES, DistortionBounds, Layout, decode, tune_bounds
from hsidiff.fitness import Evaluator, FitnessMode, Subjects, evaluate, f_cov, f_div, jsd
from hsidiff.metrics import (
    SessionReport, divergence_rate, fdi, success_rate, validation_rate, vargha_delaney_a12,
    wilcoxon_signed_rank,
)
from hsidiff.nn import ModelSpec, NeuronIntervals, forward, predict_label, profile_intervals
from hsidiff.patches import Patch3D, PatchSet, psnr, read_patchset, write_patchset
from hsidiff.quantize import QuantizedModel, quantize_weights, quantized_forward
from hsidiff.search import DiiTracker, SessionConfig, run_session

__version__ = "0.1.0"

__all__ = [
    "FAMILIES", "DistortionBounds", "Layout", "decode", "tune_bounds",
    "Evaluator", "FitnessMode", "Subjects", "evaluate", "f_cov", "f_div", "jsd",
    "SessionReport", "divergence_rate", "fdi", "success_rate", "validation_rate",
    "vargha_delaney_a12", "wilcoxon_signed_rank",
    "ModelSpec", "NeuronIntervals", "forward", "predict_label", "profile_intervals",
    "Patch3D", "PatchSet", "psnr", "read_patchset", "write_patchset",
    "QuantizedModel", "quantize_weights", "quantized_forward",
    "DiiTracker", "SessionConfig", "run_session",
]
