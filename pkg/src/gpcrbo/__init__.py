"""Gaussian process regression with crash-aware likelihood and constrained
min-value entropy search."""

from .acquisition import AcquisitionConfig, MinValueSamples, alpha_mes, alpha_mesco, sample_constrained_min
from .gpcr import (
    NO_THRESHOLD,
    GPCRModel,
    HybridDataset,
    ThresholdPrior,
    estimate_threshold_map,
    estimate_threshold_ml,
    fit,
    predict,
    log_prob_stable,
    prob_stable,
)
from .kernels import KernelSpec, NoiseSpec
from .loop import Case, CaseConfig, CoupledObservation, FunctionSpec, Label, run

__all__ = [
    "AcquisitionConfig",
    "Case",
    "CaseConfig",
    "CoupledObservation",
    "FunctionSpec",
    "GPCRModel",
    "HybridDataset",
    "KernelSpec",
    "Label",
    "MinValueSamples",
    "NO_THRESHOLD",
    "NoiseSpec",
    "ThresholdPrior",
    "alpha_mes",
    "alpha_mesco",
    "estimate_threshold_map",
    "estimate_threshold_ml",
    "fit",
    "predict",
    "log_prob_stable",
    "prob_stable",
    "run",
    "sample_constrained_min",
]
