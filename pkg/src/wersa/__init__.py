"""Wavelet-enhanced random spectral attention (WERSA) in float64 numpy."""

from .attention import (
    ABLATIONS,
    WersaConfig,
    WersaParams,
    init_params,
    mha_forward,
    trainable_parameters,
    wersa_forward,
)
from .estimators import WersaAttention, WersaClassifier
from .spectral import RandomFeatureMap, kernel_error_probe, linear_attention, phi
from .tensor import RngState
from .wavelet import CoefficientCache, WaveletPyramid, dwt, filtered_idwt, idwt

__all__ = [
    "ABLATIONS",
    "CoefficientCache",
    "RandomFeatureMap",
    "RngState",
    "WaveletPyramid",
    "WersaAttention",
    "WersaClassifier",
    "WersaConfig",
    "WersaParams",
    "dwt",
    "filtered_idwt",
    "idwt",
    "init_params",
    "kernel_error_probe",
    "linear_attention",
    "mha_forward",
    "phi",
    "trainable_parameters",
    "wersa_forward",
]

__version__ = "0.1.0"
