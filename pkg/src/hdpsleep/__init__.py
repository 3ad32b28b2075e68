"""Oscillatory state discovery with multitaper spectra and an HDP-HMM."""
from .clustering import weighted_kmeans
from .inference import BeamSampler, InferenceConfig, PosteriorSample, run_chain
from .signal import observe
from .simulator import default_stages, default_transition, simulate

__version__ = "0.1.0"

__all__ = [
    "BeamSampler",
    "InferenceConfig",
    "PosteriorSample",
    "default_stages",
    "default_transition",
    "observe",
    "run_chain",
    "simulate",
    "weighted_kmeans",
]
