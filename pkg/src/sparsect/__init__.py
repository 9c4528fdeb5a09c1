"""Sparse-view CT toolkit: phantoms, projection, FBP, TV denoising, a small
numpy neural-network stack, statistics and the experiment orchestrator."""

from . import core, fbp, fft, metrics, models, nn, phantom, pipeline, projector, stats, tvdenoise

__all__ = [
    "core",
    "fbp",
    "fft",
    "metrics",
    "models",
    "nn",
    "phantom",
    "pipeline",
    "projector",
    "stats",
    "tvdenoise",
]

__version__ = "0.1.0"
