"""Anatomy-aware self-supervised pretraining from three learning perspectives
(extrapolation, order correction, composition/decomposition) with zero-shot
anatomy probes."""

__version__ = "0.1.0"
