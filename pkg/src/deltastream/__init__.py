"""Sparse CNN inference over frame differences for moving-camera video."""

from .network import DeltaEngine, EngineConfig, Layer, NetworkSpec, run_dense, validate
from .tensor_core import ConvParams, FlopReport

__all__ = ["ConvParams", "DeltaEngine", "EngineConfig", "FlopReport", "Layer", "NetworkSpec", "run_dense", "validate"]
__version__ = "0.1.0"
