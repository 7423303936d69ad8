"""Flow-matching MM-DiT on procedural scenes, with vital-layer detection and injection editing."""

from .estimators import FlowMatchingGenerator, StableFlowEditor, VitalLayerSelector
from .mmdit import LayerHooks, MMDiT, ModelConfig, load_checkpoint

__version__ = "0.1.0"

__all__ = [
    "FlowMatchingGenerator",
    "LayerHooks",
    "MMDiT",
    "ModelConfig",
    "StableFlowEditor",
    "VitalLayerSelector",
    "load_checkpoint",
]
