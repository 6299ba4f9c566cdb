"""Reference trainable patch-descriptor plugin.

Whitened hand-rolled gradient features, linearly projected to 128
dims, refined with a triplet margin loss. Speaks the descriptor wire
protocol as a child process; see serve.main.
"""

from .model import OUT_DIM, PluginModel, load_model, save_model, untrained_model
from .serve import NAME, PATCH_SIZE, PluginServer
from .train import train_model

__all__ = [
    "NAME",
    "OUT_DIM",
    "PATCH_SIZE",
    "PluginModel",
    "PluginServer",
    "load_model",
    "save_model",
    "train_model",
    "untrained_model",
]
