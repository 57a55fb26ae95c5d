"""Minimal NHWC tensor engine: layers, networks, loss, checkpoints."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .layers import (
    Concat,
    Conv2d,
    FullyConnected,
    GlobalAvgPool,
    MaxPool2d,
    ReLU,
    SoftmaxOutput,
)
from .network import (
    InitPolicy,
    Network,
    build_network,
    init_weights,
    loss_softmax_xent,
    random_init_layers,
    softmax,
)
from .presets import PRESETS, preset_spec

__all__ = [
    "Checkpoint", "Concat", "Conv2d", "FullyConnected", "GlobalAvgPool", "InitPolicy", "MaxPool2d",
    "Network", "PRESETS", "ReLU", "SoftmaxOutput", "build_network", "init_weights", "load_checkpoint",
    "loss_softmax_xent", "preset_spec", "random_init_layers", "save_checkpoint", "softmax",
]
