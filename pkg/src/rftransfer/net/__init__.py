from .adam import AdamState, adam_step
from .convnet import Architecture, ConvNetParams, Tape, cnn_backward, cnn_forward
from .mlp import MLPParams, mlp_backward, mlp_forward

__all__ = [
    "AdamState", "adam_step",
    "Architecture", "ConvNetParams", "Tape", "cnn_backward", "cnn_forward",
    "MLPParams", "mlp_backward", "mlp_forward",
]
