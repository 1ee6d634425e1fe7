"""Minimal float64 tensor engine with reverse-mode autodiff."""
from .autograd import Tensor
from .layers import AvgPool, Conv2d, Dense, Flatten, Layer, ReLU, ShapeError, layer_from_spec
from .network import GradientSet, Network, build_network, forward, input_grad, loss_and_grad

__all__ = [
    "AvgPool", "Conv2d", "Dense", "Flatten", "GradientSet", "Layer", "Network", "ReLU",
    "ShapeError", "Tensor", "build_network", "forward", "input_grad", "layer_from_spec",
    "loss_and_grad",
]
