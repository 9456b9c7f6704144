"""Minimal dense-tensor kernels, layers, gradient checking and checkpoints.

Feature maps are plain ``numpy.ndarray`` objects in N, C, H, W order;
trainable tensors are wrapped in :class:`Parameter`, which adds a gradient
buffer of the same shape.
"""
from imcnet.tensor.layers import (Conv2d, Module, ModuleList, Parameter, ReLU,
                                  ResidualBlock, Sequential, Sigmoid)
from imcnet.tensor.ops import ConvParams, conv2d, conv2d_backward

__all__ = ["Conv2d", "ConvParams", "Module", "ModuleList", "Parameter", "ReLU",
           "ResidualBlock", "Sequential", "Sigmoid", "conv2d", "conv2d_backward"]
