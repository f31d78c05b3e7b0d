"""A small numpy neural-network engine: layers, reverse-mode gradients, optimizers, cost accounting."""
from .cost import FLOP_CONVENTION, CostReport, LayerCost, count_cost
from .graph import Gradients, ModelGraph, NumericError, backward, forward
from .layers import (
    Concat,
    Conv1D,
    Conv2D,
    Dense,
    Flatten,
    Layer,
    MaxPool1D,
    MaxPool2D,
    ReLU,
    Reshape,
    ShapeError,
    Softmax,
    log_softmax,
    softmax,
)
from .optim import SGD, Adam, adam_step, cross_entropy, sgd_step
from .serialize import ModelFileError, load_model, save_model

__all__ = [
    "FLOP_CONVENTION",
    "CostReport",
    "LayerCost",
    "count_cost",
    "Gradients",
    "ModelGraph",
    "NumericError",
    "backward",
    "forward",
    "Concat",
    "Conv1D",
    "Conv2D",
    "Dense",
    "Flatten",
    "Layer",
    "MaxPool1D",
    "MaxPool2D",
    "ReLU",
    "Reshape",
    "ShapeError",
    "Softmax",
    "log_softmax",
    "softmax",
    "SGD",
    "Adam",
    "adam_step",
    "cross_entropy",
    "sgd_step",
    "ModelFileError",
    "load_model",
    "save_model",
]
