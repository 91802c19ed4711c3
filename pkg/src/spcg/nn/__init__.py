from .layers import (
    DFA,
    OOL,
    IRNUnit,
    Module,
    Param,
    ReLU,
    SConv,
    SConvDown,
    Sequential,
    Sigmoid,
    TSConvUp,
    sigmoid,
)
from .optim import Adam, adam_step, cosine_lr

__all__ = [
    "DFA", "OOL", "IRNUnit", "Module", "Param", "ReLU", "SConv", "SConvDown",
    "Sequential", "Sigmoid", "TSConvUp", "sigmoid", "Adam", "adam_step", "cosine_lr",
]
