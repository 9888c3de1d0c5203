from . import functional
from .functional import ConvSpec
from .layers import BatchNorm2d, Conv2d, Linear, Module, Parameter, PReLU

__all__ = ["functional", "ConvSpec", "BatchNorm2d", "Conv2d", "Linear", "Module", "Parameter", "PReLU"]
