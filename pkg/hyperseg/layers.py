"""Parameter containers and the two learnable layer kinds the network uses."""

import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import ShapeError
from .tensor_core import Tensor, add, conv2d, matmul, ones, reshape


class Parameter(Tensor):
    """Leaf tensor that always requires a gradient and can be reassigned."""

    __slots__ = ()

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise ShapeError(f"cannot assign shape {value.shape} to parameter of shape {self.data.shape}")
        self.data = value.copy()


class Module:
    """Base class; parameters and sub-modules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{name}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{name}.{index}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{index}", item

    def parameters(self) -> List[Parameter]:
        return [param for _, param in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(param.size for param in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
        """Copy matching entries into this module; returns the names loaded."""
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise ShapeError(f"state mismatch: missing={missing} unexpected={unexpected}")
        loaded = []
        for name, value in state.items():
            if name in own:
                own[name].assign(value)
                loaded.append(name)
        return loaded

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()


class Linear(Module):
    """Affine map on row vectors: X (N x in) -> X W + b (N x out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 zero_init: bool = False):
        if zero_init:
            weight = np.zeros((in_features, out_features))
        else:
            weight = rng.normal(0.0, 1.0 / math.sqrt(in_features), size=(in_features, out_features))
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        rows = x.shape[0]
        bias_rows = matmul(ones((rows, 1)), reshape(self.bias, (1, -1)))
        return add(matmul(x, self.weight), bias_rows)


class Conv2d(Module):
    """k x k convolution with "same" zero padding and He-normal initialisation."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 dilation: int = 1, stride: int = 1, zero_init: bool = False):
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if zero_init:
            weight = np.zeros(shape)
        else:
            fan_in = in_channels * kernel_size * kernel_size
            weight = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_channels))
        self.dilation = dilation
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, dilation=self.dilation, stride=self.stride)
